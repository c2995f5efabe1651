"""Post-processing re-rankers trading base relevance against popularity:
popularity-weighted scoring and two greedy xQuAD variants over a Head vs
non-Head (Mid and Tail) category split."""

from __future__ import annotations

import numpy as np

from .data import Bucket, PopularityStats, SplitDataset
from .model import RecommendationRun

# candidates are a deeper top-C run of the base model
ScoredCandidates = RecommendationRun
DEFAULT_POOL = 100


def _check(cands: ScoredCandidates, strength: float, k: int) -> None:
    if not 0 <= strength <= 1:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    if k < 1 or k > cands.k:
        raise ValueError(f"k must be in [1, {cands.k}]")


def _minmax(scores: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant row maps to 1."""
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.ones_like(scores)
    return (scores - lo) / (hi - lo)


def _user_candidates(cands: ScoredCandidates, u: int) -> tuple[np.ndarray, np.ndarray]:
    row = cands.items[u]
    ok = row >= 0
    return row[ok], cands.scores[u][ok]


def _emit(k: int, picked: list[tuple[np.ndarray, np.ndarray]], provenance: dict) -> RecommendationRun:
    items = np.full((len(picked), k), -1, dtype=np.int64)
    scores = np.full((len(picked), k), np.nan)
    for u, (it, sc) in enumerate(picked):
        items[u, : len(it)] = it
        scores[u, : len(sc)] = sc
    return RecommendationRun(k, items, scores, provenance)


def pop_weighted_rerank(
    cands: ScoredCandidates, stats: PopularityStats, strength: float, k: int
) -> RecommendationRun:
    """Re-score by ``norm(s) * (1 - strength * pop[i])`` and keep the top k
    (candidate order breaks ties)."""
    _check(cands, strength, k)
    out = []
    for u in range(cands.n_users):
        items, scores = _user_candidates(cands, u)
        if items.size == 0:
            out.append((items, scores))
            continue
        norm = _minmax(scores)
        adjusted = (1 - strength) * norm + strength * norm * (1 - stats.pop[items])
        order = np.argsort(-adjusted, kind="stable")[:k]
        out.append((items[order], adjusted[order]))
    return _emit(k, out, {**cands.provenance, "rerank": "pop_weighted", "strength": strength})


def _greedy_xquad(
    items: np.ndarray,
    norm: np.ndarray,
    is_head: np.ndarray,
    p_head: float,
    strength: float,
    k: int,
    smooth: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy selection of ``argmax (1 - strength) * norm + strength * diversity``.

    Diversity is ``sum_c P(c|u) * [i in c] * coverage_c(S)`` over the two
    categories, where ``coverage_c(S)`` is 1 until an item of ``c`` is
    picked (binary) or ``1 - picked_c / |S|`` (smooth).
    """
    available = np.ones(items.size, dtype=bool)
    chosen, utils = [], []
    picked_head = picked_other = 0
    for step in range(min(k, items.size)):
        if smooth:
            cov_head = 1.0 - picked_head / step if step else 1.0
            cov_other = 1.0 - picked_other / step if step else 1.0
        else:
            cov_head = 0.0 if picked_head else 1.0
            cov_other = 0.0 if picked_other else 1.0
        div = np.where(is_head, p_head * cov_head, (1 - p_head) * cov_other)
        util = (1 - strength) * norm + strength * div
        util = np.where(available, util, -np.inf)
        best = int(np.argmax(util))
        available[best] = False
        chosen.append(best)
        utils.append(util[best])
        if is_head[best]:
            picked_head += 1
        else:
            picked_other += 1
    idx = np.array(chosen, dtype=np.int64)
    return items[idx], np.array(utils)


def binary_xquad(
    cands: ScoredCandidates, stats: PopularityStats, strength: float, k: int
) -> RecommendationRun:
    """xQuAD with uniform category likelihoods and binary coverage: once a
    non-Head item is in the list, further non-Head items earn no bonus."""
    _check(cands, strength, k)
    out = []
    for u in range(cands.n_users):
        items, scores = _user_candidates(cands, u)
        if items.size == 0:
            out.append((items, scores))
            continue
        is_head = stats.bucket[items] == Bucket.HEAD
        out.append(_greedy_xquad(items, _minmax(scores), is_head, 0.5, strength, k, smooth=False))
    return _emit(k, out, {**cands.provenance, "rerank": "binary_xquad", "strength": strength})


def profile_ratios(split: SplitDataset, stats: PopularityStats) -> np.ndarray:
    """Per user: share of train items outside Head; 0.5 for empty profiles."""
    nonhead = (stats.bucket != Bucket.HEAD).astype(np.float64)
    n = np.diff(split.train.indptr)
    other = split.train.astype(np.float64) @ nonhead
    return np.where(n > 0, other / np.maximum(n, 1), 0.5)


def smooth_xquad(
    cands: ScoredCandidates,
    stats: PopularityStats,
    profile_ratio,
    strength: float,
    k: int,
) -> RecommendationRun:
    """xQuAD with ``P(non-Head | u) = profile_ratio[u]`` and fractional
    coverage ``1 - picked_c / |S|``."""
    _check(cands, strength, k)
    ratio = np.broadcast_to(np.asarray(profile_ratio, dtype=np.float64), (cands.n_users,))
    out = []
    for u in range(cands.n_users):
        items, scores = _user_candidates(cands, u)
        if items.size == 0:
            out.append((items, scores))
            continue
        r = ratio[u] if np.isfinite(ratio[u]) else 0.5
        is_head = stats.bucket[items] == Bucket.HEAD
        out.append(_greedy_xquad(items, _minmax(scores), is_head, 1.0 - r, strength, k, smooth=True))
    return _emit(k, out, {**cands.provenance, "rerank": "smooth_xquad", "strength": strength})


RERANKERS = ("pop_weighted", "binary_xquad", "smooth_xquad")


def apply_reranker(
    method: str,
    cands: ScoredCandidates,
    split: SplitDataset,
    stats: PopularityStats,
    strength: float,
    k: int,
) -> RecommendationRun:
    if method == "pop_weighted":
        return pop_weighted_rerank(cands, stats, strength, k)
    if method == "binary_xquad":
        return binary_xquad(cands, stats, strength, k)
    if method == "smooth_xquad":
        return smooth_xquad(cands, stats, profile_ratios(split, stats), strength, k)
    raise ValueError(f"unknown re-ranker {method!r}; expected one of {RERANKERS}")
