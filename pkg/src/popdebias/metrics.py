"""Evaluation: popularity-bias metrics (item statistical parity, item equal
opportunity), top-k accuracy, novelty, coverage, and the pair-wise accuracy
and relevance-distribution diagnostics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import Bucket, PopularityStats, SplitDataset
from .errors import DataError
from .model import FactorModel, RecommendationRun

VARIANTS = ("full", "balanced")


def gini(values) -> float:
    """Gini index of non-negative values.

    With ``x`` sorted ascending, ``sum((2i - n - 1) x_i) / (n sum(x))`` for
    i = 1..n. Zero for an all-zero vector.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("gini of an empty vector")
    if (x < 0).any():
        raise ValueError("gini is undefined for negative values")
    total = x.sum()
    if total == 0:
        return 0.0
    n = x.size
    ranks = 2.0 * np.arange(1, n + 1) - n - 1
    return float(np.clip((ranks @ x) / (n * total), 0.0, 1.0))


def _hit_matrix(run: RecommendationRun, n_items: int) -> sp.csr_matrix:
    rows = np.repeat(np.arange(run.n_users), run.items.shape[1])
    cols = run.items.ravel()
    ok = cols >= 0
    return sp.csr_matrix(
        (np.ones(int(ok.sum()), dtype=np.int32), (rows[ok], cols[ok])), shape=(run.n_users, n_items)
    )


def exposure_probability(run: RecommendationRun, split: SplitDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per item: users receiving it in their top-k over users who never
    interacted with it in train.

    Returns ``(p, eligible)``; items nobody can receive have ``p = 0`` and
    ``eligible = False``.
    """
    if run.n_users != split.n_users:
        raise DataError("run and split disagree on the number of users")
    recommended = np.bincount(run.items[run.items >= 0], minlength=split.n_items)
    observed = np.bincount(split.train.indices, minlength=split.n_items)
    denom = split.n_users - observed
    eligible = denom > 0
    p = np.zeros(split.n_items)
    p[eligible] = recommended[eligible] / denom[eligible]
    return p, eligible


def isp(run: RecommendationRun, split: SplitDataset) -> float:
    """1 - Gini of exposure probabilities over items some user can receive."""
    p, eligible = exposure_probability(run, split)
    return 1.0 - gini(p[eligible])


def true_positive_rate(run: RecommendationRun, test: sp.spmatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per test item: share of the users holding it in test who got it in
    their top-k. Returns ``(items, rates)``; items absent from test are left
    out."""
    test = sp.csr_matrix(test)
    if test.nnz == 0:
        raise DataError("empty test relation")
    test.data[:] = 1
    hits = test.multiply(_hit_matrix(run, test.shape[1]))
    relevant = np.bincount(test.indices, minlength=test.shape[1])
    got = np.bincount(sp.csr_matrix(hits).indices, minlength=test.shape[1])
    items = np.flatnonzero(relevant)
    return items, got[items] / relevant[items]


def ieo(run: RecommendationRun, test: sp.spmatrix) -> float:
    """1 - Gini of per-item true positive rates over test items."""
    _, rates = true_positive_rate(run, test)
    if rates.size == 0:
        raise DataError("no test items")
    return 1.0 - gini(rates)


def ranking_accuracy(run: RecommendationRun, test: sp.spmatrix) -> dict[str, float]:
    """Mean NDCG, precision and recall at ``run.k`` over users with test items.

    Binary gains, ``1 / log2(rank + 1)`` discount, ideal DCG over
    ``min(k, |test_u|)`` hits.
    """
    test = sp.csr_matrix(test)
    if test.nnz == 0:
        raise DataError("empty test relation")
    k = run.k
    n_rel = np.diff(test.indptr)
    users = np.flatnonzero(n_rel)
    items = run.items[users]
    rel = np.zeros(items.shape, dtype=bool)
    valid = items >= 0
    uu = np.repeat(users, k).reshape(items.shape)
    rel[valid] = np.asarray(test[uu[valid], items[valid]]).ravel() > 0
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = rel @ disc
    ideal_cut = np.minimum(n_rel[users], k)
    idcg = np.concatenate([[0.0], np.cumsum(disc)])[ideal_cut]
    hits = rel.sum(1)
    return {
        "ndcg": float(np.mean(dcg / idcg)),
        "precision": float(np.mean(hits / k)),
        "recall": float(np.mean(hits / n_rel[users])),
    }


def novelty(run: RecommendationRun, stats: PopularityStats) -> float:
    """Mean of ``1 - pop[i]`` over all recommended slots."""
    items = run.items[run.items >= 0]
    if items.size == 0:
        return 0.0
    return float(np.mean(1.0 - stats.pop[items]))


def coverage(run: RecommendationRun, n_items: int) -> float:
    """Share of the catalog recommended to at least one user."""
    items = run.items[run.items >= 0]
    return len(np.unique(items)) / n_items


# --- internal-mechanics diagnostics -------------------------------------------

CELLS = (
    ("Head", "Any"),
    ("Mid", "Any"),
    ("Head", "Head"),
    ("Head", "Mid"),
    ("Mid", "Head"),
    ("Mid", "Mid"),
)
_BUCKETS = {
    "Head": (Bucket.HEAD,),
    "Mid": (Bucket.MID,),
    "Any": (Bucket.HEAD, Bucket.MID, Bucket.TAIL),
}


def _cell_members(split: SplitDataset, stats: PopularityStats, obs: str, unobs: str):
    """Per user: observed items in the ``obs`` bucket and unobserved items in
    the ``unobs`` bucket."""
    obs_mask = np.isin(stats.bucket, [int(b) for b in _BUCKETS[obs]])
    unobs_mask = np.isin(stats.bucket, [int(b) for b in _BUCKETS[unobs]])
    for u in range(split.n_users):
        seen = split.train_items(u)
        i_set = seen[obs_mask[seen]]
        if i_set.size == 0:
            continue
        cand = unobs_mask.copy()
        cand[seen] = False
        j_set = np.flatnonzero(cand)
        if j_set.size:
            yield u, i_set, j_set


def pairwise_accuracy_buckets(
    model: FactorModel,
    split: SplitDataset,
    stats: PopularityStats,
    samples_per_cell: int | None = 10_000,
    seed=0,
) -> dict[tuple[str, str], float | None]:
    """Share of (user, observed i, unobserved j) triplets with
    ``score(u, i) > score(u, j)`` per (observed bucket, unobserved bucket).

    ``samples_per_cell=None`` enumerates every valid triplet; otherwise
    triplets are drawn uniformly from the valid set. Ties count as failures.
    Cells without valid triplets map to None.
    """
    if not (stats.bucket == Bucket.HEAD).any() or not (stats.bucket == Bucket.MID).any():
        raise DataError("Head and Mid buckets must both be non-empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    table: dict[tuple[str, str], float | None] = {}
    for obs, unobs in CELLS:
        members = list(_cell_members(split, stats, obs, unobs))
        if not members:
            table[(obs, unobs)] = None
            continue
        if samples_per_cell is None:
            correct = total = 0
            for u, i_set, j_set in members:
                s = model.X @ model.W[u]
                sj = np.sort(s[j_set])
                correct += int(np.searchsorted(sj, s[i_set], side="left").sum())
                total += i_set.size * j_set.size
            table[(obs, unobs)] = correct / total
            continue
        weights = np.array([i.size * j.size for _, i, j in members], dtype=np.float64)
        picks = rng.choice(len(members), size=samples_per_cell, p=weights / weights.sum())
        users = np.empty(samples_per_cell, dtype=np.int64)
        ii = np.empty(samples_per_cell, dtype=np.int64)
        jj = np.empty(samples_per_cell, dtype=np.int64)
        for n, m in enumerate(picks):
            u, i_set, j_set = members[m]
            users[n] = u
            ii[n] = i_set[rng.integers(i_set.size)]
            jj[n] = j_set[rng.integers(j_set.size)]
        si = np.einsum("bd,bd->b", model.W[users], model.X[ii])
        sj = np.einsum("bd,bd->b", model.W[users], model.X[jj])
        table[(obs, unobs)] = float(np.mean(si > sj))
    return table


@dataclass
class RelevanceSample:
    users: np.ndarray
    head_items: np.ndarray
    mid_items: np.ndarray
    head_scores: np.ndarray
    mid_scores: np.ndarray


def relevance_distribution_sample(
    model: FactorModel,
    split: SplitDataset,
    stats: PopularityStats,
    pairs_per_user: int = 1,
    seed=0,
) -> RelevanceSample:
    """For each user with both Head and Mid train items, score
    ``pairs_per_user`` random (head, mid) pairs of their observed items."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    users, heads, mids = [], [], []
    for u in range(split.n_users):
        seen = split.train_items(u)
        h = seen[stats.bucket[seen] == Bucket.HEAD]
        m = seen[stats.bucket[seen] == Bucket.MID]
        if h.size == 0 or m.size == 0:
            continue
        users.append(np.full(pairs_per_user, u))
        heads.append(h[rng.integers(h.size, size=pairs_per_user)])
        mids.append(m[rng.integers(m.size, size=pairs_per_user)])
    if not users:
        raise DataError("no user has both observed Head and observed Mid items")
    users = np.concatenate(users)
    heads = np.concatenate(heads)
    mids = np.concatenate(mids)
    return RelevanceSample(
        users=users,
        head_items=heads,
        mid_items=mids,
        head_scores=np.einsum("bd,bd->b", model.W[users], model.X[heads]),
        mid_scores=np.einsum("bd,bd->b", model.W[users], model.X[mids]),
    )


def write_relevance_sample(sample: RelevanceSample, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("head_score\tmid_score\n")
        for h, m in zip(sample.head_scores, sample.mid_scores):
            fh.write(f"{h!r}\t{m!r}\n")


def write_pairwise_table(table: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["observed", "unobserved", "accuracy"])
        for (obs, unobs), acc in table.items():
            writer.writerow([obs, unobs, "" if acc is None else repr(acc)])


# --- reports ------------------------------------------------------------------

@dataclass
class MetricReport:
    """Scalar metrics keyed by (metric, cutoff, variant) plus per-item vectors."""

    values: dict[tuple[str, int, str], float] = field(default_factory=dict)
    vectors: dict[str, list] = field(default_factory=dict)
    flags: dict[str, list] = field(default_factory=dict)

    def get(self, metric: str, cutoff: int, variant: str = "full") -> float:
        return self.values[(metric, cutoff, variant)]

    @property
    def cutoffs(self) -> list[int]:
        return sorted({c for _, c, _ in self.values})

    def rows(self) -> list[tuple[str, int, str, float]]:
        return [(m, c, v, x) for (m, c, v), x in self.values.items()]


METRICS = ("ndcg", "precision", "recall", "isp", "ieo", "novelty", "coverage")


def evaluate(
    run: RecommendationRun,
    split: SplitDataset,
    stats: PopularityStats,
    cutoffs=(10,),
    balanced_draws: list | None = None,
) -> MetricReport:
    """Every metric at every cutoff, on the full and (when built) balanced test.

    ``run`` must hold at least ``max(cutoffs)`` items per user; shorter
    cutoffs use list prefixes. Test-independent metrics repeat under both
    variants. ``balanced_draws`` is an optional list of extra balanced test
    relations (see ``data.resample_balanced_tests``); the balanced-variant
    accuracy and IEO are then averaged over the split's own balanced test
    and every draw, which takes most of the sampling noise out of a test
    holding one interaction per item.
    """
    report = MetricReport()
    variants = [v for v in VARIANTS if v == "full" or split.balanced_test is not None]
    _, eligible = exposure_probability(run, split)
    report.flags["never_recommendable_items"] = np.flatnonzero(~eligible).tolist()
    for k in sorted(cutoffs):
        if k > run.k:
            raise ValueError(f"cutoff {k} exceeds run length {run.k}")
        sub = run.truncate(k)
        p, _ = exposure_probability(sub, split)
        report.vectors[f"exposure@{k}"] = p.tolist()
        shared = {
            "isp": isp(sub, split),
            "novelty": novelty(sub, stats),
            "coverage": coverage(sub, split.n_items),
        }
        for variant in variants:
            test = split.test_variant(variant)
            items, rates = true_positive_rate(sub, test)
            report.vectors[f"tpr@{k}/{variant}"] = {"items": items.tolist(), "rates": rates.tolist()}
            tests = [test]
            if variant == "balanced" and balanced_draws:
                tests += list(balanced_draws)
            per_test = []
            for t in tests:
                acc = ranking_accuracy(sub, t)
                acc["ieo"] = 1.0 - gini(true_positive_rate(sub, t)[1])
                per_test.append(acc)
            vals = {key: float(np.mean([d[key] for d in per_test])) for key in per_test[0]}
            vals.update(shared)
            for metric in METRICS:
                report.values[(metric, k, variant)] = float(vals[metric])
    return report


def write_report_csv(report: MetricReport, path: str | Path, treatment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        head = ["metric", "cutoff", "variant", "value"]
        writer.writerow(head if treatment is None else ["treatment", *head])
        for m, c, v, x in report.rows():
            row = [m, c, v, repr(x)]
            writer.writerow(row if treatment is None else [treatment, *row])


def write_report_json(report: MetricReport, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "metrics": [{"metric": m, "cutoff": c, "variant": v, "value": x} for m, c, v, x in report.rows()],
        "vectors": report.vectors,
        "flags": report.flags,
        **(extra or {}),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
