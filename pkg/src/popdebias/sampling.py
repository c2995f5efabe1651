"""Per-epoch mining of training examples.

Two samplers share one output format: the uniform negative sampler and the
popularity-balanced sampler, which draws half of the negatives of each
observed pair among items less popular than the observed item and half
among items more popular than it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .data import PopularityStats, SplitDataset, compute_popularity

log = logging.getLogger(__name__)

MODES = ("pointwise", "pairwise")
MAX_REJECTIONS = 100


class PointwiseExample(NamedTuple):
    user: int
    item: int
    label: int
    item_pop: float


class PairwiseExample(NamedTuple):
    user: int
    pos_item: int
    neg_item: int
    pos_pop: float


@dataclass(frozen=True, eq=False)
class PointwiseExamples:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    item_pop: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, idx) -> "PointwiseExamples":
        return PointwiseExamples(self.users[idx], self.items[idx], self.labels[idx], self.item_pop[idx])

    def __iter__(self) -> Iterator[PointwiseExample]:
        for row in zip(self.users, self.items, self.labels, self.item_pop):
            yield PointwiseExample(int(row[0]), int(row[1]), int(row[2]), float(row[3]))

    @classmethod
    def from_list(cls, examples) -> "PointwiseExamples":
        ex = list(examples)
        return cls(
            np.array([e.user for e in ex], dtype=np.int64),
            np.array([e.item for e in ex], dtype=np.int64),
            np.array([e.label for e in ex], dtype=np.float64),
            np.array([e.item_pop for e in ex], dtype=np.float64),
        )


@dataclass(frozen=True, eq=False)
class PairwiseExamples:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray
    pos_pop: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, idx) -> "PairwiseExamples":
        return PairwiseExamples(self.users[idx], self.pos_items[idx], self.neg_items[idx], self.pos_pop[idx])

    def __iter__(self) -> Iterator[PairwiseExample]:
        for row in zip(self.users, self.pos_items, self.neg_items, self.pos_pop):
            yield PairwiseExample(int(row[0]), int(row[1]), int(row[2]), float(row[3]))

    @classmethod
    def from_list(cls, examples) -> "PairwiseExamples":
        ex = list(examples)
        return cls(
            np.array([e.user for e in ex], dtype=np.int64),
            np.array([e.pos_item for e in ex], dtype=np.int64),
            np.array([e.neg_item for e in ex], dtype=np.int64),
            np.array([e.pos_pop for e in ex], dtype=np.float64),
        )


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _observed_pairs(split: SplitDataset) -> tuple[np.ndarray, np.ndarray]:
    """Observed (user, item) pairs, dropping users without any unobserved item."""
    coo = split.train.tocoo()
    users = coo.row.astype(np.int64)
    items = coo.col.astype(np.int64)
    n_obs = np.diff(split.train.indptr)
    full = np.flatnonzero(n_obs >= split.n_items)
    if len(full):
        log.warning("skipping %d users who observed every item: %s", len(full), full.tolist()[:20])
        keep = ~np.isin(users, full)
        users, items = users[keep], items[keep]
    order = np.lexsort((items, users))
    return users[order], items[order]


def _draw_from_ranges(
    split: SplitDataset,
    users: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    order: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """For each slot draw ``order[k]`` with k uniform in ``[lo, hi)`` among
    items the user has not observed in train.

    Rejection sampling for up to `MAX_REJECTIONS` rounds, then enumeration of
    the remaining candidates. Every range must contain at least one valid item.
    """
    span = hi - lo
    out = order[lo + (rng.random(len(users)) * span).astype(np.int64)]
    pending = np.flatnonzero(split.is_train(users, out))
    rounds = 1
    while len(pending) and rounds < MAX_REJECTIONS:
        k = lo[pending] + (rng.random(len(pending)) * span[pending]).astype(np.int64)
        out[pending] = order[k]
        pending = pending[split.is_train(users[pending], out[pending])]
        rounds += 1
    for s in pending:
        cand = order[lo[s] : hi[s]]
        cand = cand[~np.isin(cand, split.train_items(users[s]))]
        out[s] = cand[rng.integers(len(cand))]
    return out


def sample_standard(
    split: SplitDataset,
    mode: str = "pairwise",
    t: int = 4,
    seed=0,
    stats: PopularityStats | None = None,
):
    """Uniform negative sampling.

    Pointwise: per observed pair one positive plus ``t`` negatives.
    Pairwise: per observed pair ``t`` triplets. The stream is shuffled.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if t < 1:
        raise ValueError("t must be >= 1")
    rng = _rng(seed)
    stats = stats if stats is not None else compute_popularity(split)
    users, items = _observed_pairs(split)
    rep_u = np.repeat(users, t)
    n = len(rep_u)
    neg = _draw_from_ranges(
        split, rep_u, np.zeros(n, dtype=np.int64), np.full(n, split.n_items), np.arange(split.n_items), rng
    )
    if mode == "pairwise":
        pos = np.repeat(items, t)
        perm = rng.permutation(n)
        return PairwiseExamples(rep_u[perm], pos[perm], neg[perm], stats.pop[pos][perm])
    all_u = np.concatenate([users, rep_u])
    all_i = np.concatenate([items, neg])
    labels = np.concatenate([np.ones(len(users)), np.zeros(n)])
    perm = rng.permutation(len(all_u))
    return PointwiseExamples(all_u[perm], all_i[perm], labels[perm], stats.pop[all_i][perm])


def _side_sizes(split: SplitDataset, count: np.ndarray, users: np.ndarray, items: np.ndarray):
    """Per observed pair: unobserved items strictly less / strictly more
    popular than the observed item, as index ranges into the ascending-count
    item order plus the number of valid candidates on each side."""
    n_items = split.n_items
    asc = np.argsort(count, kind="stable")
    sorted_counts = count[asc]
    c = count[items]
    lo_end = np.searchsorted(sorted_counts, c, side="left")
    hi_start = np.searchsorted(sorted_counts, c, side="right")

    coo = split.train.tocoo()
    width = int(count.max()) + 2
    keys = np.sort(coo.row.astype(np.int64) * width + count[coo.col])
    base = users * width
    user_start = np.searchsorted(keys, base, side="left")
    user_end = np.searchsorted(keys, base + width, side="left")
    obs_less = np.searchsorted(keys, base + c, side="left") - user_start
    obs_more = user_end - np.searchsorted(keys, base + c, side="right")
    n_less = lo_end - obs_less
    n_more = (n_items - hi_start) - obs_more
    return asc, lo_end, hi_start, n_less, n_more


def sample_balanced_popularity(
    split: SplitDataset,
    stats: PopularityStats,
    mode: str = "pairwise",
    t: int = 4,
    seed=0,
):
    """Popularity-balanced negative sampling.

    For every observed pair (u, i), ``t/2`` negatives come uniformly from
    u's unobserved items with a train count strictly below ``count[i]`` and
    ``t/2`` from those strictly above. When one side has no candidate the
    other side supplies all ``t``; when both are empty the draw is uniform.
    Pointwise mode replicates the positive ``t`` times next to the ``t``
    negatives.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if t < 2 or t % 2:
        raise ValueError("balanced sampling needs an even t >= 2")
    rng = _rng(seed)
    users, items = _observed_pairs(split)
    asc, lo_end, hi_start, n_less, n_more = _side_sizes(split, stats.count, users, items)
    half = t // 2
    both = (n_less > 0) & (n_more > 0)
    n_from_less = np.where(both, half, np.where(n_less > 0, t, 0))
    n_from_more = np.where(both, half, np.where(n_more > 0, t, 0))
    neither = (n_less == 0) & (n_more == 0)

    # slots laid out per pair as [less..., more..., uniform...], t in total
    slot_pair = np.repeat(np.arange(len(users)), t)
    slot_k = np.tile(np.arange(t), len(users))
    nl = n_from_less[slot_pair]
    nm = n_from_more[slot_pair]
    is_less = slot_k < nl
    is_more = (slot_k >= nl) & (slot_k < nl + nm)
    # slots on neither side draw uniformly over the whole catalog
    lo = np.where(is_more, hi_start[slot_pair], 0)
    hi = np.where(is_less, lo_end[slot_pair], split.n_items)
    rep_u = users[slot_pair]
    neg = _draw_from_ranges(split, rep_u, lo, hi, asc, rng)
    if neither.any():
        log.debug("%d observed pairs fell back to uniform negatives", int(neither.sum()))

    pos = items[slot_pair]
    if mode == "pairwise":
        perm = rng.permutation(len(rep_u))
        return PairwiseExamples(rep_u[perm], pos[perm], neg[perm], stats.pop[pos][perm])
    all_u = np.concatenate([rep_u, rep_u])
    all_i = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(rep_u)), np.zeros(len(rep_u))])
    perm = rng.permutation(len(all_u))
    return PointwiseExamples(all_u[perm], all_i[perm], labels[perm], stats.pop[all_i][perm])


def dump_examples(examples, stats: PopularityStats, path: str | Path) -> None:
    """Write an epoch's examples as TSV for auditing."""
    with open(path, "w", encoding="utf-8") as fh:
        if isinstance(examples, PairwiseExamples):
            fh.write("user\tpos\tneg\tpos_count\tneg_count\n")
            for u, i, j in zip(examples.users, examples.pos_items, examples.neg_items):
                fh.write(f"{u}\t{i}\t{j}\t{stats.count[i]}\t{stats.count[j]}\n")
        else:
            fh.write("user\titem\tlabel\titem_count\n")
            for u, i, y in zip(examples.users, examples.items, examples.labels):
                fh.write(f"{u}\t{i}\t{int(y)}\t{stats.count[i]}\n")
