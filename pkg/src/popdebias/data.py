"""Interaction ingestion, temporal splitting, popularity statistics and
synthetic skewed datasets."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import DataError

log = logging.getLogger(__name__)

FORMATS = ("movielens-dat", "csv", "tsv")
CSV_HEADER = ["user", "item", "value", "timestamp"]


class Interaction(NamedTuple):
    user: str
    item: str
    value: float
    timestamp: int


class Bucket(enum.IntEnum):
    HEAD = 0
    MID = 1
    TAIL = 2


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Deduplicated interactions with dense user/item indices.

    Interactions are stored column-wise: ``users[k]``, ``items[k]``,
    ``values[k]`` and ``timestamps[k]`` describe the k-th record. Dense
    indices follow first appearance in the raw input.
    """

    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    timestamps: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {uid: k for k, uid in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {iid: k for k, iid in enumerate(self.item_ids)}

    @property
    def interactions(self) -> list[Interaction]:
        return [
            Interaction(self.user_ids[u], self.item_ids[i], float(v), int(t))
            for u, i, v, t in zip(self.users, self.items, self.values, self.timestamps)
        ]

    @classmethod
    def from_records(cls, records: Iterable[Interaction]) -> "InteractionDataset":
        """Index raw records; for a repeated (user, item) pair the latest
        timestamp wins (the later record on equal timestamps)."""
        user_index: dict[str, int] = {}
        item_index: dict[str, int] = {}
        best: dict[tuple[int, int], tuple[int, int, float]] = {}
        for pos, rec in enumerate(records):
            u = user_index.setdefault(rec.user, len(user_index))
            i = item_index.setdefault(rec.item, len(item_index))
            prev = best.get((u, i))
            if prev is None or rec.timestamp >= prev[0]:
                best[(u, i)] = (rec.timestamp, pos, rec.value)
        if not best:
            raise DataError("empty dataset: no interactions")
        kept = sorted(best.items(), key=lambda kv: kv[1][1])
        users = np.fromiter((k[0] for k, _ in kept), dtype=np.int64, count=len(kept))
        items = np.fromiter((k[1] for k, _ in kept), dtype=np.int64, count=len(kept))
        ts = np.fromiter((v[0] for _, v in kept), dtype=np.int64, count=len(kept))
        vals = np.fromiter((v[2] for _, v in kept), dtype=np.float64, count=len(kept))
        return cls(
            users=users,
            items=items,
            values=vals,
            timestamps=ts,
            user_ids=tuple(user_index),
            item_ids=tuple(item_index),
        )


def _parse_line(parts: list[str], lineno: int) -> Interaction:
    if len(parts) != 4:
        raise DataError(f"line {lineno}: expected 4 fields, got {len(parts)}")
    user, item, value, ts = (p.strip() for p in parts)
    if not user or not item:
        raise DataError(f"line {lineno}: empty user or item id")
    try:
        v = float(value)
        t = int(ts)
    except ValueError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    if not v > 0:
        raise DataError(f"line {lineno}: feedback value must be positive, got {value}")
    return Interaction(user, item, v, t)


def _iter_records(path: Path, fmt: str) -> Iterable[Interaction]:
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "movielens-dat":
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line.strip():
                    continue
                yield _parse_line(line.split("::"), lineno)
            return
        delim = "," if fmt == "csv" else "\t"
        reader = csv.reader(fh, delimiter=delim)
        header = next(reader, None)
        if header is None:
            return
        if [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"line 1: expected header {delim.join(CSV_HEADER)!r}")
        for row in reader:
            if not row or not any(c.strip() for c in row):
                continue
            yield _parse_line(row, reader.line_num)


def load_interactions(path: str | Path, format: str = "movielens-dat") -> InteractionDataset:
    """Read an interaction log in one of `FORMATS`."""
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    ds = InteractionDataset.from_records(_iter_records(path, format))
    log.info("loaded %s: %d users, %d items, %d interactions", path, ds.n_users, ds.n_items, len(ds))
    return ds


def write_interactions(ds: InteractionDataset, path: str | Path, format: str = "csv") -> None:
    path = Path(path)
    rows = zip(ds.users, ds.items, ds.values, ds.timestamps)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if format == "movielens-dat":
            for u, i, v, t in rows:
                fh.write(f"{ds.user_ids[u]}::{ds.item_ids[i]}::{v:g}::{t}\n")
            return
        writer = csv.writer(fh, delimiter="," if format == "csv" else "\t", lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for u, i, v, t in rows:
            writer.writerow([ds.user_ids[u], ds.item_ids[i], f"{v:g}", t])


@dataclass(frozen=True)
class SplitReport:
    train_counts: np.ndarray
    test_counts: np.ndarray
    single_interaction_users: tuple[int, ...]

    def to_text(self) -> str:
        tr, te = self.train_counts, self.test_counts
        lines = [
            f"users: {len(tr)}",
            f"train interactions: {int(tr.sum())}",
            f"test interactions: {int(te.sum())}",
            f"train per user: min {int(tr.min())} / median {float(np.median(tr)):g} / max {int(tr.max())}",
            f"test per user: min {int(te.min())} / median {float(np.median(te)):g} / max {int(te.max())}",
            f"users kept train-only (single interaction): {len(self.single_interaction_users)}",
        ]
        if self.single_interaction_users:
            lines.append("  " + " ".join(str(u) for u in self.single_interaction_users))
        return "\n".join(lines) + "\n"


def _binary_csr(rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]) -> sp.csr_matrix:
    mat = sp.csr_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=shape, dtype=np.int8
    )
    mat.sum_duplicates()
    mat.data[:] = 1
    mat.sort_indices()
    return mat


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Binary train/test relations over a shared (users x items) index space.

    ``train_rows``/``test_rows`` index into the source dataset's records.
    """

    n_users: int
    n_items: int
    train: sp.csr_matrix
    test: sp.csr_matrix
    balanced_test: sp.csr_matrix | None = None
    train_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    test_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    report: SplitReport | None = None

    @classmethod
    def from_pairs(cls, n_users: int, n_items: int, train_pairs, test_pairs=()) -> "SplitDataset":
        """Build a split directly from (user, item) index pairs."""
        tr = np.asarray(list(train_pairs), dtype=np.int64).reshape(-1, 2)
        te = np.asarray(list(test_pairs), dtype=np.int64).reshape(-1, 2)
        shape = (n_users, n_items)
        return cls(n_users, n_items, _binary_csr(tr[:, 0], tr[:, 1], shape), _binary_csr(te[:, 0], te[:, 1], shape))

    def train_items(self, u: int) -> np.ndarray:
        return self.train.indices[self.train.indptr[u] : self.train.indptr[u + 1]]

    def test_variant(self, variant: str) -> sp.csr_matrix:
        if variant == "full":
            return self.test
        if variant == "balanced":
            if self.balanced_test is None:
                raise DataError("balanced test set not built")
            return self.balanced_test
        raise ValueError(f"unknown test variant {variant!r}")

    @cached_property
    def train_keys(self) -> np.ndarray:
        """Sorted ``user * n_items + item`` keys of the train relation."""
        coo = self.train.tocoo()
        return np.sort(coo.row.astype(np.int64) * self.n_items + coo.col)

    def is_train(self, users, items) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        tk = self.train_keys
        pos = np.searchsorted(tk, keys)
        pos = np.minimum(pos, len(tk) - 1)
        return tk[pos] == keys if len(tk) else np.zeros(keys.shape, dtype=bool)


def temporal_split(ds: InteractionDataset, test_ratio: float = 0.2) -> SplitDataset:
    """Move each user's ``ceil(test_ratio * n_u)`` most recent interactions to
    the test set. Timestamp ties resolve by input order; a user keeps at least
    one train interaction."""
    if not 0 < test_ratio < 1:
        raise DataError(f"test_ratio must be in (0, 1), got {test_ratio}")
    n = len(ds)
    order = np.lexsort((np.arange(n), ds.timestamps, ds.users))
    n_u = np.bincount(ds.users, minlength=ds.n_users)
    start = np.concatenate([[0], np.cumsum(n_u)[:-1]])
    # round before ceil so that e.g. 0.2 * 15 is 3, not 4
    n_test = np.ceil(np.round(test_ratio * n_u, 9)).astype(np.int64)
    n_test = np.minimum(n_test, np.maximum(n_u - 1, 0))
    sorted_users = ds.users[order]
    pos_in_user = np.arange(n) - start[sorted_users]
    is_test = pos_in_user >= (n_u - n_test)[sorted_users]
    test_rows = np.sort(order[is_test])
    train_rows = np.sort(order[~is_test])
    shape = (ds.n_users, ds.n_items)
    singles = tuple(int(u) for u in np.flatnonzero(n_u == 1))
    if singles:
        log.info("%d users with a single interaction kept train-only", len(singles))
    report = SplitReport(
        train_counts=np.bincount(ds.users[train_rows], minlength=ds.n_users),
        test_counts=np.bincount(ds.users[test_rows], minlength=ds.n_users),
        single_interaction_users=singles,
    )
    return SplitDataset(
        n_users=ds.n_users,
        n_items=ds.n_items,
        train=_binary_csr(ds.users[train_rows], ds.items[train_rows], shape),
        test=_binary_csr(ds.users[test_rows], ds.items[test_rows], shape),
        train_rows=train_rows,
        test_rows=test_rows,
        report=report,
    )


@dataclass(frozen=True, eq=False)
class PopularityStats:
    count: np.ndarray
    pop: np.ndarray
    bucket: np.ndarray

    @property
    def n_items(self) -> int:
        return len(self.count)

    def items_in(self, *buckets: Bucket) -> np.ndarray:
        return np.flatnonzero(np.isin(self.bucket, [int(b) for b in buckets]))


def compute_popularity(split: SplitDataset, n_users: int | None = None) -> PopularityStats:
    """Per-item train counts, popularity ``count / n_users`` and Head/Mid/Tail
    buckets.

    Items are scanned by descending count (ascending index on ties). An item
    is Head while the share of interactions strictly before it is below 0.5,
    Mid while below 0.75, Tail otherwise, so the item crossing a threshold
    stays in the upper bucket.
    """
    m = split.n_users if n_users is None else n_users
    count = np.bincount(split.train.indices, minlength=split.n_items).astype(np.int64)
    total = int(count.sum())
    if total == 0:
        raise DataError("train relation is empty")
    order = np.lexsort((np.arange(split.n_items), -count))
    before = np.cumsum(count[order]) - count[order]
    share = before / total
    bucket = np.empty(split.n_items, dtype=np.int8)
    bucket[order] = np.where(share < 0.5, Bucket.HEAD, np.where(share < 0.75, Bucket.MID, Bucket.TAIL))
    return PopularityStats(count=count, pop=count / m, bucket=bucket)


def build_balanced_test(split: SplitDataset, m: int = 1, seed: int = 0) -> SplitDataset:
    """Keep exactly ``m`` test interactions (sampled without replacement) for
    every item having at least ``m``; drop all other items from the test."""
    if m < 1:
        raise DataError(f"m must be >= 1, got {m}")
    coo = split.test.tocoo()
    rng = np.random.default_rng(seed)
    perm = rng.permutation(coo.nnz)
    perm = perm[np.argsort(coo.col[perm], kind="stable")]
    cols = coo.col[perm]
    per_item = np.bincount(cols, minlength=split.n_items)
    first = np.concatenate([[0], np.cumsum(per_item)[:-1]])
    rank = np.arange(len(cols)) - first[cols]
    keep = (rank < m) & (per_item[cols] >= m)
    if not keep.any():
        raise DataError(f"no item has {m} test interactions; use a smaller m")
    sel = perm[keep]
    balanced = _binary_csr(coo.row[sel], coo.col[sel], (split.n_users, split.n_items))
    return replace(split, balanced_test=balanced)


def resample_balanced_tests(split: SplitDataset, m: int = 1, draws: int = 1, seed: int = 0) -> list[sp.csr_matrix]:
    """Independent balanced test relations drawn from ``split.test``."""
    seeds = np.random.SeedSequence([seed, m]).generate_state(draws)
    return [build_balanced_test(split, m, int(s)).balanced_test for s in seeds]


def generate_synthetic(
    n_users: int,
    n_items: int,
    interactions_per_user: int,
    skew: float,
    seed: int = 0,
    *,
    n_tastes: int = 0,
    taste_boost: float = 0.0,
) -> InteractionDataset:
    """Sample a dataset whose item popularity follows a Zipf law over ranks.

    Item ``"i<r>"`` has rank ``r`` and base weight ``(r + 1) ** -skew``. Each
    user draws ``interactions_per_user`` distinct items. With ``n_tastes > 0``
    items and users are assigned to random taste groups and a user's weight
    on items of their own group is multiplied by ``1 + taste_boost``; this
    gives the data a personal signal without changing the popularity law in
    expectation. Draw order is shuffled before assigning per-user timestamps.
    """
    if min(n_users, n_items, interactions_per_user) <= 0:
        raise DataError("counts must be positive")
    if skew < 0:
        raise DataError("skew must be >= 0")
    if interactions_per_user > n_items:
        raise DataError("interactions_per_user exceeds the number of items")
    rng = np.random.default_rng(seed)
    base = (np.arange(n_items) + 1.0) ** -skew
    if n_tastes > 0:
        item_taste = rng.integers(n_tastes, size=n_items)
        user_taste = rng.integers(n_tastes, size=n_users)
    users, items = [], []
    for u in range(n_users):
        w = base
        if n_tastes > 0:
            w = base * np.where(item_taste == user_taste[u], 1.0 + taste_boost, 1.0)
        picked = rng.choice(n_items, size=interactions_per_user, replace=False, p=w / w.sum())
        rng.shuffle(picked)
        users.append(np.full(interactions_per_user, u, dtype=np.int64))
        items.append(picked)
    users = np.concatenate(users)
    items = np.concatenate(items)
    # strictly increasing within a user, interleaved across users
    step = np.tile(np.arange(interactions_per_user, dtype=np.int64), n_users)
    timestamps = 1_000_000_000 + step * 3600 + users
    # reindex items by first appearance, like any loaded log
    uniq, first = np.unique(items, return_index=True)
    appear = uniq[np.argsort(first)]
    remap = np.empty(n_items, dtype=np.int64)
    remap[appear] = np.arange(len(appear))
    return InteractionDataset(
        users=users,
        items=remap[items],
        values=np.ones(len(users)),
        timestamps=timestamps,
        user_ids=tuple(f"u{u}" for u in range(n_users)),
        item_ids=tuple(f"i{r}" for r in appear),
    )
