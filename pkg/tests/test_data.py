import math
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popdebias.data import (
    Bucket,
    Interaction,
    InteractionDataset,
    SplitDataset,
    build_balanced_test,
    compute_popularity,
    generate_synthetic,
    load_interactions,
    temporal_split,
    write_interactions,
)
from popdebias.errors import DataError

from .conftest import ml1m_path


def _ds(records):
    return InteractionDataset.from_records(Interaction(*r) for r in records)


# --- ingestion ------------------------------------------------------------------


def test_single_movielens_line(tmp_path):
    p = tmp_path / "ratings.dat"
    p.write_text("1::10::5::964982703\n")
    ds = load_interactions(p, "movielens-dat")
    assert (ds.n_users, ds.n_items, len(ds)) == (1, 1, 1)
    assert ds.interactions == [Interaction("1", "10", 5.0, 964982703)]


def test_duplicate_pair_keeps_latest(tmp_path):
    p = tmp_path / "ratings.dat"
    p.write_text("1::10::3::200\n1::10::5::100\n")
    ds = load_interactions(p)
    assert len(ds) == 1
    assert ds.interactions[0].timestamp == 200
    assert ds.interactions[0].value == 3.0


def test_duplicate_pair_in_order(tmp_path):
    p = tmp_path / "ratings.dat"
    p.write_text("1::10::3::100\n1::10::5::200\n")
    assert load_interactions(p).interactions == [Interaction("1", "10", 5.0, 200)]


def test_index_maps_follow_first_appearance():
    ds = _ds([("b", "y", 1, 1), ("a", "x", 1, 2), ("b", "x", 1, 3)])
    assert ds.user_ids == ("b", "a")
    assert ds.item_ids == ("y", "x")
    assert ds.user_index == {"b": 0, "a": 1}
    assert sorted(ds.item_index.values()) == list(range(ds.n_items))


@pytest.mark.parametrize(
    "content, lineno",
    [
        ("1::10::5::1\n1::11::5\n", 2),
        ("1::10::5::1\n\n1::11::x::3\n", 3),
        ("1::10::-1::1\n", 1),
    ],
)
def test_malformed_line_reports_line_number(tmp_path, content, lineno):
    p = tmp_path / "ratings.dat"
    p.write_text(content)
    with pytest.raises(DataError, match=f"line {lineno}"):
        load_interactions(p)


def test_empty_file(tmp_path):
    p = tmp_path / "ratings.dat"
    p.write_text("")
    with pytest.raises(DataError, match="empty"):
        load_interactions(p)


@pytest.mark.parametrize("fmt, sep", [("csv", ","), ("tsv", "\t")])
def test_delimited_formats(tmp_path, fmt, sep):
    p = tmp_path / f"log.{fmt}"
    p.write_text(sep.join(["user", "item", "value", "timestamp"]) + "\n" + sep.join(["u1", "i1", "4", "10"]) + "\n")
    ds = load_interactions(p, fmt)
    assert ds.interactions == [Interaction("u1", "i1", 4.0, 10)]


def test_csv_requires_header(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("u1,i1,4,10\n")
    with pytest.raises(DataError, match="line 1"):
        load_interactions(p, "csv")


def test_write_then_load_round_trip(tmp_path):
    ds = generate_synthetic(20, 30, 5, 1.0, seed=1)
    for fmt in ("csv", "tsv", "movielens-dat"):
        p = tmp_path / f"out.{fmt}"
        write_interactions(ds, p, fmt)
        back = load_interactions(p, fmt)
        assert back.interactions == ds.interactions


# --- temporal split -----------------------------------------------------------


def test_split_ten_interactions():
    ts = [5, 1, 9, 3, 7, 2, 8, 4, 6, 10]
    ds = _ds([("u", f"i{k}", 1, t) for k, t in enumerate(ts)])
    split = temporal_split(ds, 0.2)
    assert split.train.nnz == 8 and split.test.nnz == 2
    test_ts = sorted(ds.timestamps[split.test_rows])
    assert test_ts == [9, 10]


def test_split_tie_goes_to_last_in_input():
    ds = _ds([("u", f"i{k}", 1, 7) for k in range(5)])
    split = temporal_split(ds, 0.2)
    assert split.test_rows.tolist() == [4]


def test_single_interaction_user_stays_in_train():
    ds = _ds([("a", "x", 1, 1), ("b", "x", 1, 1), ("b", "y", 1, 2), ("b", "z", 1, 3)])
    split = temporal_split(ds, 0.2)
    assert split.report.single_interaction_users == (0,)
    assert split.report.test_counts.tolist() == [0, 1]
    assert "single interaction" in split.report.to_text()


def _oracle_test_rows(ds, ratio):
    """Re-sort each user's records and take the ceil(ratio * n) newest."""
    per_user = defaultdict(list)
    for pos, (u, t) in enumerate(zip(ds.users.tolist(), ds.timestamps.tolist())):
        per_user[u].append((t, pos))
    rows = []
    for recs in per_user.values():
        recs.sort()
        n = len(recs)
        k = 0 if n == 1 else min(math.ceil(round(ratio * n, 9)), n - 1)
        rows.extend(pos for _, pos in recs[n - k :])
    return sorted(rows)


def test_split_matches_per_user_sort_oracle():
    rng = np.random.default_rng(0)
    recs = [(f"u{rng.integers(50)}", f"i{rng.integers(80)}", 1.0, int(rng.integers(0, 30))) for _ in range(2000)]
    ds = _ds(recs)
    split = temporal_split(ds, 0.2)
    assert split.test_rows.tolist() == _oracle_test_rows(ds, 0.2)


@pytest.mark.ml1m
@pytest.mark.skipif(ml1m_path() is None, reason="POPDEBIAS_ML1M not set")
def test_ml1m_counts_and_split():
    ds = load_interactions(ml1m_path(), "movielens-dat")
    assert (ds.n_users, ds.n_items, len(ds)) == (6040, 3706, 1000209) or (
        ds.n_users,
        ds.n_items,
        len(ds),
    ) == (6040, 3705, 998131)
    split = temporal_split(ds, 0.2)
    n_u = np.bincount(ds.users)
    assert split.test.nnz == int(np.ceil(np.round(0.2 * n_u, 9)).sum())
    assert split.test_rows.tolist() == _oracle_test_rows(ds, 0.2)
    bal = build_balanced_test(split, 1, seed=0)
    assert set(np.bincount(bal.balanced_test.indices)) <= {0, 1}


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 6), st.integers(0, 9), st.integers(0, 5)),
        min_size=1,
        max_size=60,
    ),
    st.sampled_from([0.1, 0.2, 0.5]),
)
def test_split_invariants(records, ratio):
    ds = _ds([(f"u{u}", f"i{i}", 1.0, t) for u, i, t in records])
    split = temporal_split(ds, ratio)
    tr = split.train.toarray().astype(bool)
    te = split.test.toarray().astype(bool)
    assert not (tr & te).any()
    assert split.train.nnz + split.test.nnz == len(ds)
    for u in range(ds.n_users):
        tr_ts = ds.timestamps[split.train_rows][ds.users[split.train_rows] == u]
        te_ts = ds.timestamps[split.test_rows][ds.users[split.test_rows] == u]
        if len(tr_ts) and len(te_ts):
            assert tr_ts.max() <= te_ts.min()


# --- popularity -----------------------------------------------------------------


def test_popularity_half():
    split = SplitDataset.from_pairs(4, 2, [(0, 0), (1, 0), (2, 1)])
    stats = compute_popularity(split)
    assert stats.pop[0] == 0.5
    assert stats.count.tolist() == [2, 1]


def test_dominant_item_alone_is_head():
    # item 0 holds 6 of 10 interactions
    pairs = [(u, 0) for u in range(6)] + [(0, 1), (1, 2), (2, 3), (3, 4)]
    stats = compute_popularity(SplitDataset.from_pairs(6, 5, pairs))
    assert stats.items_in(Bucket.HEAD).tolist() == [0]


def test_unseen_item_is_tail():
    stats = compute_popularity(SplitDataset.from_pairs(2, 3, [(0, 0), (1, 1)], [(0, 2)]))
    assert stats.pop[2] == 0 and stats.bucket[2] == Bucket.TAIL


def _oracle_buckets(counts):
    """Sort by count desc / index asc, then a running prefix sum."""
    order = sorted(range(len(counts)), key=lambda i: (-counts[i], i))
    total = sum(counts)
    out = [None] * len(counts)
    running = 0
    for i in order:
        share = running / total
        out[i] = Bucket.HEAD if share < 0.5 else Bucket.MID if share < 0.75 else Bucket.TAIL
        running += counts[i]
    return out


def test_zipf_buckets_match_prefix_scan():
    ds = generate_synthetic(400, 100, 10, 1.2, seed=5)
    split = temporal_split(ds, 0.2)
    stats = compute_popularity(split)
    assert stats.bucket.tolist() == [int(b) for b in _oracle_buckets(stats.count.tolist())]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=40).filter(lambda c: sum(c) > 0))
def test_bucket_partition_invariants(counts):
    n_users = max(counts)
    pairs = [(u, i) for i, c in enumerate(counts) for u in range(c)]
    stats = compute_popularity(SplitDataset.from_pairs(n_users, len(counts), pairs))
    assert stats.count.sum() == len(pairs)
    assert ((stats.pop >= 0) & (stats.pop <= 1)).all()
    np.testing.assert_array_equal(stats.pop, stats.count / n_users)
    total = sum(counts)
    head = stats.items_in(Bucket.HEAD)
    head_share = stats.count[head].sum() / total
    # the share before the last Head item is below one half, Head reaches it
    last = min(head, key=lambda i: (stats.count[i], -i))
    assert (stats.count[head].sum() - stats.count[last]) / total < 0.5 <= head_share
    assert len(head) + len(stats.items_in(Bucket.MID)) + len(stats.items_in(Bucket.TAIL)) == len(counts)


# --- balanced test ----------------------------------------------------------------


def test_balanced_m1(small_synth):
    _, split, _ = small_synth
    bal = build_balanced_test(split, 1, seed=0).balanced_test
    per_item = np.bincount(bal.indices, minlength=split.n_items)
    test_items = np.bincount(split.test.indices, minlength=split.n_items) > 0
    assert (per_item[test_items] == 1).all() and (per_item[~test_items] == 0).all()
    assert not (bal.multiply(split.test) != bal).nnz


def test_balanced_item_with_seven():
    test = [(u, 0) for u in range(7)] + [(0, 1), (1, 1)]
    split = SplitDataset.from_pairs(8, 2, [(7, 0), (7, 1)], test)
    a = build_balanced_test(split, 3, seed=11).balanced_test
    b = build_balanced_test(split, 3, seed=11).balanced_test
    assert a.nnz == 3 and set(a.indices) == {0}
    assert (a != b).nnz == 0


def test_balanced_seed_changes_choice():
    test = [(u, 0) for u in range(40)]
    split = SplitDataset.from_pairs(41, 1, [(40, 0)], test)
    picks = {tuple(build_balanced_test(split, 5, seed=s).balanced_test.tocoo().row) for s in range(5)}
    assert len(picks) > 1


def test_balanced_no_item_reaches_m():
    split = SplitDataset.from_pairs(3, 2, [(0, 0)], [(1, 0), (1, 1)])
    with pytest.raises(DataError, match="smaller m"):
        build_balanced_test(split, 2)


# --- synthetic generator -------------------------------------------------------------


def test_synthetic_uniform_when_skew_zero():
    ds = generate_synthetic(2000, 50, 5, 0.0, seed=2)
    counts = np.bincount(ds.items, minlength=50)
    expected = len(ds) / 50
    chi2 = ((counts - expected) ** 2 / expected).sum()
    # 49 dof: the 0.999 quantile is about 85.4
    assert chi2 < 85.4


def test_synthetic_skew_concentrates_mass():
    ds = generate_synthetic(1000, 1000, 20, 1.2, seed=3)
    counts = np.sort(np.bincount(ds.items, minlength=1000))[::-1]
    assert counts[:100].sum() / counts.sum() > 0.5


def test_synthetic_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_interactions(generate_synthetic(50, 40, 6, 1.1, seed=9, n_tastes=3, taste_boost=2), a)
    write_interactions(generate_synthetic(50, 40, 6, 1.1, seed=9, n_tastes=3, taste_boost=2), b)
    assert a.read_bytes() == b.read_bytes()


def test_synthetic_structure():
    ds = generate_synthetic(30, 40, 8, 1.0, seed=4)
    for u in range(30):
        mine = ds.users == u
        assert len(set(ds.items[mine])) == 8
        assert (np.diff(ds.timestamps[mine]) > 0).all()


def test_synthetic_errors():
    with pytest.raises(DataError):
        generate_synthetic(5, 4, 5, 1.0)
    with pytest.raises(DataError):
        generate_synthetic(5, 4, 2, -1.0)
