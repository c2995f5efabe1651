import os
from pathlib import Path

import numpy as np
import pytest

from popdebias.data import (
    SplitDataset,
    build_balanced_test,
    compute_popularity,
    generate_synthetic,
    temporal_split,
)


def ml1m_path() -> Path | None:
    p = os.environ.get("POPDEBIAS_ML1M")
    return Path(p) if p and Path(p).is_file() else None


@pytest.fixture(scope="session")
def small_synth():
    """300 users x 120 items, skewed, with taste structure."""
    ds = generate_synthetic(300, 120, 15, 1.2, seed=7, n_tastes=4, taste_boost=5.0)
    split = build_balanced_test(temporal_split(ds, 0.2), 1, seed=3)
    return ds, split, compute_popularity(split)


def random_split(rng: np.random.Generator, n_users: int, n_items: int, density: float = 0.3) -> SplitDataset:
    """Random train/test relation over a tiny index space (disjoint)."""
    mask = rng.random((n_users, n_items))
    train = [(u, i) for u in range(n_users) for i in range(n_items) if mask[u, i] < density]
    test = [(u, i) for u in range(n_users) for i in range(n_items) if density <= mask[u, i] < density + 0.15]
    return SplitDataset.from_pairs(n_users, n_items, train, test)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
