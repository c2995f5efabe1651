"""Named random streams derived from one root seed."""

import zlib

import numpy as np


def stream_seed(root: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root), zlib.crc32(name.encode("utf-8"))])


def rng_stream(root: int, name: str) -> np.random.Generator:
    """Independent generator for stage ``name`` (split, init, sampler, ...)."""
    return np.random.default_rng(stream_seed(root, name))
