"""Named, independent random streams derived from one integer seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("dataset", "init", "training", "eval")


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Generator for sub-stream ``name`` (optionally further split by ``index``).

    Streams with different names or indices never share state, so e.g. the
    initialisation of a model does not shift when the training sampler changes.
    """
    key = (zlib.crc32(name.encode()),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
