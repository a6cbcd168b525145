"""Named, reproducible RNG substreams derived from one top-level seed."""

from __future__ import annotations

import numpy as np

# Fixed name -> id map. Changing these renumbers every derived stream and
# silently changes all seeded outputs, so treat as append-only.
_STREAMS = {
    "data": 0,
    "queries": 1,
    "kmeans": 2,
    "split": 3,
    "init": 4,
    "shuffle": 5,
    "dropout": 6,
}


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for one named stream of `seed`."""
    if name not in _STREAMS:
        raise ValueError(f"unknown rng stream {name!r}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_STREAMS[name],))
    return np.random.default_rng(ss)
