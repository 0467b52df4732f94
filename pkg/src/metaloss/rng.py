"""Named random streams derived from one run seed.

Each purpose (initialization, task sampling, validation, evaluation) owns
an independent stream, so changing how one purpose consumes randomness
never perturbs the others.
"""
from __future__ import annotations

import numpy as np

__all__ = ["rng_stream", "STREAMS"]

STREAMS = {"init": 0, "tasks": 1, "validation": 2, "evaluation": 3}


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """A generator for the named stream; ``extra`` integers create
    sub-streams (one per worker or task index)."""
    if name not in STREAMS:
        raise ValueError(f"unknown stream {name!r}, expected one of {list(STREAMS)}")
    key = (STREAMS[name], *(int(e) for e in extra))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
