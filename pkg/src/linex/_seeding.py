"""Counter-based seed derivation.

Every random stream is keyed by ``(root_seed, stream_id, *counters)`` and
expanded through :class:`numpy.random.SeedSequence`, so a sub-seed depends only
on its key and never on how many draws other streams made. Stream ids are
part of the file format of a run and must not be renumbered.
"""
from __future__ import annotations

import numpy as np

INIT = 0
PROMPTS = 1
ROLLOUT = 2
EVAL_PROMPTS = 3
EVAL_SAMPLING = 4
SAMPLING_PLAN = 5
PROBES = 6


def derive_seed(root: int, stream: int, *counters: int) -> int:
    key = [int(root), int(stream), *(int(c) for c in counters)]
    if any(k < 0 for k in key):
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


def rng_for(root: int, stream: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stream, *counters))
