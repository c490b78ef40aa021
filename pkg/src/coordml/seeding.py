"""Deterministic child seeds for replications, stages and grid points."""

from __future__ import annotations

import numpy as np


def derive_seed(base: int, *keys: int) -> int:
    """63-bit seed determined by ``base`` and the integer path ``keys``."""
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
