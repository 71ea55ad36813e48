"""Deterministic derived seeds.

Every stochastic step derives its generator from an explicit base seed plus
structural keys (frame index, iteration, hypothesis). Nothing shares mutable
generator state, which is what keeps runs bit-identical regardless of thread
count or call interleaving.
"""

from __future__ import annotations

import numpy as np


def derive_seed(*keys: int) -> int:
    """Mix integer keys into a single 32-bit seed, deterministically."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    return int(ss.generate_state(1)[0])


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))
