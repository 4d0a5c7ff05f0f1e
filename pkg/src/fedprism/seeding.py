"""Deterministic seed derivation for nested simulation components."""

from __future__ import annotations

import numpy as np


def derive_seed(*parts: int) -> int:
    """Mix integer components into a child seed.

    Built on numpy's SeedSequence so structurally close inputs (consecutive
    rounds, adjacent client ids) still produce statistically independent
    generator streams.
    """
    if any(int(p) < 0 for p in parts):
        raise ValueError(f"seed components must be non-negative, got {parts}")
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint32)[0])
