"""Sinusoidal index encoding used for both token and instance positions."""

from __future__ import annotations

import numpy as np


def sinusoid_table(n_positions: int, dim: int) -> np.ndarray:
    """Standard transformer position encoding: sin on even, cos on odd channels."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * (idx // 2) / dim)
    table = np.empty((n_positions, dim))
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table
