"""Complementary occlusion masks for the local feature extractor.

A pair (p, q) always satisfies p + q == ones.  p carries 1 exactly on the
occluded region selected by the strategy; q is its complement.  Degenerate
requests (zero occluded rows/columns/pixels) fall back to the no-mask pair
(zeros, ones) so the local branch sees the unoccluded map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError

PART_H = "part_h"
PART_V = "part_v"
STRIP_H = "strip_h"
STRIP_V = "strip_v"
PIXEL = "pixel"
FIXED_PART = "fixed_part"
NO_MASK = "none"

RANDOM_KINDS = (PART_H, PART_V, STRIP_H, STRIP_V, PIXEL)
ALL_KINDS = RANDOM_KINDS + (FIXED_PART, NO_MASK)


@dataclass(frozen=True)
class MaskPair:
    p: np.ndarray  # occluded region = 1
    q: np.ndarray  # complement


@dataclass(frozen=True)
class MaskStrategy:
    """Occlusion strategy: kind, dropping ratio d, part count for fixed."""

    kind: str
    d: float = 0.0
    n: int = 2

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ConfigurationError(
                f"unknown mask kind {self.kind!r}, expected one of {ALL_KINDS}")
        if not (0.0 <= self.d < 1.0):
            raise ConfigurationError(f"dropping ratio must lie in [0, 1), got {self.d}")
        if self.kind == FIXED_PART and self.n < 2:
            raise ConfigurationError(f"fixed partition needs n >= 2, got {self.n}")


def no_mask_pair(h: int, w: int, dtype=np.float64) -> MaskPair:
    return MaskPair(np.zeros((h, w), dtype=dtype), np.ones((h, w), dtype=dtype))


def generate(strategy: MaskStrategy, h: int, w: int, rng: np.random.Generator,
             dtype=np.float64) -> MaskPair:
    """Draw one complementary mask pair of extents (h, w)."""
    if h < 1 or w < 1:
        raise DimensionError(f"mask extents must be positive, got ({h}, {w})")
    kind, d = strategy.kind, strategy.d

    if kind == NO_MASK:
        return no_mask_pair(h, w, dtype)

    if kind == FIXED_PART:
        if h % strategy.n != 0:
            raise DimensionError(
                f"fixed partition: {strategy.n} does not divide height {h}")
        band = h // strategy.n
        p = np.zeros((h, w), dtype=dtype)
        for i in range(0, strategy.n, 2):
            p[i * band:(i + 1) * band, :] = 1.0
        return MaskPair(p, 1.0 - p)

    p = np.zeros((h, w), dtype=dtype)
    if kind == PART_H:
        k = int(d * h)
        if k < 1:
            return no_mask_pair(h, w, dtype)
        r = int(rng.integers(0, h - k + 1))
        p[r:r + k, :] = 1.0
    elif kind == PART_V:
        k = int(d * w)
        if k < 1:
            return no_mask_pair(h, w, dtype)
        r = int(rng.integers(0, w - k + 1))
        p[:, r:r + k] = 1.0
    elif kind == STRIP_H:
        k = int(d * h)
        if k < 1:
            return no_mask_pair(h, w, dtype)
        rows = rng.choice(h, size=k, replace=False)
        p[rows, :] = 1.0
    elif kind == STRIP_V:
        k = int(d * w)
        if k < 1:
            return no_mask_pair(h, w, dtype)
        cols = rng.choice(w, size=k, replace=False)
        p[:, cols] = 1.0
    elif kind == PIXEL:
        k = int(d * h * w)
        if k < 1:
            return no_mask_pair(h, w, dtype)
        flat = rng.choice(h * w, size=k, replace=False)
        p.reshape(-1)[flat] = 1.0
    return MaskPair(p, 1.0 - p)


def apply(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply every (batch, channel, frame) slice of x by the mask plane."""
    return autodiff.mul_hw(x, mask)


def partition_fixed(x: Tensor, n: int) -> list[Tensor]:
    """Split x into n equal-height horizontal slices, top to bottom."""
    h = x.data.shape[3]
    if n < 1 or h % n != 0:
        raise DimensionError(f"partition: {n} does not divide height {h}")
    band = h // n
    return [autodiff.slice_axis(x, 3, i * band, (i + 1) * band) for i in range(n)]
