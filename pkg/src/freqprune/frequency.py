"""Spatial-to-frequency transform of a single feature map.

A map is optionally low-pass filtered with a normalized Gaussian kernel,
tiled into non-overlapping blocks of at most ``block_size`` per side, and
each tile is transformed with the orthonormal 2D DCT-II.  Coefficients are
written back in place, so the frequency map keeps the dims of its source.

Orthonormal normalization is fixed: it makes the per-tile transform an
isometry (total squared coefficients == total squared pixels), which keeps
energies comparable across block sizes and makes the transform testable
against Parseval's identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidSigma, InvalidSize, InvariantViolation


@dataclass(frozen=True)
class GaussianKernel:
    """Normalized k x k Gaussian weights (sum exactly renormalized to 1)."""

    sigma: float
    size: int
    weights: np.ndarray


@dataclass(frozen=True)
class GaussianSmoothing:
    sigma: float = 1.0
    kernel_size: int = 3


@dataclass(frozen=True)
class FrequencyConfig:
    """Transform parameters. ``smoothing=None`` disables the prefilter."""

    block_size: int = 4
    smoothing: GaussianSmoothing | None = field(default_factory=GaussianSmoothing)

    def validate(self) -> None:
        if self.block_size < 1:
            raise InvariantViolation(f"block_size must be >= 1, got {self.block_size}")
        if self.smoothing is not None:
            # Raises InvalidSigma / InvalidSize on bad values.
            build_gaussian_kernel(self.smoothing.sigma, self.smoothing.kernel_size)


@dataclass(frozen=True)
class BlockPartition:
    """Row-major list of (origin_y, origin_x, height, width) tiles."""

    block_size: int
    blocks: tuple[tuple[int, int, int, int], ...]


def build_gaussian_kernel(sigma: float, size: int) -> GaussianKernel:
    """Sampled Gaussian on integer offsets, renormalized to sum to 1."""
    try:
        sigma = float(sigma)
    except (TypeError, ValueError) as exc:
        raise InvalidSigma(f"sigma must be a positive finite real, got {sigma!r}") from exc
    if not (math.isfinite(sigma) and sigma > 0):
        raise InvalidSigma(f"sigma must be a positive finite real, got {sigma!r}")
    if size < 1 or size % 2 == 0:
        raise InvalidSize(f"kernel size must be an odd integer >= 1, got {size}")
    half = size // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    # The 1/(2*pi*sigma^2) prefactor cancels in the normalization.
    gy = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    weights = np.outer(gy, gy)
    weights /= weights.sum()
    return GaussianKernel(sigma=sigma, size=int(size), weights=weights)


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Reflect-101 index map for range [-pad, n + pad); n == 1 degenerates to 0."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def smooth(map_: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Correlate ``map_`` with the kernel under reflect-101 borders."""
    m = np.asarray(map_, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise InvariantViolation(f"expected a non-empty 2D map, got shape {m.shape}")
    k = kernel.size
    if k == 1:
        return m * kernel.weights[0, 0]
    pad = k // 2
    h, w = m.shape
    padded = m[np.ix_(_reflect_indices(h, pad), _reflect_indices(w, pad))]
    out = np.zeros_like(m)
    for dy in range(k):
        for dx in range(k):
            out += kernel.weights[dy, dx] * padded[dy : dy + h, dx : dx + w]
    return out


def partition(map_: np.ndarray, block_size: int) -> BlockPartition:
    """Row-major non-overlapping tiling; edge tiles shrink to the map border.

    A map smaller than ``block_size`` on both sides becomes a single tile.
    """
    m = np.asarray(map_)
    if m.ndim != 2 or m.size == 0:
        raise InvariantViolation(f"expected a non-empty 2D map, got shape {m.shape}")
    if block_size < 1:
        raise InvariantViolation(f"block_size must be >= 1, got {block_size}")
    h, w = m.shape
    blocks = []
    for oy in range(0, h, block_size):
        th = min(block_size, h - oy)
        for ox in range(0, w, block_size):
            tw = min(block_size, w - ox)
            blocks.append((oy, ox, th, tw))
    return BlockPartition(block_size=int(block_size), blocks=tuple(blocks))


@lru_cache(maxsize=None)
def _dct_basis(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis: C[k, x] = a(k) cos(pi k (2x + 1) / (2n))."""
    x = np.arange(n, dtype=np.float64)
    k = x[:, None]
    basis = np.cos(np.pi * k * (2.0 * x[None, :] + 1.0) / (2.0 * n))
    basis *= math.sqrt(2.0 / n)
    basis[0, :] = math.sqrt(1.0 / n)
    return basis


def dct2_block(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DCT-II of one block, rows then columns."""
    b = np.asarray(block, dtype=np.float64)
    if b.ndim != 2 or b.size == 0:
        raise InvariantViolation(f"expected a non-empty 2D block, got shape {b.shape}")
    h, w = b.shape
    return _dct_basis(h) @ b @ _dct_basis(w).T


def to_frequency(map_: np.ndarray, cfg: FrequencyConfig) -> np.ndarray:
    """Smooth (if enabled), tile, and DCT each tile in place.

    Deterministic: identical inputs produce bit-identical outputs.
    """
    cfg.validate()
    m = np.asarray(map_, dtype=np.float64)
    if cfg.smoothing is not None:
        kernel = build_gaussian_kernel(cfg.smoothing.sigma, cfg.smoothing.kernel_size)
        m = smooth(m, kernel)
    tiles = partition(m, cfg.block_size)
    out = np.empty_like(m)
    for oy, ox, th, tw in tiles.blocks:
        out[oy : oy + th, ox : ox + tw] = dct2_block(m[oy : oy + th, ox : ox + tw])
    return out
