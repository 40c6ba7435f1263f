"""Dense-matrix helpers, seeded outlier sampling and entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from bdq.errors import DomainError, ParameterError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (1-D input becomes one row)."""
    m = np.array(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ParameterError(f"{name} must be 1-D or 2-D, got ndim={m.ndim}")
    if m.size == 0:
        raise ParameterError(f"{name} is empty")
    if not np.all(np.isfinite(m)):
        raise ParameterError(f"{name} contains NaN or Inf")
    return m


def make_rng(seed) -> np.random.Generator:
    # PCG64 explicitly, so streams do not change if numpy's default ever does.
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class OutlierProfile:
    """Gaussian background with a fixed fraction of entries drawn at ``k * sigma``."""

    sigma: float = 1.0
    k: float = 1.0
    outlier_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if not (self.k >= 1 and math.isfinite(self.k)):
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if not (0 <= self.outlier_frac < 1):
            raise ParameterError(f"outlier_frac must be in [0, 1), got {self.outlier_frac}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ParameterError(f"seed must be a non-negative integer, got {self.seed}")

    def n_outliers(self, size: int) -> int:
        return int(math.floor(self.outlier_frac * size))


def sample_matrix(profile: OutlierProfile, rows: int, cols: int) -> np.ndarray:
    """Draw a ``rows x cols`` matrix from ``profile``.

    Every entry starts as N(0, sigma^2); then exactly ``floor(p * rows * cols)``
    positions, chosen by a seeded shuffle, are redrawn from N(0, (k sigma)^2).
    The draw order does not depend on ``k``, so ``p = 0`` gives the same matrix
    for every ``k``.
    """
    if rows < 1 or cols < 1:
        raise ParameterError(f"dims must be >= 1, got {rows}x{cols}")
    rng = make_rng(profile.seed)
    size = rows * cols
    data = rng.standard_normal(size) * profile.sigma
    n_out = profile.n_outliers(size)
    if n_out:
        idx = rng.permutation(size)[:n_out]
        data[idx] = rng.standard_normal(n_out) * (profile.k * profile.sigma)
    return data.reshape(rows, cols)


def outlier_mask(profile: OutlierProfile, rows: int, cols: int) -> np.ndarray:
    """Boolean mask of the positions ``sample_matrix`` redraws at outlier scale."""
    rng = make_rng(profile.seed)
    size = rows * cols
    rng.standard_normal(size)
    mask = np.zeros(size, dtype=bool)
    n_out = profile.n_outliers(size)
    if n_out:
        mask[rng.permutation(size)[:n_out]] = True
    return mask.reshape(rows, cols)


def xlogx(p: np.ndarray) -> np.ndarray:
    """Elementwise p * ln p with 0 * ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def shannon_entropy(weights) -> float:
    """Entropy in nats of the distribution obtained by normalizing ``weights``."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0 or not np.all(np.isfinite(w)):
        raise DomainError("weights must be a non-empty finite vector")
    if np.any(w < 0):
        raise DomainError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise DomainError("weights must have a positive sum")
    return float(-xlogx(w / total).sum())


def frobenius_normalize(W) -> tuple[np.ndarray, float]:
    W = as_matrix(W)
    scale = float(np.linalg.norm(W))
    if scale == 0:
        raise DomainError("cannot normalize an all-zero matrix")
    return W / scale, scale
