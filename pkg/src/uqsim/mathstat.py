"""Random streams and the handful of distribution functions used everywhere.

Matrices are plain ``numpy.ndarray`` objects of shape ``(rows, cols)``.
Random streams are ``numpy.random.Generator`` instances backed by the
counter-based Philox bit generator, keyed by ``(master_seed, *key)`` so any
stream can be rebuilt without replaying the ones before it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

RngStream = np.random.Generator


def make_stream(master_seed: int, *key: int) -> RngStream:
    """Return the stream identified by ``(master_seed, *key)``.

    Distinct keys give independent streams; the same key always gives the same
    sequence, regardless of which other streams were created first.
    """
    if master_seed < 0 or any(k < 0 for k in key):
        raise ValueError("seeds and stream keys must be non-negative")
    seq = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def draw_seed(rng: RngStream) -> int:
    """Draw a 63-bit seed from ``rng`` for keying a family of child streams."""
    return int(rng.integers(0, 2**63 - 1))


@dataclass(frozen=True)
class GaussianParams:
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if not self.sd >= 0:
            raise ValueError(f"sd must be >= 0, got {self.sd}")


def standard_normal_cdf(z):
    """Standard normal CDF, accurate to double precision in both tails."""
    out = special.ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def normal_quantile(p):
    """Inverse of :func:`standard_normal_cdf` on the open interval (0, 1)."""
    p_arr = np.asarray(p, dtype=float)
    if np.any(~((p_arr > 0) & (p_arr < 1))):
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    out = special.ndtri(p_arr)
    return float(out) if out.ndim == 0 else out


def student_t_quantile(df: float, p: float) -> float:
    """p-quantile of Student's t distribution with ``df`` degrees of freedom."""
    if not (df >= 1 and math.isfinite(df)):
        raise ValueError(f"degrees of freedom must be finite and >= 1, got {df}")
    if not 0 < p < 1:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    return float(special.stdtrit(df, p))


def sample_gaussian(rng: RngStream, params: GaussianParams, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. values from ``N(params.mean, params.sd**2)``."""
    return params.mean + params.sd * rng.standard_normal(n)
