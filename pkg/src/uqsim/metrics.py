"""Coverage metrics for prediction and confidence intervals.

Two views are provided.  Per test set: the fraction of points whose
observation (PICP) or true function value (CICP) lies inside its interval.
Per covariate point, across repeated simulations: the coverage fraction
(PICF / CICF), summarised by a Brier score that splits into bias and variance.
All intervals are closed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mathstat import standard_normal_cdf


@dataclass
class IntervalBatch:
    """PI and CI bounds for ``n`` points at each confidence level.

    Bound arrays have shape ``(len(levels), n)``.
    """

    levels: tuple
    pi_lower: np.ndarray
    pi_upper: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray

    def __post_init__(self):
        self.levels = tuple(float(a) for a in self.levels)
        shape = (len(self.levels), np.shape(self.pi_lower)[-1])
        for name in ("pi_lower", "pi_upper", "ci_lower", "ci_upper"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(shape)
            setattr(self, name, arr)
        if np.any(self.pi_lower > self.pi_upper) or np.any(self.ci_lower > self.ci_upper):
            raise ValueError("interval lower bound exceeds upper bound")

    @property
    def n_points(self) -> int:
        return self.pi_lower.shape[1]

    def level_index(self, level: float) -> int:
        for k, a in enumerate(self.levels):
            if math.isclose(a, level, rel_tol=0, abs_tol=1e-12):
                return k
        raise KeyError(f"level {level} not in {self.levels}")

    def pi(self, level: float):
        k = self.level_index(level)
        return self.pi_lower[k], self.pi_upper[k]

    def ci(self, level: float):
        k = self.level_index(level)
        return self.ci_lower[k], self.ci_upper[k]

    def transform(self, shift, scale) -> "IntervalBatch":
        """Map bounds through ``v -> shift + scale * v`` (``scale > 0``)."""
        return IntervalBatch(self.levels, shift + scale * self.pi_lower, shift + scale * self.pi_upper,
                             shift + scale * self.ci_lower, shift + scale * self.ci_upper)


def _covered(lower, upper, values) -> np.ndarray:
    lower, upper, values = (np.asarray(a, dtype=float) for a in (lower, upper, values))
    if not (lower.shape == upper.shape == values.shape):
        raise ValueError(f"length mismatch: bounds {lower.shape}/{upper.shape}, values {values.shape}")
    return (lower <= values) & (values <= upper)


def coverage_indicators(lower, upper, values) -> np.ndarray:
    return _covered(lower, upper, values).astype(float)


def picp(lower, upper, observations) -> float:
    """Fraction of observations inside their prediction intervals."""
    hits = _covered(lower, upper, observations)
    if hits.size == 0:
        raise ValueError("no test points")
    return float(np.mean(hits))


def cicp(lower, upper, true_values) -> float:
    """Fraction of true function values inside their confidence intervals."""
    hits = _covered(lower, upper, true_values)
    if hits.size == 0:
        raise ValueError("no test points")
    return float(np.mean(hits))


def picf_analytic_term(lower, upper, f_x, sigma_x):
    """P(Y in [lower, upper] | x) for Y ~ N(f_x, sigma_x**2)."""
    sigma_x = np.asarray(sigma_x, dtype=float)
    if np.any(~(sigma_x > 0)):
        raise ValueError("sigma_x must be positive")
    hi = standard_normal_cdf((np.asarray(upper, dtype=float) - f_x) / sigma_x)
    lo = standard_normal_cdf((np.asarray(lower, dtype=float) - f_x) / sigma_x)
    out = np.clip(hi - lo, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


class CoverageAccumulator:
    """Running per-point sums of coverage terms across simulations.

    Accumulators for disjoint sets of simulations merge by addition, so the
    order in which contributions arrive does not matter as long as the final
    sum is taken in a fixed order (see ``harness``).
    """

    def __init__(self, n_points: int):
        self.sums = np.zeros(n_points)
        self.n_simulations = 0

    def add(self, terms) -> None:
        terms = np.asarray(terms, dtype=float)
        if terms.shape != self.sums.shape:
            raise ValueError(f"expected {self.sums.shape[0]} terms, got {terms.shape}")
        if np.any((terms < 0) | (terms > 1)):
            raise ValueError("coverage terms must lie in [0, 1]")
        self.sums += terms
        self.n_simulations += 1

    def merge(self, other: "CoverageAccumulator") -> "CoverageAccumulator":
        out = CoverageAccumulator(len(self.sums))
        out.sums = self.sums + other.sums
        out.n_simulations = self.n_simulations + other.n_simulations
        return out

    def finalize(self) -> np.ndarray:
        if self.n_simulations < 1:
            raise ValueError("accumulator holds no simulations")
        return self.sums / self.n_simulations


def finalize_picf(acc: CoverageAccumulator) -> np.ndarray:
    return acc.finalize()


def finalize_cicf(acc: CoverageAccumulator) -> np.ndarray:
    return acc.finalize()


def brier(fractions, level: float) -> float:
    """Mean squared deviation of per-point coverage fractions from ``level``."""
    fractions = np.asarray(fractions, dtype=float)
    if fractions.size == 0:
        raise ValueError("no coverage fractions")
    return float(np.mean((fractions - level) ** 2))


def bias_variance(fractions, level: float):
    """(mean deviation from ``level``, population variance) of the fractions.

    ``bias**2 + variance`` equals :func:`brier` up to rounding.
    """
    fractions = np.asarray(fractions, dtype=float)
    if fractions.size == 0:
        raise ValueError("no coverage fractions")
    return float(np.mean(fractions) - level), float(np.var(fractions))


def avg_width(lower, upper) -> float:
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    if lower.size == 0:
        raise ValueError("no intervals")
    return float(np.mean(upper - lower))


def gaussian_loglik(observations, means, sds) -> float:
    """Mean Gaussian log-density of the observations."""
    sds = np.asarray(sds, dtype=float)
    if np.any(~(sds > 0)):
        raise ValueError("standard deviations must be positive")
    z = (np.asarray(observations, dtype=float) - np.asarray(means, dtype=float)) / sds
    return float(np.mean(-0.5 * np.log(2 * np.pi) - np.log(sds) - 0.5 * z ** 2))


def rmse(observations, predictions) -> float:
    return float(np.sqrt(np.mean((np.asarray(observations) - np.asarray(predictions)) ** 2)))
