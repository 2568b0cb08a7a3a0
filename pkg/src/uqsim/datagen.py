"""Known-truth data-generating processes and dataset I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .forest import fit_forest
from .mathstat import RngStream, make_stream

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class DataGeneratingProcess:
    """Gaussian observation law ``y = f(x) + sd(x) * z`` with a covariate sampler.

    ``true_mean`` and ``true_sd`` map an ``(n, d)`` matrix to length-``n``
    vectors; ``covariate_sampler(rng, n)`` returns an ``(n, d)`` matrix.
    """

    name: str
    true_mean: Callable[[np.ndarray], np.ndarray]
    true_sd: Callable[[np.ndarray], np.ndarray]
    covariate_sampler: Callable[[RngStream, int], np.ndarray]
    n_features: int = 1
    support: tuple | None = None
    info: dict = field(default_factory=dict)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError(f"y has length {len(self.y)} but X has {self.X.shape[0]} rows")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], list(self.feature_names))


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_test: int
    n_val: int = 0
    seed: int = 0

    @classmethod
    def from_fractions(cls, n: int, train: float, test: float, seed: int = 0) -> "SplitSpec":
        n_train = int(round(n * train))
        n_test = int(round(n * test))
        return cls(n_train, n_test, n - n_train - n_test, seed)


def cubic(X) -> np.ndarray:
    return (2.0 * np.asarray(X)[:, 0] - 1.0) ** 3


class ConstantSd:
    def __init__(self, sd: float):
        self.sd = float(sd)

    def __call__(self, X):
        return np.full(np.shape(X)[0], self.sd)


def quadratic_sd(X) -> np.ndarray:
    return 0.1 + np.asarray(X)[:, 0] ** 2


def uniform_sampler(rng, n):
    return rng.uniform(-0.5, 0.5, size=(n, 1))


class BimodalSampler:
    """Equal mixture of Gaussians truncated to ``bounds``."""

    def __init__(self, centers=(-0.35, 0.30), sd=0.08, bounds=(-0.5, 0.5)):
        self.centers = tuple(centers)
        self.sd = sd
        self.bounds = bounds
        lo, hi = bounds
        self._comps = [stats.truncnorm((lo - c) / sd, (hi - c) / sd, loc=c, scale=sd)
                       for c in self.centers]

    def __call__(self, rng, n):
        which = rng.integers(0, len(self._comps), size=n)
        u = rng.random(n)
        x = np.empty(n)
        for k, comp in enumerate(self._comps):
            sel = which == k
            x[sel] = comp.ppf(u[sel])
        return np.clip(x, *self.bounds)[:, None]

    def density(self, x):
        return np.mean([comp.pdf(x) for comp in self._comps], axis=0)


class ForestSd:
    def __init__(self, variance_forest, floor: float):
        self.variance_forest = variance_forest
        self.floor = floor

    def __call__(self, X):
        return np.sqrt(np.maximum(self.variance_forest.predict(X), self.floor))


class RowSampler:
    """Draws covariate rows from a fixed source matrix.

    Asking for exactly as many rows as the source holds returns the source
    itself; fewer rows are drawn without replacement, more with replacement.
    """

    def __init__(self, X):
        self.X = np.array(X, dtype=float)

    def __call__(self, rng, n):
        N = self.X.shape[0]
        if n == N:
            return self.X.copy()
        return self.X[rng.choice(N, size=n, replace=n > N)]


def toy_cubic(noise_sd: float = 0.2) -> DataGeneratingProcess:
    """Cubic mean, constant noise sd, x uniform on [-0.5, 0.5]."""
    return DataGeneratingProcess("toy-homo", cubic, ConstantSd(noise_sd), uniform_sampler,
                                 support=(-0.5, 0.5))


def toy_heteroscedastic() -> DataGeneratingProcess:
    """Cubic mean with noise sd ``0.1 + x**2``."""
    return DataGeneratingProcess("toy-hetero", cubic, quadratic_sd, uniform_sampler,
                                 support=(-0.5, 0.5))


def toy_bimodal(centers=(-0.35, 0.30), sd=0.08) -> DataGeneratingProcess:
    """Cubic mean and 0.2 noise, with covariates sparse between the two modes."""
    return DataGeneratingProcess("toy-bimodal", cubic, ConstantSd(0.2), BimodalSampler(centers, sd),
                                 support=(-0.5, 0.5),
                                 info={"centers": list(centers), "component_sd": sd})


def distill_dgp(data: Dataset, rng: RngStream, n_trees: int = 100, max_depth: int = 3,
                variance_floor: float = VARIANCE_FLOOR) -> DataGeneratingProcess:
    """Turn a real dataset into a known-truth process with two forests.

    The first forest is the true mean; the second, trained on the squared
    residuals of the first, is the true variance (floored).  Covariates are
    the dataset's own rows.
    """
    if len(data) == 0:
        raise ValueError("cannot distill a process from an empty dataset")
    mean_forest = fit_forest(data.X, data.y, n_trees, max_depth, rng)
    resid2 = (data.y - mean_forest.predict(data.X)) ** 2
    var_forest = fit_forest(data.X, resid2, n_trees, max_depth, rng)
    return DataGeneratingProcess(
        name="distilled",
        true_mean=mean_forest.predict,
        true_sd=ForestSd(var_forest, variance_floor),
        covariate_sampler=RowSampler(data.X),
        n_features=data.X.shape[1],
        info={"mean_forest": mean_forest, "variance_forest": var_forest,
              "variance_floor": variance_floor, "feature_names": list(data.feature_names)},
    )


def simulate_y(dgp: DataGeneratingProcess, X, rng: RngStream) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return dgp.true_mean(X) + dgp.true_sd(X) * rng.standard_normal(X.shape[0])


def generate(dgp: DataGeneratingProcess, n: int, rng: RngStream) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    X = dgp.covariate_sampler(rng, n)
    return Dataset(X, simulate_y(dgp, X, rng), dgp.info.get("feature_names", []))


class CsvFormatError(ValueError):
    pass


def load_csv(path) -> Dataset:
    """Read a numeric CSV with one header row; the last column is the target."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if len(header) < 2:
            raise CsvFormatError(f"{path}: need at least one feature column and a target column")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}")
            values = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: line {lineno}, column {col + 1} ({header[col]!r}): "
                        f"non-numeric value {cell!r}") from None
                if not np.isfinite(v):
                    raise CsvFormatError(
                        f"{path}: line {lineno}, column {col + 1} ({header[col]!r}): non-finite value")
                values.append(v)
            rows.append(values)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    arr = np.array(rows)
    return Dataset(arr[:, :-1], arr[:, -1], header[:-1])


def save_csv(data: Dataset, path, target_name: str = "y") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*data.feature_names, target_name])
        for xi, yi in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in (*xi, yi)])


def split_indices(n: int, spec: SplitSpec):
    """Seeded permutation partition of ``range(n)`` into (train, test, val) indices."""
    sizes = (spec.n_train, spec.n_test, spec.n_val)
    if min(sizes) < 0 or sum(sizes) != n:
        raise ValueError(f"split sizes {sizes} do not sum to the dataset size {n}")
    if spec.n_train == 0 or spec.n_test == 0:
        raise ValueError("train and test parts must be nonempty")
    perm = make_stream(spec.seed).permutation(n)
    a, b = spec.n_train, spec.n_train + spec.n_test
    return perm[:a], perm[a:b], perm[b:]


def split(data: Dataset, spec: SplitSpec):
    return tuple(data.subset(idx) for idx in split_indices(len(data), spec))
