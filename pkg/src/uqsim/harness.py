"""End-to-end simulation experiments.

One experiment fixes the test covariates, then repeatedly simulates fresh
training, validation and test targets from a known process, fits both UQ
methods, and accumulates per-point coverage across repetitions.  Every
repetition draws from its own stream keyed by ``(master_seed, 1, j)`` and
results are combined in index order, so serial and parallel runs agree
bit for bit.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datagen, metrics, uqmethods
from .datagen import Dataset, SplitSpec
from .mathstat import make_stream, normal_quantile
from .metrics import CoverageAccumulator, IntervalBatch
from .neuralnet import MlpConfig, TrainingDivergedError

log = logging.getLogger(__name__)

METHODS = ("bootstrap", "dropout")
PROTOCOL_LEVELS = (0.95, 0.9, 0.8, 0.7)

# Wider than the uqmethods defaults: targets are standardized, so the noise
# precision of a well-fit toy sits near 130, and dropout rates of 0.05 and up
# already give an epistemic spread larger than the noise.
HARNESS_TAU_GRID = (1, 2, 5, 10, 15, 25, 35, 50, 75, 100, 150, 200, 300, 400, 600, 800, 1000)
HARNESS_P_GRID = (0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5)

# stream namespaces under the master seed
_SIM, _GRID, _SETUP = 1, 2, 3


class ExperimentFailed(RuntimeError):
    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)


# ---------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    constant_columns: list
    constant_target: bool = False

    @classmethod
    def fit(cls, data: Dataset) -> "Standardizer":
        if len(data) == 0:
            raise ValueError("cannot standardize an empty dataset")
        x_mean = data.X.mean(axis=0)
        x_sd = data.X.std(axis=0)
        const = x_sd == 0
        x_mean = np.where(const, 0.0, x_mean)
        x_sd = np.where(const, 1.0, x_sd)
        y_sd = float(data.y.std())
        if y_sd == 0:
            return cls(x_mean, x_sd, 0.0, 1.0, np.nonzero(const)[0].tolist(), True)
        return cls(x_mean, x_sd, float(data.y.mean()), y_sd, np.nonzero(const)[0].tolist())

    def transform_X(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale

    def transform_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_scale

    def inverse_X(self, X):
        return np.asarray(X, dtype=float) * self.x_scale + self.x_mean

    def inverse_y(self, y):
        return np.asarray(y, dtype=float) * self.y_scale + self.y_mean

    def transform(self, data: Dataset) -> Dataset:
        return Dataset(self.transform_X(data.X), self.transform_y(data.y), list(data.feature_names))

    def inverse(self, data: Dataset) -> Dataset:
        return Dataset(self.inverse_X(data.X), self.inverse_y(data.y), list(data.feature_names))


def standardize(data: Dataset):
    """Zero-mean, unit-sd features and target; constant columns pass through."""
    tf = Standardizer.fit(data)
    return tf.transform(data), tf


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    dgp: str = "toy-homo"
    data_path: str | None = None
    n_train: int = 1000
    n_test: int = 1000
    n_val: int = 150
    n_simulations: int = 100
    levels: tuple = PROTOCOL_LEVELS
    M: int = 50
    B: int = 100
    net: MlpConfig = field(default_factory=MlpConfig)
    tau_grid: tuple = HARNESS_TAU_GRID
    p_grid: tuple = HARNESS_P_GRID
    grid_level: float = 0.68
    grid_repeats: int = 5
    picf_mode: str = "analytic"
    forest_trees: int = 100
    forest_depth: int = 3
    split_seed: int = 0
    master_seed: int = 0
    workers: int = 1
    max_failure_fraction: float = 0.1

    def __post_init__(self):
        self.levels = tuple(float(a) for a in self.levels)
        self.tau_grid = tuple(float(t) for t in self.tau_grid)
        self.p_grid = tuple(float(p) for p in self.p_grid)
        if isinstance(self.net, dict):
            self.net = MlpConfig(**self.net)
        self.validate()

    def validate(self):
        if self.dgp not in DGP_NAMES:
            raise ValueError(f"unknown data-generating process {self.dgp!r}; choose from {', '.join(DGP_NAMES)}")
        if self.n_simulations < 1:
            raise ValueError("n_simulations must be >= 1")
        if not self.levels or any(not 0 < a < 1 for a in self.levels):
            raise ValueError(f"levels must lie in (0, 1), got {self.levels}")
        if min(self.n_train, self.n_test) < 1 or self.n_val < 1:
            raise ValueError("n_train, n_test and n_val must be positive")
        if self.M < 2 or self.B < 2:
            raise ValueError("need M >= 2 bootstrap members and B >= 2 dropout passes")
        if self.picf_mode not in ("analytic", "empirical"):
            raise ValueError("picf_mode must be 'analytic' or 'empirical'")
        if self.grid_repeats < 1:
            raise ValueError("grid_repeats must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"]["hidden_sizes"] = list(self.net.hidden_sizes)
        for k in ("levels", "tau_grid", "p_grid"):
            d[k] = list(d[k])
        return d


DGP_NAMES = ("toy-homo", "toy-hetero", "toy-bimodal", "boston")

PRESETS = {
    "toy-homo": dict(dgp="toy-homo"),
    "toy-hetero": dict(dgp="toy-hetero"),
    "toy-bimodal": dict(dgp="toy-bimodal", n_train=250),
    "boston": dict(dgp="boston", n_train=366, n_test=100, n_val=40),
}
PRESET_NOTES = {
    "toy-homo": "cubic mean, noise sd 0.2, x ~ U[-0.5, 0.5]; 1000/1000/150 points",
    "toy-hetero": "cubic mean, noise sd 0.1 + x^2; 1000/1000/150 points",
    "toy-bimodal": "cubic mean, noise sd 0.2, bimodal x sparse in [-0.2, 0.1]; 250/1000/150 points",
    "boston": "forest-distilled process from a user-supplied CSV; 366/100/40 split (needs --data)",
}
# Small enough for automated test runs.
CI_FAST = dict(n_simulations=20, M=10, B=25)


def preset(name: str, fast: bool = False, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    opts = dict(PRESETS[name])
    if fast:
        opts.update(CI_FAST)
    opts.update(overrides)
    return ExperimentConfig(**opts)


# ---------------------------------------------------------------------------
# experiment setup


@dataclass
class Setup:
    """Everything fixed across simulations: the process and the covariates."""

    config: ExperimentConfig
    dgp: datagen.DataGeneratingProcess
    X_test: np.ndarray
    X_train: np.ndarray | None = None
    X_val: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def f_test(self):
        return self.dgp.true_mean(self.X_test)

    @property
    def sd_test(self):
        return self.dgp.true_sd(self.X_test)

    def covariates(self, rng):
        """Training and validation covariates for one simulation."""
        if self.X_train is not None:
            return self.X_train, self.X_val
        cfg = self.config
        return self.dgp.covariate_sampler(rng, cfg.n_train), self.dgp.covariate_sampler(rng, cfg.n_val)


TOY_DGPS = {
    "toy-homo": datagen.toy_cubic,
    "toy-hetero": datagen.toy_heteroscedastic,
    "toy-bimodal": datagen.toy_bimodal,
}


def prepare(config: ExperimentConfig, data: Dataset | None = None) -> Setup:
    if config.dgp in TOY_DGPS:
        dgp = TOY_DGPS[config.dgp]()
        lo, hi = dgp.support
        # evenly spaced test grid over the support
        X_test = np.linspace(lo, hi, config.n_test)[:, None]
        return Setup(config, dgp, X_test)
    if data is None:
        if config.data_path is None:
            raise ValueError("the boston preset needs a data file (--data)")
        data = datagen.load_csv(config.data_path)
    spec = SplitSpec(config.n_train, config.n_test, config.n_val, config.split_seed)
    i_train, i_test, i_val = datagen.split_indices(len(data), spec)
    tf = Standardizer.fit(data.subset(i_train))
    std = tf.transform(data)
    dgp = datagen.distill_dgp(std, make_stream(config.master_seed, _SETUP),
                              config.forest_trees, config.forest_depth)
    info = {"source_rows": len(data), "source_y_mean": tf.y_mean, "source_y_sd": tf.y_scale,
            "constant_columns": tf.constant_columns}
    return Setup(config, dgp, std.X[i_test], std.X[i_train], std.X[i_val], info)


# ---------------------------------------------------------------------------
# one simulation


@dataclass
class SimulationResult:
    index: int
    ok: bool
    error: str = ""
    seconds: float = 0.0
    intervals: dict = field(default_factory=dict)   # method -> IntervalBatch, DGP units
    picp: dict = field(default_factory=dict)        # method -> array over levels
    cicp: dict = field(default_factory=dict)
    pi_width: dict = field(default_factory=dict)
    ci_width: dict = field(default_factory=dict)
    picf_terms: dict = field(default_factory=dict)  # method -> (n_levels, n_test)
    cicf_terms: dict = field(default_factory=dict)
    rmse: dict = field(default_factory=dict)
    loglik: dict = field(default_factory=dict)


def _fit_method(method, setup, tau_p, train_s, val_s, rng):
    cfg = setup.config
    if method == "bootstrap":
        return uqmethods.fit_bootstrap(train_s, val_s, cfg.M, cfg.net, rng)
    tau, p = tau_p
    return uqmethods.fit_dropout(train_s, p, tau, cfg.B, cfg.net, rng)


def run_simulation(setup: Setup, j: int, tau_p) -> SimulationResult:
    t0 = time.perf_counter()
    cfg = setup.config
    rng = make_stream(cfg.master_seed, _SIM, j)
    X_train, X_val = setup.covariates(rng)
    train = Dataset(X_train, datagen.simulate_y(setup.dgp, X_train, rng))
    val = Dataset(X_val, datagen.simulate_y(setup.dgp, X_val, rng))
    y_test = datagen.simulate_y(setup.dgp, setup.X_test, rng)
    f_test, sd_test = setup.f_test, setup.sd_test
    method_seed = [int(s) for s in rng.integers(0, 2**63 - 1, size=len(METHODS))]

    tf = Standardizer.fit(train)
    train_s, val_s = tf.transform(train), tf.transform(val)
    X_test_s = tf.transform_X(setup.X_test)
    res = SimulationResult(j, True)
    for k, method in enumerate(METHODS):
        model = None
        for attempt in range(2):
            try:
                model = _fit_method(method, setup, tau_p, train_s, val_s,
                                    make_stream(method_seed[k], attempt))
                break
            except (TrainingDivergedError, uqmethods.MemberTrainingError) as err:
                last = err
                if method == "bootstrap":
                    break  # members already retried individually
        if model is None:
            res.ok = False
            res.error = f"{method}: {last}"
            res.seconds = time.perf_counter() - t0
            return res
        batch = model.intervals(X_test_s, cfg.levels).transform(tf.y_mean, tf.y_scale)
        mean, _ = model.stats(X_test_s)
        mean = tf.inverse_y(mean)
        pred_sd = model.predictive_sd(X_test_s) * tf.y_scale
        res.intervals[method] = batch
        res.picp[method] = np.array([metrics.picp(*batch.pi(a), y_test) for a in cfg.levels])
        res.cicp[method] = np.array([metrics.cicp(*batch.ci(a), f_test) for a in cfg.levels])
        res.pi_width[method] = np.array([metrics.avg_width(*batch.pi(a)) for a in cfg.levels])
        res.ci_width[method] = np.array([metrics.avg_width(*batch.ci(a)) for a in cfg.levels])
        if cfg.picf_mode == "analytic":
            sd = np.maximum(sd_test, np.sqrt(datagen.VARIANCE_FLOOR))
            res.picf_terms[method] = np.stack(
                [metrics.picf_analytic_term(*batch.pi(a), f_test, sd) for a in cfg.levels])
        else:
            res.picf_terms[method] = np.stack(
                [metrics.coverage_indicators(*batch.pi(a), y_test) for a in cfg.levels])
        res.cicf_terms[method] = np.stack(
            [metrics.coverage_indicators(*batch.ci(a), f_test) for a in cfg.levels])
        res.rmse[method] = metrics.rmse(y_test, mean)
        res.loglik[method] = metrics.gaussian_loglik(y_test, mean, pred_sd)
    res.seconds = time.perf_counter() - t0
    return res


def _run_one(args):
    setup, j, tau_p = args
    return run_simulation(setup, j, tau_p)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MethodLevelReport:
    method: str
    level: float
    picp: np.ndarray        # per successful simulation
    cicp: np.ndarray
    pi_width: np.ndarray
    ci_width: np.ndarray
    picf: np.ndarray        # per test point
    cicf: np.ndarray

    @property
    def brier_pi(self):
        return metrics.brier(self.picf, self.level)

    @property
    def brier_ci(self):
        return metrics.brier(self.cicf, self.level)

    @property
    def pi_bias_variance(self):
        return metrics.bias_variance(self.picf, self.level)

    @property
    def ci_bias_variance(self):
        return metrics.bias_variance(self.cicf, self.level)

    @property
    def avg_pi_width(self):
        return float(np.mean(self.pi_width))

    @property
    def avg_ci_width(self):
        return float(np.mean(self.ci_width))


@dataclass
class MetricsReport:
    config: ExperimentConfig
    entries: dict                 # (method, level) -> MethodLevelReport
    simulations: list             # indices of successful simulations
    failures: list                # (index, message)
    dropout_choice: dict
    X_test: np.ndarray
    f_test: np.ndarray
    sd_test: np.ndarray
    sim_status: list = field(default_factory=list)
    setup_info: dict = field(default_factory=dict)
    intervals: dict = field(default_factory=dict)  # optional: j -> method -> IntervalBatch

    def entry(self, method, level) -> MethodLevelReport:
        for (m, a), e in self.entries.items():
            if m == method and abs(a - level) < 1e-12:
                return e
        raise KeyError((method, level))


def tune_dropout(setup: Setup):
    """Grid search for (tau, p) on one simulated training set."""
    cfg = setup.config
    rng = make_stream(cfg.master_seed, _GRID)
    X_train, _ = setup.covariates(rng)
    train = Dataset(X_train, datagen.simulate_y(setup.dgp, X_train, rng))
    train_s = Standardizer.fit(train).transform(train)
    cells = uqmethods.grid_scores(train_s, cfg.tau_grid, cfg.p_grid, cfg.net, rng, cfg.B, cfg.grid_level,
                                  repeats=cfg.grid_repeats)
    # held-out PICPs closer than their sampling noise are treated as tied
    tol = uqmethods.holdout_se(len(train), cfg.grid_level, repeats=cfg.grid_repeats)
    best = uqmethods.select_grid_cell(cells, cfg.grid_level, tol)
    return best, cells


def run_experiment(config: ExperimentConfig, data: Dataset | None = None, setup: Setup | None = None,
                   keep_intervals: bool = False, progress=None) -> MetricsReport:
    """Run the full simulation protocol for both methods."""
    setup = setup or prepare(config, data)
    try:
        best, cells = tune_dropout(setup)
    except RuntimeError as err:
        raise ExperimentFailed(f"dropout grid search failed: {err}") from err
    tau_p = (best.tau, best.p)
    log.info("dropout hyperparameters: tau=%s p=%s (held-out PICP %.3f)", best.tau, best.p, best.picp)
    jobs = [(setup, j, tau_p) for j in range(config.n_simulations)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_one(job))
            if progress:
                progress(results[-1])
    results.sort(key=lambda r: r.index)
    failures = [(r.index, r.error) for r in results if not r.ok]
    if len(failures) > config.max_failure_fraction * config.n_simulations:
        raise ExperimentFailed(
            f"{len(failures)} of {config.n_simulations} simulations failed "
            f"(limit {config.max_failure_fraction:.0%}); first error: {failures[0][1]}", failures)
    good = [r for r in results if r.ok]
    n_test = setup.X_test.shape[0]
    entries = {}
    for method in METHODS:
        for k, level in enumerate(config.levels):
            pi_acc, ci_acc = CoverageAccumulator(n_test), CoverageAccumulator(n_test)
            for r in good:
                pi_acc.add(r.picf_terms[method][k])
                ci_acc.add(r.cicf_terms[method][k])
            entries[(method, level)] = MethodLevelReport(
                method, level,
                picp=np.array([r.picp[method][k] for r in good]),
                cicp=np.array([r.cicp[method][k] for r in good]),
                pi_width=np.array([r.pi_width[method][k] for r in good]),
                ci_width=np.array([r.ci_width[method][k] for r in good]),
                picf=metrics.finalize_picf(pi_acc),
                cicf=metrics.finalize_cicf(ci_acc),
            )
    status = [{"sim": r.index, "ok": r.ok, "error": r.error,
               "rmse": r.rmse, "loglik": r.loglik} for r in results]
    return MetricsReport(
        config=config,
        entries=entries,
        simulations=[r.index for r in good],
        failures=failures,
        dropout_choice={"tau": best.tau, "p": best.p, "heldout_picp": best.picp,
                        "grid": [asdict(c) for c in cells]},
        X_test=setup.X_test,
        f_test=setup.f_test,
        sd_test=setup.sd_test,
        sim_status=status,
        setup_info=setup.info,
        intervals={r.index: r.intervals for r in good} if keep_intervals else {},
    )


# ---------------------------------------------------------------------------
# linear-model dependence demonstration


def linear_dependence_demo(n_simulations: int, level: float, rng, slope: float = 2.0,
                           noise_sd: float = 1.0, n_train: int = 50, n_test: int = 200,
                           exclude: float = 0.05) -> np.ndarray:
    """Per-simulation CICP for a calibrated slope CI in ``y = slope * x + noise``.

    Least squares through the origin with known noise sd gives an exact
    interval for the slope.  Mapped to ``f(x) = slope * x`` it covers every
    test point or none, so each CICP is 0 or 1.  Test points within
    ``exclude`` of zero are dropped: there the interval collapses to {0}.
    """
    if n_simulations < 1:
        raise ValueError("n_simulations must be >= 1")
    x_train = np.linspace(-1.0, 1.0, n_train)
    x_test = np.linspace(-1.0, 1.0, n_test)
    x_test = x_test[np.abs(x_test) > exclude]
    sxx = float(np.sum(x_train ** 2))
    half = normal_quantile(0.5 + 0.5 * level) * noise_sd / np.sqrt(sxx)
    f_test = slope * x_test
    out = np.empty(n_simulations)
    for j in range(n_simulations):
        y = slope * x_train + noise_sd * rng.standard_normal(n_train)
        a_hat = float(x_train @ y) / sxx
        ends = np.stack([x_test * (a_hat - half), x_test * (a_hat + half)])
        out[j] = metrics.cicp(ends.min(axis=0), ends.max(axis=0), f_test)
    return out
