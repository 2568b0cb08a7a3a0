"""Naive bootstrap ensembles and Monte-Carlo dropout as uncertainty estimators.

Both estimators report a mean prediction, an epistemic sd (spread of the
ensemble members or of the stochastic passes) and a homoscedastic aleatoric
sd.  Prediction intervals use the sum of the two variances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import neuralnet
from .datagen import Dataset
from .mathstat import RngStream, draw_seed, make_stream, normal_quantile, student_t_quantile
from .metrics import IntervalBatch, picp
from .neuralnet import Mlp, MlpConfig, TrainingDivergedError

log = logging.getLogger(__name__)

DEFAULT_TAU_GRID = (1.0, 5.0, 10.0, 25.0, 50.0, 100.0)
DEFAULT_P_GRID = (0.05, 0.1, 0.2, 0.3, 0.5)


class MemberTrainingError(RuntimeError):
    def __init__(self, member: int, cause: TrainingDivergedError):
        super().__init__(f"bootstrap member {member} failed to train: {cause}")
        self.member = member
        self.cause = cause


def _check_level(level: float) -> float:
    level = float(level)
    if not 0 < level < 1:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    return level


class UQModel:
    """Common interface: ``stats(X)`` gives (mean, epistemic sd) per row."""

    name = "uq"

    def stats(self, X):
        raise NotImplementedError

    def aleatoric_sd(self, X) -> np.ndarray:
        raise NotImplementedError

    def interval_quantile(self, level: float) -> float:
        raise NotImplementedError

    def predictive_sd(self, X) -> np.ndarray:
        _, ep_sd = self.stats(X)
        return np.sqrt(ep_sd ** 2 + self.aleatoric_sd(X) ** 2)

    def intervals(self, X, levels) -> IntervalBatch:
        levels = [_check_level(a) for a in levels]
        mean, ep_sd = self.stats(X)
        pred_sd = np.sqrt(ep_sd ** 2 + self.aleatoric_sd(X) ** 2)
        q = np.array([self.interval_quantile(a) for a in levels])[:, None]
        return IntervalBatch(levels, mean - q * pred_sd, mean + q * pred_sd,
                             mean - q * ep_sd, mean + q * ep_sd)

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass
class BootstrapEnsemble(UQModel):
    members: list
    aleatoric_var: float

    name = "bootstrap"

    @property
    def M(self) -> int:
        return len(self.members)

    def member_predictions(self, X) -> np.ndarray:
        return np.stack([neuralnet.predict(m, X) for m in self.members])

    def stats(self, X):
        preds = self.member_predictions(X)
        return preds.mean(axis=0), preds.std(axis=0, ddof=1)

    def aleatoric_sd(self, X) -> np.ndarray:
        return np.full(np.shape(X)[0], np.sqrt(self.aleatoric_var))

    def interval_quantile(self, level: float) -> float:
        # t with M degrees of freedom (not M - 1)
        return student_t_quantile(self.M, 0.5 + 0.5 * _check_level(level))

    def describe(self) -> dict:
        return {"method": self.name, "M": self.M, "aleatoric_sd": float(np.sqrt(self.aleatoric_var))}


def residual_variance(y_val, member_preds) -> float:
    """Homoscedastic noise variance from a validation set.

    Per validation point: squared residual of the ensemble mean minus the
    ensemble variance there, clamped at zero; then averaged.
    ``member_preds`` has shape ``(M, n_val)``.
    """
    member_preds = np.asarray(member_preds, dtype=float)
    y_val = np.asarray(y_val, dtype=float)
    if member_preds.shape[0] < 2:
        raise ValueError("need at least two ensemble members")
    if y_val.size == 0:
        raise ValueError("validation set is empty")
    resid2 = (y_val - member_preds.mean(axis=0)) ** 2
    ens_var = member_preds.var(axis=0, ddof=1)
    return float(np.mean(np.maximum(resid2 - ens_var, 0.0)))


def fit_bootstrap(train: Dataset, val: Dataset, M: int, net_config: MlpConfig, rng: RngStream,
                  retries: int = 1) -> BootstrapEnsemble:
    """Train ``M`` networks on pairwise bootstrap resamples of ``train``.

    A member whose training diverges is retrained on a fresh stream up to
    ``retries`` times before the failure propagates.
    """
    if M < 2:
        raise ValueError("a bootstrap ensemble needs M >= 2")
    if len(val) == 0:
        raise ValueError("validation set is empty")
    base = draw_seed(rng)
    n = len(train)
    members = []
    for i in range(M):
        for attempt in range(retries + 1):
            member_rng = make_stream(base, i, attempt)
            idx = member_rng.integers(0, n, size=n)
            try:
                members.append(neuralnet.fit(train.X[idx], train.y[idx], net_config, member_rng))
                break
            except TrainingDivergedError as err:
                if attempt == retries:
                    raise MemberTrainingError(i, err) from err
                log.warning("bootstrap member %d diverged (%s); retrying", i, err)
    preds = np.stack([neuralnet.predict(m, val.X) for m in members])
    return BootstrapEnsemble(members, residual_variance(val.y, preds))


@dataclass
class DropoutModel(UQModel):
    net: Mlp
    B: int
    tau: float
    pass_seed: int

    name = "dropout"

    @property
    def p(self) -> float:
        return self.net.config.dropout_rate

    def passes(self, X) -> np.ndarray:
        """The ``B`` stochastic forward passes, shape ``(B, rows)``.

        Masks come from a stream fixed at fit time, so repeated calls agree.
        """
        return neuralnet.predict_passes(self.net, X, self.B, make_stream(self.pass_seed))

    def stats(self, X):
        P = self.passes(X)
        return P.mean(axis=0), P.std(axis=0, ddof=1)

    def aleatoric_sd(self, X) -> np.ndarray:
        return np.full(np.shape(X)[0], 1.0 / np.sqrt(self.tau))

    def interval_quantile(self, level: float) -> float:
        return normal_quantile(0.5 + 0.5 * _check_level(level))

    def describe(self) -> dict:
        return {"method": self.name, "B": self.B, "tau": self.tau, "p": self.p}


def fit_dropout(train: Dataset, p: float, tau: float, B: int, net_config: MlpConfig,
                rng: RngStream) -> DropoutModel:
    if not tau > 0:
        raise ValueError("tau must be positive")
    if B < 2:
        raise ValueError("need at least two forward passes")
    net = neuralnet.fit(train.X, train.y, net_config.replace(dropout_rate=p), rng)
    return DropoutModel(net, B, float(tau), draw_seed(rng))


def intervals_bootstrap(model: BootstrapEnsemble, X, levels) -> IntervalBatch:
    return model.intervals(X, levels)


def intervals_dropout(model: DropoutModel, X, levels) -> IntervalBatch:
    return model.intervals(X, levels)


@dataclass(frozen=True)
class GridCell:
    tau: float
    p: float
    picp: float


def select_grid_cell(cells, target: float = 0.68, tol: float = 0.0) -> GridCell:
    """Cell with PICP closest to ``target``; ties favour small p, then large tau.

    Dropout rates whose best cell lies within ``tol`` of the overall best
    distance count as tied, and the smallest such p is kept; within it the
    closest cell wins.  With ``tol=0`` only exact ties do.
    """
    cells = list(cells)
    if not cells:
        raise ValueError("no grid cells to choose from")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    best = min(abs(c.picp - target) for c in cells)
    near = [c for c in cells if abs(c.picp - target) <= best + tol]
    p = min(c.p for c in near)
    return min((c for c in cells if c.p == p), key=lambda c: (abs(c.picp - target), -c.tau))


def holdout_size(n: int, holdout: float = 0.2) -> int:
    """Number of rows the grid search holds out of ``n`` training rows."""
    return max(1, int(round(holdout * n)))


def holdout_se(n: int, level: float = 0.68, holdout: float = 0.2, repeats: int = 1) -> float:
    """Binomial standard error of a held-out PICP at ``level``, averaged over ``repeats`` splits."""
    return math.sqrt(level * (1 - level) / (holdout_size(n, holdout) * repeats))


def grid_scores(train: Dataset, tau_grid, p_grid, net_config: MlpConfig, rng: RngStream,
                B: int = 100, level: float = 0.68, holdout: float = 0.2, repeats: int = 1) -> list:
    """PICP at ``level`` on a held-out part of ``train`` for every (tau, p).

    With ``repeats > 1`` the random holdout split is redrawn that many times
    and the PICPs are averaged, which lowers the noise of the score.
    """
    if not tau_grid or not p_grid:
        raise ValueError("grids must be nonempty")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    n = len(train)
    n_hold = holdout_size(n, holdout)
    perms = [rng.permutation(n) for _ in range(repeats)]
    base = draw_seed(rng)
    z = normal_quantile(0.5 + 0.5 * level)
    cells = []
    for k, p in enumerate(p_grid):
        scores = np.zeros(len(tau_grid))
        try:
            for r, perm in enumerate(perms):
                fit_part, hold = train.subset(perm[n_hold:]), train.subset(perm[:n_hold])
                # tau only enters the intervals, so one network per dropout rate suffices
                model = fit_dropout(fit_part, p, 1.0, B, net_config, make_stream(base, k, r))
                mean, ep_sd = model.stats(hold.X)
                for i, tau in enumerate(tau_grid):
                    half = z * np.sqrt(ep_sd ** 2 + 1.0 / tau)
                    scores[i] += picp(mean - half, mean + half, hold.y)
        except TrainingDivergedError as err:
            log.warning("grid search: p=%s failed to train (%s)", p, err)
            continue
        cells.extend(GridCell(float(tau), float(p), float(sc / repeats)) for tau, sc in zip(tau_grid, scores))
    if not cells:
        raise RuntimeError("every grid cell failed to train")
    return cells


def grid_search_dropout(train: Dataset, tau_grid=DEFAULT_TAU_GRID, p_grid=DEFAULT_P_GRID,
                        net_config: MlpConfig = neuralnet.DEFAULT_NET, rng: RngStream | None = None,
                        B: int = 100, level: float = 0.68, repeats: int = 1, tol: float | None = 0.0):
    """Pick (tau, p) whose held-out PICP at ``level`` is closest to ``level``.

    ``tol=None`` uses the standard error of the held-out PICP as the tie
    tolerance (see :func:`select_grid_cell`).  The caller refits the chosen
    pair on the full training set.
    """
    if rng is None:
        raise ValueError("grid search needs a random stream")
    cells = grid_scores(train, tau_grid, p_grid, net_config, rng, B, level, repeats=repeats)
    if tol is None:
        tol = holdout_se(len(train), level, repeats=repeats)
    best = select_grid_cell(cells, level, tol)
    return best.tau, best.p
