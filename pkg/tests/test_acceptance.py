"""Acceptance suite: one PASS/FAIL line per criterion, shown in the run summary.

Published reference numbers are printed next to ours where
they exist; they are context, not gates.  Set UQSIM_BOSTON_CSV to a copy of
the Boston housing table (506 rows, 13 features, target last) to enable the
real-data part of criterion 7.
"""

import os
from pathlib import Path

import numpy as np
import pytest

import test_metrics
import test_neuralnet
import test_uqmethods
from conftest import ACCEPTANCE_LINES, boston_like
from uqsim import harness, reportcli
from uqsim.datagen import load_csv
from uqsim.mathstat import make_stream, normal_quantile, standard_normal_cdf, student_t_quantile
from uqsim.metrics import bias_variance, brier

pytestmark = pytest.mark.slow

BOSTON_ENV = "UQSIM_BOSTON_CSV"


def record(criterion, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    assert ok, detail


def skip(criterion, reason):
    ACCEPTANCE_LINES.append(f"SKIP criterion {criterion}: {reason}")
    pytest.skip(reason)


@pytest.fixture(scope="module")
def homo():
    cfg = harness.preset("toy-homo", fast=True, n_simulations=50)
    return harness.run_experiment(cfg)


@pytest.fixture(scope="module")
def hetero():
    return harness.run_experiment(harness.preset("toy-hetero", fast=True, n_simulations=50))


@pytest.fixture(scope="module")
def bimodal():
    cfg = harness.preset("toy-bimodal", fast=True, n_simulations=50)
    return harness.run_experiment(cfg, keep_intervals=True)


def test_criterion_1_metric_identities():
    rng = make_stream(101)
    worst = {"brier": 0.0, "phi": 0.0, "inv": 0.0, "quant": 0.0}
    for _ in range(500):
        fr = rng.random(rng.integers(1, 200))
        level = rng.uniform(0.05, 0.95)
        b, v = bias_variance(fr, level)
        worst["brier"] = max(worst["brier"], abs(brier(fr, level) - (b * b + v)))
    z = rng.uniform(-30, 30, 10_000)
    worst["phi"] = float(np.max(np.abs(standard_normal_cdf(z) + standard_normal_cdf(-z) - 1)))
    zz = rng.uniform(-6, 6, 10_000)
    worst["inv"] = float(np.max(np.abs(normal_quantile(standard_normal_cdf(zz)) - zz)))
    quants = [(normal_quantile(0.975), test_uqmethods.Q975), (normal_quantile(0.84), test_uqmethods.Q84),
              (student_t_quantile(10, 0.975), 2.228138851986275),
              (student_t_quantile(2, 0.95), 2.9199855803537256),
              (student_t_quantile(5, 0.95), 2.0150483733330242),
              (student_t_quantile(50, 0.95), 1.6759050251630976)]
    worst["quant"] = max(abs(a - b) for a, b in quants)
    ok = worst["brier"] <= 1e-12 and worst["phi"] <= 1e-12 and worst["inv"] <= 1e-6 and worst["quant"] <= 1e-4
    record(1, ok, "brier=bias^2+var err {brier:.1e} (<=1e-12), Phi symmetry {phi:.1e} (<=1e-12), "
                  "quantile/CDF inverse {inv:.1e} (<=1e-6), quantiles vs oracle {quant:.1e} (<=1e-4)".format(**worst))


def test_criterion_2_picf_oracle_equivalence():
    a, e = test_metrics.picf_pair(make_stream(202))
    mean_gap, share, worst = test_metrics.picf_agreement(a, e)
    ok = mean_gap <= 0.01 and share >= 0.95 and worst <= 4
    record(2, ok, f"analytic vs empirical PICF at 10^4 simulations: mean gap {mean_gap:.4f} (<=0.01), "
                  f"{share:.0%} of points within 0.01 (>=95%), worst point {worst:.2f} SE (<=4)")


def test_criterion_3_linear_dependence():
    c = harness.linear_dependence_demo(10_000, 0.95, make_stream(303))
    binary = set(np.unique(c)) <= {0.0, 1.0}
    frac = float(np.mean(c == 1.0))
    record(3, binary and abs(frac - 0.95) <= 0.01,
           f"per-simulation CICP only 0/1: {binary}; fraction with CICP=1 {frac:.4f} (0.95 +/- 0.01)")


def test_criterion_4_homoscedastic_toy(homo):
    parts, ok = [], True
    for m in harness.METHODS:
        for level in (0.9, 0.8):
            v = float(homo.entry(m, level).picp.mean())
            ok &= abs(v - level) <= 0.05
            parts.append(f"{m}@{level} {v:.3f}")
    record(4, ok, "mean PICP within +/-0.05 of nominal: " + ", ".join(parts)
           + f" (dropout tau={homo.dropout_choice['tau']:g}, p={homo.dropout_choice['p']:g})")


def test_criterion_5_correct_on_average(hetero):
    x = hetero.X_test[:, 0]
    center, edge = np.abs(x) <= 0.1, np.abs(x) >= 0.4
    reference_brier = {"bootstrap": 0.011, "dropout": 0.005}
    parts, ok = [], True
    for m in harness.METHODS:
        e = hetero.entry(m, 0.9)
        c, d = e.picf[center].mean(), e.picf[edge].mean()
        p = float(e.picp.mean())
        ok &= c > 0.9 > d and e.brier_pi > 0.002 and abs(p - 0.9) <= 0.07
        ok &= abs(e.brier_pi - reference_brier[m]) <= 0.01
        parts.append(f"{m}: PICF centre {c:.3f} / edges {d:.3f}, Brier {e.brier_pi:.4f}, PICP {p:.3f}")
    record(5, ok, "; ".join(parts) + " (reference: PICP 0.86/0.83, Brier 0.011/0.005 with +/-0.01 on Brier)")


def _ci_width_per_x(report, method, level):
    widths = []
    for batches in report.intervals.values():
        lo, hi = batches[method].ci(level)
        widths.append(hi - lo)
    return np.mean(widths, axis=0)


def test_criterion_6_out_of_distribution(bimodal):
    x = bimodal.X_test[:, 0]
    sparse = (x >= -0.2) & (x <= 0.1)
    modal = (np.abs(x + 0.35) <= 0.1) | (np.abs(x - 0.30) <= 0.1)
    level = 0.8
    w = _ci_width_per_x(bimodal, "bootstrap", level)
    ws, wm = w[sparse].mean(), w[modal].mean()
    cicf = {m: bimodal.entry(m, level).cicf[sparse].mean() for m in harness.METHODS}
    record(6, ws > wm,
           f"bootstrap CI width sparse {ws:.3f} > modal {wm:.3f} at level {level}; reported, not gated: "
           f"sparse-region CICF bootstrap {cicf['bootstrap']:.3f}, dropout {cicf['dropout']:.3f}")


def _boston_run(data, sims, fast):
    cfg = harness.preset("boston", fast=fast, n_simulations=sims, levels=(0.8,))
    rep = harness.run_experiment(cfg, data=data)
    out = {m: rep.entry(m, 0.8) for m in harness.METHODS}
    return rep, out


def test_criterion_7_pipeline_surrogate(tmp_path):
    data = boston_like()
    rep, out = _boston_run(data, 10, fast=True)
    rows = reportcli.write_run(rep, tmp_path, {"note": "surrogate"})
    files = [f for f in ("per_simulation.csv", "per_x.csv", "summary.csv") if (tmp_path / f).is_file()]
    ok = len(files) == 3 and rep.X_test.shape == (100, 13) and len(rows) == 2
    detail = ", ".join(f"{m} CICP {e.cicp.mean():.3f} CICF-Brier {e.brier_ci:.3f} CI width {e.avg_ci_width:.3f}"
                       for m, e in out.items())
    record("7a", ok, f"366/100/40 pipeline end to end on a synthetic 506x13 stand-in, three CSV schemas written; {detail}")


def test_criterion_7_boston_cicp_sides():
    path = os.environ.get(BOSTON_ENV)
    if not path or not Path(path).is_file():
        skip("7b", f"no Boston CSV (set {BOSTON_ENV}); CICP opposite-sides gate not evaluated")
    rep, out = _boston_run(load_csv(path), 50, fast=False)
    b, d = out["bootstrap"].cicp.mean(), out["dropout"].cicp.mean()
    detail = (f"CICP bootstrap {b:.3f}, dropout {d:.3f} around 0.8; CICF Brier/width bootstrap "
              f"{out['bootstrap'].brier_ci:.3f}/{out['bootstrap'].avg_ci_width:.3f}, dropout "
              f"{out['dropout'].brier_ci:.3f}/{out['dropout'].avg_ci_width:.3f} "
              "(reference 0.147/0.378 and 0.042/0.884)")
    record("7b", (b - 0.8) * (d - 0.8) < 0, detail)


def _csv_bytes(report, out):
    reportcli.write_run(report, out, {})
    return {f: (out / f).read_bytes() for f in ("per_simulation.csv", "per_x.csv", "summary.csv",
                                                 "summary.json", "histograms.csv", "test_points.csv")}


def test_criterion_8_determinism(homo, tmp_path):
    cfg = harness.preset("toy-homo", fast=True, n_simulations=50, workers=4)
    parallel = harness.run_experiment(cfg)
    a = _csv_bytes(homo, tmp_path / "serial")
    b = _csv_bytes(parallel, tmp_path / "parallel")
    same = [f for f in a if a[f] == b[f]]
    record(8, len(same) == len(a), f"serial vs 4-worker rerun of the 50-simulation fast preset: "
                                   f"{len(same)}/{len(a)} output files byte-identical")


def test_criterion_9_gradient_and_residual_variance():
    checks = [test_neuralnet.test_gradient_matches_finite_differences,
              test_uqmethods.test_zero_residuals_zero_variance,
              test_uqmethods.test_two_member_variance_is_two_d_squared,
              test_uqmethods.test_single_point_clamp_inactive,
              test_uqmethods.test_clamp_is_per_point,
              test_uqmethods.test_unclamped_equals_plain_mean,
              test_uqmethods.test_residual_variance_nonnegative]
    failed = []
    for check in checks:
        try:
            check()
        except AssertionError:
            failed.append(check.__name__)
    record(9, not failed, f"gradient finite-difference check and {len(checks) - 1} residual-variance "
                          f"cases; failures: {failed or 'none'}")
