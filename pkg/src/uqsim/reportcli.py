"""Command-line front end and report files.

Run directory layout::

    manifest.json        config echo, version, seed, timestamps, per-simulation status
    per_simulation.csv   sim,method,level,picp,cicp,avg_pi_width,avg_ci_width
    per_x.csv            x_index,method,level,picf,cicf
    summary.csv          method,level,picf_brier,cicf_brier,picp_mean,cicp_mean,
                         coverage_bias,coverage_variance,avg_pi_width,avg_ci_width
    summary.json         the summary rows as JSON
    histograms.csv       binned PICF/CICF values per method and level
    test_points.csv      covariates, true mean and true sd of every test point

Floats are written with ``repr`` so they parse back to the identical double;
``report`` can therefore rebuild both summary files byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, harness, metrics
from .harness import ExperimentConfig, ExperimentFailed
from .mathstat import make_stream
from .neuralnet import MlpConfig

log = logging.getLogger(__name__)

PER_SIM_HEADER = ["sim", "method", "level", "picp", "cicp", "avg_pi_width", "avg_ci_width"]
PER_X_HEADER = ["x_index", "method", "level", "picf", "cicf"]
SUMMARY_HEADER = ["method", "level", "picf_brier", "cicf_brier", "picp_mean", "cicp_mean",
                  "coverage_bias", "coverage_variance", "avg_pi_width", "avg_ci_width"]
OUT_DIR_ENV = "UQSIM_OUT_DIR"

EXIT_OK, EXIT_USAGE, EXIT_EXPERIMENT = 0, 1, 2


class UsageError(Exception):
    pass


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(row[k]) for k in header])


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# report rows


def per_simulation_rows(report: harness.MetricsReport) -> list:
    rows = []
    for pos, j in enumerate(report.simulations):
        for (method, level), e in report.entries.items():
            rows.append({"sim": j, "method": method, "level": level,
                         "picp": e.picp[pos], "cicp": e.cicp[pos],
                         "avg_pi_width": e.pi_width[pos], "avg_ci_width": e.ci_width[pos]})
    return rows


def per_x_rows(report: harness.MetricsReport) -> list:
    rows = []
    for (method, level), e in report.entries.items():
        for i in range(len(e.picf)):
            rows.append({"x_index": i, "method": method, "level": level,
                         "picf": e.picf[i], "cicf": e.cicf[i]})
    return rows


def _groups(rows):
    out = {}
    for r in rows:
        out.setdefault((r["method"], float(r["level"])), []).append(r)
    return out


def summarize(sim_rows, x_rows) -> list:
    """Summary rows from per-simulation and per-point rows.

    Accepts rows as produced in memory or as parsed back from the CSVs.
    """
    sims = _groups(sim_rows)
    xs = _groups(x_rows)
    out = []
    for key, srows in sims.items():
        method, level = key
        xrows = sorted(xs[key], key=lambda r: int(r["x_index"]))
        srows = sorted(srows, key=lambda r: int(r["sim"]))
        picf = np.array([float(r["picf"]) for r in xrows])
        cicf = np.array([float(r["cicf"]) for r in xrows])
        bias, var = metrics.bias_variance(picf, level)
        col = lambda name: np.array([float(r[name]) for r in srows])  # noqa: E731
        out.append({
            "method": method, "level": level,
            "picf_brier": metrics.brier(picf, level),
            "cicf_brier": metrics.brier(cicf, level),
            "picp_mean": float(np.mean(col("picp"))),
            "cicp_mean": float(np.mean(col("cicp"))),
            "coverage_bias": bias,
            "coverage_variance": var,
            "avg_pi_width": float(np.mean(col("avg_pi_width"))),
            "avg_ci_width": float(np.mean(col("avg_ci_width"))),
        })
    return out


def summary_json(rows) -> str:
    return json.dumps({"summary": rows}, indent=2) + "\n"


def emit_histogram_data(values, n_bins: int):
    """Equal-width bin counts of coverage values over [0, 1].

    Returns ``(edges, counts)``; the last bin is closed so 1.0 is counted.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no values to bin")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    counts, edges = np.histogram(values, bins=n_bins, range=(0.0, 1.0))
    return edges, counts


def histogram_rows(x_rows, n_bins: int = 20) -> list:
    rows = []
    for (method, level), grp in _groups(x_rows).items():
        for metric in ("picf", "cicf"):
            edges, counts = emit_histogram_data([float(r[metric]) for r in grp], n_bins)
            for b in range(n_bins):
                rows.append({"method": method, "level": level, "metric": metric,
                             "bin_lower": edges[b], "bin_upper": edges[b + 1], "count": int(counts[b])})
    return rows


def write_summary(out: Path, sim_rows, x_rows) -> list:
    rows = summarize(sim_rows, x_rows)
    write_csv(out / "summary.csv", SUMMARY_HEADER, rows)
    (out / "summary.json").write_text(summary_json(rows))
    return rows


def write_run(report: harness.MetricsReport, out: Path, manifest: dict) -> list:
    out.mkdir(parents=True, exist_ok=True)
    sim_rows = per_simulation_rows(report)
    x_rows = per_x_rows(report)
    write_csv(out / "per_simulation.csv", PER_SIM_HEADER, sim_rows)
    write_csv(out / "per_x.csv", PER_X_HEADER, x_rows)
    write_csv(out / "histograms.csv", ["method", "level", "metric", "bin_lower", "bin_upper", "count"],
              histogram_rows(x_rows))
    n_feat = report.X_test.shape[1]
    tp_header = ["x_index", *[f"x{k}" for k in range(n_feat)], "true_mean", "true_sd"]
    tp_rows = [{"x_index": i, **{f"x{k}": report.X_test[i, k] for k in range(n_feat)},
                "true_mean": report.f_test[i], "true_sd": report.sd_test[i]}
               for i in range(report.X_test.shape[0])]
    write_csv(out / "test_points.csv", tp_header, tp_rows)
    rows = write_summary(out, sim_rows, x_rows)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable) + "\n")
    return rows


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialise {type(v).__name__}")


# ---------------------------------------------------------------------------
# config files: flat "section.key = value" lines

CONFIG_KEYS = {
    "experiment.dgp": ("dgp", str),
    "experiment.data_path": ("data_path", str),
    "experiment.n_simulations": ("n_simulations", int),
    "experiment.levels": ("levels", "floats"),
    "experiment.master_seed": ("master_seed", int),
    "experiment.workers": ("workers", int),
    "experiment.picf_mode": ("picf_mode", str),
    "experiment.max_failure_fraction": ("max_failure_fraction", float),
    "split.n_train": ("n_train", int),
    "split.n_test": ("n_test", int),
    "split.n_val": ("n_val", int),
    "split.seed": ("split_seed", int),
    "bootstrap.M": ("M", int),
    "dropout.B": ("B", int),
    "dropout.tau_grid": ("tau_grid", "floats"),
    "dropout.p_grid": ("p_grid", "floats"),
    "dropout.grid_level": ("grid_level", float),
    "dropout.grid_repeats": ("grid_repeats", int),
    "net.hidden_sizes": ("net.hidden_sizes", "ints"),
    "net.epochs": ("net.epochs", int),
    "net.learning_rate": ("net.learning_rate", float),
    "net.lr_decay": ("net.lr_decay", float),
    "net.grad_clip": ("net.grad_clip", float),
    "forest.n_trees": ("forest_trees", int),
    "forest.max_depth": ("forest_depth", int),
}


def _parse_value(raw: str, kind):
    if kind == "floats":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if kind == "ints":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return kind(raw)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``section.key = value`` lines into ExperimentConfig keyword args."""
    opts, net = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        field_name, kind = CONFIG_KEYS[key]
        try:
            value = _parse_value(raw, kind)
        except ValueError:
            raise UsageError(f"{source}:{lineno}: bad value {raw!r} for {key}") from None
        if field_name.startswith("net."):
            net[field_name[4:]] = value
        else:
            opts[field_name] = value
    if net:
        opts["net"] = MlpConfig(**net)
    return opts


def config_text(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for key, (field_name, kind) in CONFIG_KEYS.items():
        if field_name.startswith("net."):
            v = d["net"][field_name[4:]]
        else:
            v = d[field_name]
        if v is None:
            continue
        if isinstance(v, list):
            v = ", ".join(fmt(x) if kind == "floats" else str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uqsim", description="Simulation-based evaluation of regression uncertainty estimates.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    lp = sub.add_parser("list-presets", help="show the experiment presets")
    lp.add_argument("--write", metavar="DIR", help="also write one config file per preset into DIR")

    rp = sub.add_parser("run", help="run a simulation experiment")
    rp.add_argument("--preset", required=True)
    rp.add_argument("--config", help="config file (section.key = value lines); flags override it")
    rp.add_argument("--data", help="CSV file for the boston preset (last column is the target)")
    rp.add_argument("--seed", type=int, help="master seed")
    rp.add_argument("--sims", type=int, help="number of simulations")
    rp.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV} or ./uqsim-out)")
    rp.add_argument("--fast", action="store_true", help="ci-fast sizes: 20 simulations, M=10, B=25")
    rp.add_argument("--workers", type=int, help="parallel worker processes")
    rp.add_argument("--levels", help="comma-separated confidence levels")
    rp.add_argument("--picf-mode", choices=("analytic", "empirical"))

    dp = sub.add_parser("demo-linear", help="CICP of a calibrated linear-model CI")
    dp.add_argument("--sims", type=int, required=True)
    dp.add_argument("--level", type=float, default=0.95)
    dp.add_argument("--seed", type=int, default=0)
    dp.add_argument("--out", help="output directory")

    rep = sub.add_parser("report", help="recompute summary files from a run directory")
    rep.add_argument("--in", dest="in_dir", required=True)
    return p


def _out_dir(arg, default_name) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUT_DIR_ENV, "uqsim-out")) / default_name


def _ensure_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise UsageError(f"output directory {out} is not writable ({err.strerror})") from None


def build_config(args) -> ExperimentConfig:
    if args.preset not in harness.PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; run 'uqsim list-presets' to see the choices")
    opts = dict(harness.PRESETS[args.preset])
    if args.fast:
        opts.update(harness.CI_FAST)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        opts.update(parse_config_text(path.read_text(), str(path)))
    if args.data:
        opts["data_path"] = args.data
    if args.seed is not None:
        opts["master_seed"] = args.seed
    if args.sims is not None:
        opts["n_simulations"] = args.sims
    if args.workers is not None:
        opts["workers"] = args.workers
    if args.levels:
        opts["levels"] = _parse_value(args.levels, "floats")
    if args.picf_mode:
        opts["picf_mode"] = args.picf_mode
    if opts.get("dgp") == "boston":
        if not opts.get("data_path"):
            raise UsageError("the boston preset needs --data <csv> (the dataset is not bundled)")
        if not Path(opts["data_path"]).is_file():
            raise UsageError(f"data file {opts['data_path']} not found")
    try:
        return ExperimentConfig(**opts)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def cmd_list_presets(args) -> int:
    for name, note in harness.PRESET_NOTES.items():
        print(f"{name:12s} {note}")
    print("add --fast to any preset for the ci-fast sizes "
          f"({', '.join(f'{k}={v}' for k, v in harness.CI_FAST.items())})")
    if args.write:
        out = Path(args.write)
        _ensure_writable(out)
        for name in harness.PRESETS:
            cfg = harness.preset(name)
            (out / f"{name}.cfg").write_text(f"# preset {name}: {harness.PRESET_NOTES[name]}\n"
                                             + config_text(cfg))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args.out, f"{args.preset}-seed{cfg.master_seed}")
    _ensure_writable(out)
    started = _now()

    def progress(res):
        log.info("simulation %d %s (%.1fs)", res.index, "ok" if res.ok else f"failed: {res.error}", res.seconds)

    try:
        report = harness.run_experiment(cfg, progress=progress)
    except ExperimentFailed as err:
        print(f"uqsim: experiment failed: {err}", file=sys.stderr)
        return EXIT_EXPERIMENT
    except (ValueError, OSError) as err:
        print(f"uqsim: {err}", file=sys.stderr)
        return EXIT_USAGE
    manifest = {
        "uqsim_version": __version__,
        "preset": args.preset,
        "master_seed": cfg.master_seed,
        "config": cfg.to_dict(),
        "dropout_choice": report.dropout_choice,
        "setup": report.setup_info,
        "started": started,
        "finished": _now(),
        "units": "target units of the data-generating process"
                 + (" (standardized source data)" if cfg.dgp == "boston" else ""),
        "simulations": report.sim_status,
    }
    rows = write_run(report, out, manifest)
    for r in rows:
        print(f"{r['method']:9s} level={r['level']:<5} PICP={r['picp_mean']:.3f} CICP={r['cicp_mean']:.3f} "
              f"PICF-Brier={r['picf_brier']:.4f} CICF-Brier={r['cicf_brier']:.4f} "
              f"width PI={r['avg_pi_width']:.3f} CI={r['avg_ci_width']:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_demo_linear(args) -> int:
    if args.sims < 1:
        raise UsageError("--sims must be >= 1")
    if not 0 < args.level < 1:
        raise UsageError("--level must lie in (0, 1)")
    values = harness.linear_dependence_demo(args.sims, args.level, make_stream(args.seed, 4))
    out = _out_dir(args.out, f"demo-linear-seed{args.seed}")
    _ensure_writable(out)
    write_csv(out / "linear_demo.csv", ["sim", "cicp"],
              [{"sim": j, "cicp": v} for j, v in enumerate(values)])
    print(f"fraction of simulations with CICP = 1: {np.mean(values == 1.0):.4f} (level {args.level})")
    print(f"wrote {out / 'linear_demo.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.in_dir)
    for name in ("per_simulation.csv", "per_x.csv"):
        if not (src / name).is_file():
            raise UsageError(f"{src} has no {name}; is it a uqsim run directory?")
    sim_rows = read_csv(src / "per_simulation.csv")
    x_rows = read_csv(src / "per_x.csv")
    rows = write_summary(src, sim_rows, x_rows)
    print(f"rebuilt summary for {len(rows)} method/level pairs in {src}")
    return EXIT_OK


COMMANDS = {"list-presets": cmd_list_presets, "run": cmd_run, "demo-linear": cmd_demo_linear,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"uqsim: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
