"""Command-line entry point: ``drlab run | verify | slope``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .demand import Uniform
from .harness import (
    EpisodeTrace,
    MonteCarloSummary,
    Scenario,
    dkw_experiment,
    loglog_slope,
    price_error_constants,
    run_monte_carlo,
    seed_stream,
)

log = logging.getLogger("drlab")

EXIT_OK = 0
EXIT_FAILED = 1  # replication failure or bound violation
EXIT_USAGE = 2

TRACE_HEADER = ("t", "c", "p", "p_star", "D", "a_hat", "b_hat", "q_hat", "lmin", "Jt", "Lt", "clamped")
SUMMARY_HEADER = (
    "t",
    "regret_mean",
    "regret_ci95",
    "price_sq_err",
    "theta_sq_err",
    "q_sq_err",
    "a_abs_err",
    "b_abs_err",
    "q_abs_err",
)
REPORT_HEADER = (
    "check",
    "policy",
    "periods",
    "violations",
    "min_slack",
    "max_slack",
    "max_bound",
    "t",
    "gamma",
    "empirical",
    "bound",
)


def fmt_float(x) -> str:
    """Shortest round-trip decimal, locale independent."""
    return repr(float(x))


def _write_rows(path: Path, header, columns) -> None:
    """Write equal-length columns; floats via ``repr``, ints and bools as integers."""
    cols = []
    for col in columns:
        arr = np.asarray(col)
        if arr.dtype.kind in "biu":
            cols.append([str(int(v)) for v in arr.tolist()])
        else:
            cols.append([repr(v) for v in arr.astype(float).tolist()])
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(row) + "\n")


def write_trace(path: Path, trace: EpisodeTrace) -> None:
    _write_rows(
        path,
        TRACE_HEADER,
        (
            trace.t,
            trace.c,
            trace.p,
            trace.p_star,
            trace.demand,
            trace.a_hat,
            trace.b_hat,
            trace.q_hat,
            trace.lmin,
            trace.J,
            trace.L,
            trace.clamped.astype(np.int64),
        ),
    )


def write_summary(path: Path, s: MonteCarloSummary) -> None:
    _write_rows(
        path,
        SUMMARY_HEADER,
        (
            s.t,
            s.regret_mean,
            s.regret_ci,
            s.price_sq_err,
            s.theta_sq_err,
            s.q_sq_err,
            s.a_abs_err,
            s.b_abs_err,
            s.q_abs_err,
        ),
    )


def write_regret(path: Path, summaries: dict[str, MonteCarloSummary]) -> None:
    kinds = list(summaries)
    first = summaries[kinds[0]]
    _write_rows(path, ("t", *kinds), (first.t, *(summaries[k].regret_mean for k in kinds)))


def derived_constants(config: ExperimentConfig, scenario: Scenario) -> dict[str, float]:
    """Every constant a bound check uses, keyed as it appears in the manifest."""
    box = scenario.model.box
    eps_lo, eps_hi = scenario.shock_support
    k1, k2, k3 = price_error_constants(box, eps_hi, scenario.p_bar)
    out = {
        "a": scenario.model.params.a,
        "b": scenario.model.params.b,
        "a_lo": box.a_lo,
        "a_hi": box.a_hi,
        "b_hi": box.b_hi,
        "c_bar": scenario.c_bar,
        "eps_lo": eps_lo,
        "eps_hi": eps_hi,
        "p_bar": scenario.p_bar,
        "q_true": scenario.true_q,
        "kappa1": k1,
        "kappa2": k2,
        "kappa3": k3,
    }
    lip = scenario.model.shock.bilipschitz_constant()
    if lip is not None and math.isfinite(lip):
        out["mu1"] = 2.0 / (lip**2 * math.log(2.0))
    dkw_lip = _dkw_law(config).bilipschitz_constant()
    out["dkw_mu1"] = 2.0 / (dkw_lip**2 * math.log(2.0))
    return out


def write_manifest(path: Path, config: ExperimentConfig, scenario: Scenario, extra: dict | None = None) -> None:
    lines = [f"{k} = {v}" for k, v in config.items()]
    lines += [f"derived.{k} = {v:.12g}" for k, v in derived_constants(config, scenario).items()]
    meta = {
        "digest": config.digest(),
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    meta.update(extra or {})
    lines += [f"meta.{k} = {v}" for k, v in meta.items()]
    path.write_text("\n".join(lines) + "\n")


def _dkw_law(config: ExperimentConfig) -> Uniform:
    return Uniform(config.dkw.lo, config.dkw.hi)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    run = {}
    for flag, key in (("seed", "seed"), ("reps", "reps"), ("horizon", "horizon"), ("out", "out")):
        value = getattr(args, flag, None)
        if value is not None:
            run[key] = value
    if getattr(args, "policies", None):
        run["policies"] = tuple(p.strip() for p in args.policies.split(",") if p.strip())
    return config.with_overrides(run=run) if run else config


def _build(config: ExperimentConfig) -> Scenario:
    return Scenario.from_config(config, population_seed=seed_stream(config.run.seed, 0))


def cmd_run(args) -> int:
    config = _resolve_config(args)
    out = Path(config.run.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = ("oracle", *[k for k in config.run.policies if k != "oracle"])
    scenario = _build(config)

    def save(kind, rep, trace):
        if args.traces == "all" or (args.traces == "first" and rep == 0):
            write_trace(out / f"trace_{kind}_{rep}.csv", trace)

    summaries = run_monte_carlo(config, kinds, with_checks=False, on_trace=save, scenario=scenario)
    for kind, s in summaries.items():
        write_summary(out / f"summary_{kind}.csv", s)
    write_regret(out / "regret.csv", summaries)
    failed = {k: s.errors for k, s in summaries.items() if s.errors}
    extra = {f"completed_{k}": s.completed for k, s in summaries.items()}
    write_manifest(out / "manifest.txt", config, scenario, extra)
    for kind, s in summaries.items():
        print(f"{kind:10s} completed {s.completed}/{s.reps}  mean regret(T) {s.regret_mean[-1]:.6g}")
    if failed:
        for kind, errs in failed.items():
            for rep, msg in errs:
                print(f"error: {kind} replication {rep}: {msg}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_verify(args) -> int:
    config = _resolve_config(args)
    out = Path(config.run.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = tuple(k for k in config.run.policies if k != "oracle")
    scenario = _build(config)
    rows = []
    exact_violations = 0
    failed = False
    if kinds:
        summaries = run_monte_carlo(config, kinds, with_checks=True, scenario=scenario)
        for kind, s in summaries.items():
            failed |= bool(s.errors)
            for rep, msg in s.errors:
                print(f"error: {kind} replication {rep}: {msg}", file=sys.stderr)
            for name, res in s.checks.items():
                exact_violations += res.violations
                rows.append(
                    (name, kind, res.periods, res.violations, res.min_slack, res.max_slack, res.max_bound, "", "", "", "")
                )
    dkw = config.dkw
    alpha = config.policy.alpha if dkw.alpha is None else dkw.alpha
    cells = dkw_experiment(
        _dkw_law(config), alpha, dkw.t_grid, dkw.gamma_grid, dkw.reps, seed=seed_stream(config.run.seed, 3)
    )
    for c in cells:
        rows.append(("dkw", "", c.reps, int(not c.ok), "", "", "", c.t, c.gamma, c.empirical, c.bound))
    with open(out / "bounds_report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, float) else v for v in row])
    write_manifest(out / "manifest.txt", config, scenario)
    for row in rows:
        if row[0] == "dkw":
            print(f"dkw t={row[7]} gamma={row[8]}: empirical {row[9]:.4g} bound {row[10]:.4g} {'ok' if not row[3] else 'EXCEEDED'}")
        else:
            print(f"{row[0]:24s} {row[1]:10s} periods {row[2]:8d} violations {row[3]}")
    if failed or exact_violations:
        return EXIT_FAILED
    return EXIT_OK


def cmd_slope(args) -> int:
    with open(args.input, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    if data.size == 0:
        print("error: no data rows", file=sys.stderr)
        return EXIT_USAGE
    t = data[:, 0]
    T = t.max()
    lo = T / 2 if args.t_lo is None else args.t_lo
    hi = T if args.t_hi is None else args.t_hi
    if np.count_nonzero((t >= lo) & (t <= hi)) < 3:
        print(f"error: window [{lo:g}, {hi:g}] holds fewer than 3 points", file=sys.stderr)
        return EXIT_USAGE
    print(f"window [{lo:g}, {hi:g}]")
    for j, name in enumerate(header[1:], 1):
        try:
            slope, err = loglog_slope(t, data[:, j], lo, hi)
        except ValueError as exc:
            print(f"{name:12s} n/a ({exc})")
            continue
        print(f"{name:12s} {slope:.4f} +/- {err:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (bare casestudy.cfg selects the bundled one)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--reps", type=int, help="replication count")
        p.add_argument("--policies", help="comma-separated list of oracle,myopic,perturbed")
        p.add_argument("--horizon", type=int, help="number of periods T")

    run = sub.add_parser("run", help="simulate policies and write traces, summaries and regret")
    common(run)
    run.add_argument(
        "--traces", choices=("all", "first", "none"), default="all", help="which replications get a trace CSV"
    )
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="run the exact-inequality and concentration checks")
    common(verify)
    verify.set_defaults(func=cmd_verify)

    slope = sub.add_parser("slope", help="log-log slopes of the columns of a regret CSV")
    slope.add_argument("input", help="regret.csv")
    slope.add_argument("--t-lo", type=float, help="window start (default T/2)")
    slope.add_argument("--t-hi", type=float, help="window end (default T)")
    slope.set_defaults(func=cmd_slope)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
