"""Command-line interface: ``boundedcp {simulate,test,segment,experiment}``."""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .bar_model import BarParams, simulate_bar, simulate_mcp_bar
from .cusum import run_test
from .errors import (
    DegenerateSeries,
    Infeasible,
    InvalidSeries,
    NonpositiveVariance,
    OptimizerFailure,
    OutOfDomain,
    ParseError,
    SingularMatrix,
)
from .estimation import Method
from .evaluation import (
    SCENARIOS,
    ExperimentConfig,
    get_scenario,
    model_fit_stats,
    segmentation_experiment,
    size_power_experiment,
)
from .segmentation import GaConfig, Likelihood, exhaustive_m_sweep, max_feasible_m, min_spacing, s_ga

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("boundedcp")


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("BOUNDEDCP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"BOUNDEDCP_SEED must be an integer, got {env!r}") from None
    return 0


def _clean(obj):
    """Replace non-finite floats by ``None`` so the JSON stays strict."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _config_echo(args) -> dict:
    return _clean({k: v for k, v in vars(args).items() if k != "func"})


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="\n")


def _report(args, command, seed, digest, started, n, N, result) -> None:
    doc = {
        "manifest": io.make_manifest(command, _config_echo(args), seed, digest, started),
        "input": {"n": n, "N": N},
        "result": _clean(result),
    }
    if args.json:
        _write(args.json, io.dump_json(doc))


def _load(args):
    series, raw, inferred = io.read_series(args.input, args.upper_bound)
    if inferred:
        log.warning(
            "--upper-bound not given; using the observed maximum N=%d. "
            "A wrong N corrupts every downstream result.",
            series.upper_bound,
        )
    return series, io.sha256_bytes(raw)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = io.now()
    seed = _seed(args)
    rng = np.random.default_rng(seed)
    if args.spec or args.scenario:
        if args.spec:
            model, spec_n = io.load_model_spec(args.spec)
        else:
            spec_n = None
        n = args.n if args.n is not None else spec_n
        if n is None:
            raise UsageError("--n is required")
        if args.scenario:
            try:
                model = get_scenario(args.scenario).model(n)
            except (KeyError, ValueError) as exc:
                raise UsageError(str(exc.args[0])) from None
        series = simulate_mcp_bar(model, n, rng)
        cps = list(model.change_points)
    else:
        missing = [f for f in ("upper_bound", "p", "rho", "n") if getattr(args, f) is None]
        if missing:
            raise UsageError("missing " + ", ".join("--" + f.replace("_", "-") for f in missing))
        try:
            params = BarParams(args.p, args.rho)
        except OutOfDomain as exc:
            raise UsageError(str(exc)) from None
        series = simulate_bar(params, args.upper_bound, args.n, rng)
        cps = []
    text = io.format_series(series)
    _write(args.output, text)
    if args.json is None and args.output not in (None, "-"):
        args.json = args.output + ".manifest.json"
    _report(
        args, "simulate", seed, None, started, series.n, series.upper_bound,
        {"output": args.output, "sha256": io.sha256_bytes(text.encode()), "change_points": cps},
    )
    return EXIT_OK


def cmd_test(args) -> int:
    started = io.now()
    series, digest = _load(args)
    seed = _seed(args)
    methods = args.method or ["CLS", "MQL", "CML"]
    gammas = args.gamma or [0.01, 0.05]
    outcomes = []
    for method in methods:
        for gamma in gammas:
            out = run_test(
                series, Method(method), gamma, args.k0, rng=np.random.default_rng(seed),
                mc_grid=args.mc_grid, mc_reps=args.mc_reps,
            )
            outcomes.append(out)
            note = " (Monte Carlo critical value)" if out.critical_source != "table" else ""
            print(
                f"{method:3s} gamma={gamma:g}: statistic={out.statistic:.4f} "
                f"critical={out.critical_value:.4f}{note} argmax_k={out.argmax_k} "
                f"-> {'REJECT' if out.reject else 'accept'} H0"
            )
    _report(args, "test", seed, digest, started, series.n, series.upper_bound,
            {"tests": [o.to_dict() for o in outcomes]})
    return EXIT_OK


def cmd_segment(args) -> int:
    started = io.now()
    series, digest = _load(args)
    seed = _seed(args)
    n = series.n
    config = GaConfig(
        population_scale=args.population_scale,
        crossover_fraction=args.cf,
        max_generations=args.generations,
        epsilon_lambda=args.epsilon_lambda,
        max_changepoints_cap=args.max_cp,
        seed=seed,
        compare_m0=args.compare_m0,
        likelihood=Likelihood(args.likelihood.replace("-", "_")),
    )
    L = min_spacing(n, config.epsilon(n))
    if max_feasible_m(n, L) < 1:
        raise Infeasible(f"n={n} cannot host a change-point with minimum spacing {L}")
    search = exhaustive_m_sweep if args.exhaustive_m else s_ga
    fit = search(series, config)
    stats = model_fit_stats(series, fit)
    print(f"m_hat = {fit.m_hat}")
    print(f"tau_hat = {list(fit.tau_hat)}")
    print(f"lambda_hat = {[round(v, 4) for v in fit.lambda_hat]}")
    for j, ((lo, hi), est) in enumerate(zip(fit.segments(), fit.segment_estimates), start=1):
        print(f"segment {j}: t={lo}..{hi} rho={est.params.rho:.4f} p={est.params.p:.4f}"
              + (" (clamped)" if est.clamped else ""))
    print(f"MDL = {fit.mdl:.4f}  AIC = {stats.aic:.4f}  BIC = {stats.bic:.4f}  RMS = {stats.rms:.4f}")
    result = {
        "m_hat": fit.m_hat,
        "tau_hat": list(fit.tau_hat),
        "lambda_hat": list(fit.lambda_hat),
        "segments": [
            {"start": lo, "end": hi, "rho": e.params.rho, "p": e.params.p,
             "clamped": e.clamped, "loglik": e.loglik}
            for (lo, hi), e in zip(fit.segments(), fit.segment_estimates)
        ],
        "mdl": fit.mdl,
        "mdl_by_m": {str(k): v for k, v in fit.mdl_by_m.items()},
        "aic": stats.aic,
        "bic": stats.bic,
        "rms": stats.rms,
        "k": stats.k,
        "k_convention": "2*(m+1)+m (two parameters per segment plus locations)",
        "likelihood": fit.likelihood.value,
        "search": "exhaustive" if args.exhaustive_m else "s_ga",
    }
    _report(args, "segment", seed, digest, started, n, series.upper_bound, result)
    return EXIT_OK


SIZE_POWER_COLUMNS = ["scenario", "n", "method", "gamma", "critical_value",
                      "rejection_rate", "replications", "skipped"]
SEGMENTATION_COLUMNS = ["scenario", "n", "replications", "skipped", "cr_m", "m_hat_counts",
                        "zeta_under", "zeta_over", "d_mean", "bias", "mse"]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _rows(battery: str, report) -> list[dict]:
    if battery == "size-power":
        rows = []
        for key, rate in report.size_or_power.items():
            method, gamma = key.split("@")
            rows.append({
                "scenario": report.scenario, "n": report.n, "method": method, "gamma": gamma,
                "critical_value": report.critical_values[gamma], "rejection_rate": rate,
                "replications": report.replications,
                "skipped": report.skipped_by_method[method],
            })
        return rows
    return [{
        "scenario": report.scenario, "n": report.n, "replications": report.replications,
        "skipped": report.skipped, "cr_m": report.cr_m,
        "m_hat_counts": ";".join(f"{k}:{v}" for k, v in report.m_hat_counts.items()),
        "zeta_under": report.zeta_under, "zeta_over": report.zeta_over,
        "d_mean": report.d_mean,
        "bias": ";".join(_fmt(b) for b in report.bias),
        "mse": ";".join(_fmt(m) for m in report.mse),
    }]


def cmd_experiment(args) -> int:
    started = io.now()
    seed = _seed(args)
    scenarios = args.scenario or []
    for sid in scenarios:
        if sid not in SCENARIOS:
            raise UsageError(f"unknown scenario {sid!r}; valid ids: {', '.join(SCENARIOS)}")
    if not scenarios:
        raise UsageError(f"--scenario is required; valid ids: {', '.join(SCENARIOS)}")
    sizes = args.n or [200, 500, 800]
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    reps = args.reps or (1000 if args.battery == "size-power" else 200)
    rows = []
    for i, sid in enumerate(scenarios):
        for j, n in enumerate(sizes):
            cfg = ExperimentConfig(
                scenario=sid, n=n, replications=reps, seed=seed + 1000 * i + j,
                methods=tuple(args.method or ["CLS", "MQL", "CML"]),
                gammas=tuple(args.gamma or [0.01, 0.05]), k0=args.k0,
                ga=GaConfig(max_changepoints_cap=args.max_cp), n_jobs=max(1, threads),
            )
            try:
                cfg.true_model()
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            run = size_power_experiment if args.battery == "size-power" else segmentation_experiment
            report = run(cfg)
            rows.extend(_rows(args.battery, report))
            log.info("finished %s n=%d", sid, n)
    columns = SIZE_POWER_COLUMNS if args.battery == "size-power" else SEGMENTATION_COLUMNS
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in columns})
    _write(args.output, buf.getvalue())
    _report(args, "experiment", seed, None, started, None, None,
            {"battery": args.battery, "columns": columns, "rows": rows})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _probability(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boundedcp",
        description="Change-point tests and segmentation for bounded count series (BAR(1)).",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, input_file=True):
        if input_file:
            p.add_argument("input", help="series file: one count per line or t,count CSV")
            p.add_argument("--upper-bound", "-N", type=_positive, help="upper bound N")
        p.add_argument("--seed", type=int, help="master seed (fallback: $BOUNDEDCP_SEED, then 0)")
        p.add_argument("--json", metavar="PATH", help="write the JSON report here ('-' for stdout)")

    p = sub.add_parser("simulate", help="simulate a BAR(1) or piecewise BAR(1) series")
    common(p, input_file=False)
    p.add_argument("--upper-bound", "-N", type=_positive)
    p.add_argument("--p", type=_probability)
    p.add_argument("--rho", type=float)
    p.add_argument("--n", type=_positive)
    p.add_argument("--spec", help="JSON segmented-model file")
    p.add_argument("--scenario", help=f"named design ({', '.join(SCENARIOS)})")
    p.add_argument("--output", "-o", help="series output path (default stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("test", help="CUSUM test for a parameter change")
    common(p)
    p.add_argument("--method", action="append", choices=[m.value for m in Method])
    p.add_argument("--gamma", action="append", type=_probability)
    p.add_argument("--k0", type=_positive, default=10)
    p.add_argument("--mc-grid", type=_positive, default=2000)
    p.add_argument("--mc-reps", type=_positive, default=20_000)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("segment", help="MDL segmentation by S-GA")
    common(p)
    p.add_argument("--epsilon-lambda", type=_probability, help="minimum relative spacing (default 10/n)")
    p.add_argument("--cf", type=_probability, default=0.55, help="crossover fraction")
    p.add_argument("--generations", type=_positive, default=300)
    p.add_argument("--population-scale", type=_positive, default=10)
    p.add_argument("--max-cp", type=_positive, default=10)
    p.add_argument("--compare-m0", action=argparse.BooleanOptionalAction, default=True,
                   help="let the no-change model compete (default on)")
    p.add_argument("--likelihood", choices=["cls-plugin", "full-cml"], default="cls-plugin")
    p.add_argument("--exhaustive-m", action="store_true", help="search every m up to the cap")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("experiment", help="Monte Carlo batteries")
    common(p, input_file=False)
    p.add_argument("--battery", choices=["size-power", "segmentation"], required=True)
    p.add_argument("--scenario", action="append")
    p.add_argument("--n", action="append", type=_positive)
    p.add_argument("--reps", type=_positive)
    p.add_argument("--method", action="append", choices=[m.value for m in Method])
    p.add_argument("--gamma", action="append", type=_probability)
    p.add_argument("--k0", type=_positive, default=10)
    p.add_argument("--max-cp", type=_positive, default=10)
    p.add_argument("--threads", type=_positive, help="worker processes (default: CPU count)")
    p.add_argument("--output", "-o", help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ParseError, InvalidSeries, DegenerateSeries, Infeasible, OutOfDomain, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SingularMatrix, OptimizerFailure, NonpositiveVariance) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
