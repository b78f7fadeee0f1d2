"""Command-line front end.

Every command writes JSON with sorted keys and floats at 17 significant
digits, plus a ``metadata`` block (version, seed, config hash, convergence).
Exit status: 0 success, 1 data error, 2 convergence failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import tse
from .evaluation import evaluate
from .loglinear import FAMILIES, ConvergenceError, normalize_family
from .nowcast import em_fit
from .simulation import SimConfig, report_csv, run_bias_study
from .tables import (
    AggregatedCounts,
    PeriodTable,
    StackedTable,
    TableError,
    read_counts_csv,
    validate,
)
from .uncertainty import BootstrapConfig, BootstrapError, EstimatorConfig, bootstrap

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2

MODEL_CHOICES = [f.lower() for f in FAMILIES if f != "independence"] + ["indep", "independence"]
ORDER_CHOICES = ["abc", "acb", "bac", "bca", "cab", "cba"]


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, floats with 17 significant digits."""
    return _encode(obj) + "\n"


def _encode(obj) -> str:
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        text = format(x, ".17g")
        if not any(ch in text for ch in ".en"):
            text += ".0"
        return text
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ", ".join(f"{json.dumps(k)}: {_encode(v)}" for k, v in items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise TableError(f"cannot read {path}: {err.strerror or err}") from None


def _metadata(args, inputs: dict[str, str], convergence: dict) -> dict:
    config = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in ("out", "out_dir", "workers", "func", "input", "base", "current", "config")
    }
    config["inputs"] = {k: hashlib.sha256(v.encode("utf-8")).hexdigest() for k, v in sorted(inputs.items())}
    digest = hashlib.sha256(dumps(config).encode("utf-8")).hexdigest()
    return {
        "version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config_hash": digest,
        "convergence": convergence,
        "loglik_convention": "independent Poisson",
    }


def _emit(args, payload: dict) -> None:
    text = dumps(payload)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _pick_period(periods: dict, wanted):
    if wanted is not None:
        for key, value in periods.items():
            if str(key) == str(wanted):
                return value
        raise TableError(f"period {wanted} not in input")
    if len(periods) != 1:
        raise TableError(f"input holds {len(periods)} periods; choose one with --period")
    return next(iter(periods.values()))


def cmd_fit(args) -> dict:
    text = _read(args.input)
    table = _pick_period(read_counts_csv(text), args.period)
    if not isinstance(table, PeriodTable):
        raise TableError("fit needs a complete period (no wildcard rows)")
    table.require_complete()
    if args.order:
        table = table.relabel(args.order)
    est = tse(table, args.model, level=args.level, ci_method=args.ci, tol=args.fit_tol, max_iter=args.fit_max_iter)
    out = est.to_dict()
    out["period"] = table.period
    conv = {"converged": est.fit.converged, "iterations": est.fit.iterations}
    return {"estimate": out, "metadata": _metadata(args, {"input": text}, conv)}


def _stacked_from_args(args) -> tuple[StackedTable, dict]:
    if args.input:
        text = _read(args.input)
        periods = read_counts_csv(text)
        inputs = {"input": text}
        if len(periods) != 2:
            raise TableError(f"stacked input must hold two periods, found {len(periods)}")
        from .tables import parse_counts_csv

        stacked = parse_counts_csv(text)
    else:
        if not (args.base and args.current):
            raise TableError("give --input or both --base and --current")
        btext, ctext = _read(args.base), _read(args.current)
        inputs = {"base": btext, "current": ctext}
        base = _pick_period(read_counts_csv(btext), None)
        current = _pick_period(read_counts_csv(ctext), None)
        if not isinstance(base, PeriodTable):
            raise TableError("base period must be complete")
        stacked = StackedTable(base, current)
    errors = [d.message for d in validate(stacked) if d.severity == "error"]
    if errors:
        raise TableError("; ".join(errors))
    if args.order:
        stacked = stacked.relabel(args.order)
    return stacked, inputs


def cmd_nowcast(args) -> dict:
    stacked, inputs = _stacked_from_args(args)
    result = em_fit(
        stacked,
        args.model,
        args.stage,
        tol=args.tol,
        max_iter=args.max_iter,
        fit_tol=args.fit_tol,
        fit_max_iter=args.fit_max_iter,
    )
    out = result.to_dict()
    conv = {"converged": result.converged, "em_iterations": result.iterations, "loglik_trace": list(result.trace)}
    return {"nowcast": out, "metadata": _metadata(args, inputs, conv)}


def cmd_bootstrap(args) -> dict:
    periods = read_counts_csv(_read(args.input)) if args.input else {}
    if len(periods) == 1:
        data = next(iter(periods.values()))
        if args.order and isinstance(data, PeriodTable):
            data = data.relabel(args.order)
        inputs = {"input": _read(args.input)}
    else:
        data, inputs = _stacked_from_args(args)
    estimator = EstimatorConfig(
        kind=args.estimator, family=args.model, stage=args.stage, pair=args.pair.upper(), tol=args.tol, max_iter=args.max_iter
    )
    config = BootstrapConfig(replications=args.boot, level=args.level, seed=args.seed, workers=args.workers)
    result = bootstrap(data, estimator, config)
    out = result.to_dict()
    out["estimator"] = estimator.to_dict()
    conv = {"failed_replicates": len(result.failures)}
    return {"bootstrap": out, "metadata": _metadata(args, inputs, conv)}


def cmd_simulate(args) -> dict:
    text = _read(args.config)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise TableError(f"invalid study config: {err}") from None
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.replications is not None:
        raw["replications"] = args.replications
    raw["workers"] = args.workers
    try:
        config = SimConfig.from_dict(raw)
    except TypeError as err:
        raise TableError(f"invalid study config: {err}") from None
    args.seed = config.seed
    report = run_bias_study(config)
    report["config"].pop("workers", None)
    failures = sum(r["failures"] for r in report["rows"])
    payload = {"report": report, "metadata": _metadata(args, {"config": dumps(report["config"])}, {"estimator_failures": failures})}
    if args.out:
        Path(args.out).with_suffix(".csv").write_text(report_csv(report), encoding="utf-8")
    return payload


def cmd_evaluate(args) -> dict:
    text = _read(args.input)
    periods = read_counts_csv(text)
    tables: dict = {}
    for label, data in periods.items():
        if not isinstance(label, int):
            raise TableError(f"evaluate needs integer year labels, got {label!r}")
        if not isinstance(data, PeriodTable):
            raise TableError(f"year {label} is not complete")
        data.require_complete()
        tables[label] = data
    if not tables:
        raise TableError("no years in input")
    for year in range(min(tables), max(tables) + 1):
        tables.setdefault(year, None)
    result = evaluate(tables, args.model, args.level)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, content in result["csv"].items():
        (outdir / name).write_text(content, encoding="utf-8")
    summary = result["summary"]
    conv = {"year_errors": summary["errors"]}
    payload = {"summary": summary, "metadata": _metadata(args, {"input": text}, conv)}
    (outdir / "summary.json").write_text(dumps(payload), encoding="utf-8")
    return payload


def _model(value: str) -> str:
    try:
        return normalize_family(value)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsenowcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, stage=True):
        p.add_argument("--model", type=_model, default="saturated", help="base model family")
        p.add_argument("--order", choices=ORDER_CHOICES, help="arrival order of the samples")
        p.add_argument("--tol", type=float, default=1e-8, help="EM tolerance on completed counts")
        p.add_argument("--max-iter", type=int, default=10_000, help="maximum EM iterations")
        p.add_argument("--fit-tol", type=float, default=1e-10, help="IRLS deviance tolerance")
        p.add_argument("--fit-max-iter", type=int, default=100)
        p.add_argument("--level", type=float, default=0.95)
        p.add_argument("--out", help="output path (default: stdout)")
        if stage:
            p.add_argument("--stage", choices=["a", "b", "c"], default=None, help="default: from the data")

    p = sub.add_parser("fit", help="single-period TSE")
    p.add_argument("--input", required=True)
    p.add_argument("--period", help="period to fit when the file holds several")
    p.add_argument("--ci", choices=["lognormal", "normal"], default="lognormal")
    common(p, stage=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("nowcast", help="two-period nowcast by EM")
    p.add_argument("--input", help="counts file with both periods")
    p.add_argument("--base")
    p.add_argument("--current")
    common(p)
    p.set_defaults(func=cmd_nowcast)

    p = sub.add_parser("bootstrap", help="percentile bootstrap interval")
    p.add_argument("--input")
    p.add_argument("--base")
    p.add_argument("--current")
    p.add_argument("--estimator", choices=["tse", "dse", "nowcast"], default="tse")
    p.add_argument("--pair", choices=["ab", "ac", "bc", "AB", "AC", "BC"], default="AB")
    p.add_argument("--boot", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("simulate", help="bias study on simulated populations")
    p.add_argument("--config", required=True, help="study JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="JSON path; the CSV goes next to it")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="multi-year nowcast evaluation")
    p.add_argument("--input", required=True, help="counts file, one complete table per year")
    p.add_argument("--model", type=_model, default="saturated")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out-dir", "--out", dest="out_dir", required=True)
    p.set_defaults(func=cmd_evaluate, out=None)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors count as data errors; 2 is reserved for convergence failures
        return EXIT_DATA if exc.code else EXIT_OK
    try:
        payload = args.func(args)
        if args.command != "evaluate":
            _emit(args, payload)
    except (ConvergenceError, BootstrapError) as err:
        print(f"tsenowcast: convergence failure: {err}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (TableError, ValueError, OSError) as err:
        print(f"tsenowcast: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
