"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (shown in the pytest terminal summary and
printed when this file is run as a script) before asserting.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import (
    PATTERNS,
    closed_form_m000,
    observed_likelihood_nowcast,
    stage_a_identity,
    stage_b_closed_form,
)
from tsenowcast.cli import run
from tsenowcast.estimators import dse_from_table, saturated_variance, tse
from tsenowcast.evaluation import mae
from tsenowcast.loglinear import FAMILIES, ModelSpec, fit_cells, ipf_fit
from tsenowcast.nowcast import em_fit
from tsenowcast.simulation import SimConfig, analytic_dse_bias, run_bias_study, simulate_period
from tsenowcast.tables import AggregatedCounts, PeriodTable, StackedTable, emit_counts_csv, read_counts_csv
from tsenowcast.uncertainty import BootstrapConfig, EstimatorConfig, bootstrap

DATA = Path(__file__).parent / "data"


def report(name: str, ok: bool, detail: str, elapsed: float, limit: float | None = None) -> None:
    timing = f"{elapsed:.2f}s" + (f" (limit {limit:.0f}s)" if limit else "")
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}; {timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def rel(a, b):
    return abs(a - b) / abs(b)


def test_closed_form_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_tse = worst_dse = 0.0
    for _ in range(1000):
        counts = rng.integers(20, 5000, 7).tolist()
        table = PeriodTable.from_array(0, counts)
        worst_tse = max(worst_tse, rel(tse(table).m000, closed_form_m000(counts)))
        c = dict(zip(PATTERNS, counts))
        n11, n10, n01 = c["111"] + c["110"], c["101"] + c["100"], c["011"] + c["010"]
        two = fit_cells(ModelSpec(("A", "B")), [(0, "11"), (0, "10"), (0, "01")], [n11, n10, n01])
        worst_dse = max(worst_dse, rel(dse_from_table(table).m000, two.fitted[(0, "00")]))
    elapsed = time.perf_counter() - start
    ok = worst_tse < 1e-10 and worst_dse < 1e-10 and elapsed < 5
    report("closed-form equivalence", ok, f"max rel tse {worst_tse:.1e}, dse {worst_dse:.1e} (tol 1e-10)", elapsed, 5)


def test_cross_algorithm():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    cells = [(0, k) for k in PATTERNS]
    worst = 0.0
    for family in FAMILIES:
        spec = ModelSpec.family_spec(family)
        for _ in range(100):
            counts = rng.integers(20, 5000, 7)
            a = fit_cells(spec, cells, counts).fitted
            b = ipf_fit(spec, cells, counts)
            worst = max(worst, max(rel(b[k], a[k]) for k in a))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 10
    report("fit_poisson vs ipf_fit", ok, f"8 families x 100 tables, max rel {worst:.1e} (tol 1e-6)", elapsed, 10)


def test_em_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_cf = worst_oracle = 0.0
    monotone = True
    for _ in range(200):
        base = rng.integers(20, 2000, 7).tolist()
        agg = rng.integers(50, 3000, 3).tolist()
        stacked = StackedTable(PeriodTable.from_array(0, base), AggregatedCounts(1, dict(zip(("11+", "10+", "01+"), agg))))
        res = em_fit(stacked)
        worst_cf = max(worst_cf, rel(res.N_nc, stage_b_closed_form(base, agg)[0]))
        worst_oracle = max(worst_oracle, rel(res.N_nc, observed_likelihood_nowcast(base, agg)))
        trace = np.array(res.trace)
        # tolerance covers float noise in the summed log-likelihood
        monotone &= bool(np.all(np.diff(trace) >= -1e-10 * (1 + abs(trace[-1]))))
    elapsed = time.perf_counter() - start
    ok = worst_cf < 1e-6 and worst_oracle < 1e-6 and monotone and elapsed < 60
    detail = f"200 instances, max rel closed form {worst_cf:.1e}, likelihood oracle {worst_oracle:.1e} (tol 1e-6), monotone={monotone}"
    report("EM correctness (stage b)", ok, detail, elapsed, 60)


def test_stage_a_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        base = rng.integers(20, 2000, 7).tolist()
        n1 = int(rng.integers(50, 6000))
        res = em_fit(StackedTable(PeriodTable.from_array(0, base), AggregatedCounts(1, {"1++": n1})))
        worst = max(worst, rel(res.N_nc, stage_a_identity(base, n1)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 10
    report("stage-a scaling identity", ok, f"200 instances, max rel {worst:.1e} (tol 1e-8)", elapsed, 10)


def test_unbiasedness_study():
    start = time.perf_counter()
    mu = {"A": -0.5, "B": -0.5, "C": -0.5, "AB": math.log(2)}
    cfg = SimConfig(N_base=100_000, N_current=100_000, mu_base=mu, replications=200, seed=2024)
    rows = {r["estimator"]: r for r in run_bias_study(cfg)["rows"]}
    nc_bias = rows["nc_b"]["mean_relative_bias"]
    dse_bias = rows["dse"]["mean_relative_bias"]
    analytic = analytic_dse_bias(mu)
    elapsed = time.perf_counter() - start
    ok = abs(nc_bias) < 0.01 and abs(dse_bias - analytic) < 0.01 and elapsed < 120
    detail = f"NC-b bias {nc_bias:+.2e} (|.|<0.01); DSE bias {dse_bias:+.4f} vs analytic {analytic:+.4f} (within 0.01)"
    report("unbiasedness study", ok, detail, elapsed, 120)


def test_variance_vs_bootstrap():
    start = time.perf_counter()
    mu = {"A": -0.5, "B": -0.7, "C": -0.3, "AB": 0.6, "AC": 0.2, "BC": 0.3}
    table = simulate_period(100_000, mu, np.random.default_rng(99)).table
    est = tse(table)
    analytic = math.sqrt(saturated_variance(table, est.m000))
    boot = bootstrap(table, EstimatorConfig("tse"), BootstrapConfig(replications=2000, seed=7))
    elapsed = time.perf_counter() - start
    gap = rel(boot.sd, analytic)
    ok = gap < 0.15 and elapsed < 120
    report("variance vs bootstrap", ok, f"analytic sd {analytic:.1f}, bootstrap sd {boot.sd:.1f}, rel gap {gap:.3f} (<0.15)", elapsed, 120)


def test_mae_rounding():
    start = time.perf_counter()
    columns = {
        "ab": ([-5.7, 2.8, -2.8, -8.9, 3.1, 0.0, -1.4, -4.7, 7.2, -0.6, -0.9], 3.46, 3.3),
        "lagged": ([-6.9, -7.0, 4.3, 1.8, 0.9, -0.8, 6.0, 4.6, -8.3, -6.0, 6.9], 4.86, 4.5),
        "bc": ([-4.8, 15.7, -8.1, 1.6, 6.3, -4.7, 3.5, 3.2, 4.6, -0.7, -1.8], 5.0, 4.7),
        "ac": ([-9.9, 15.6, -10.7, -1.6, -0.2, 0.9, -2.2, 0.6, 30.2, 16.1, -6.5], 8.59, 8.1),
    }
    parts, ok = [], True
    for name, (values, recomputed, printed) in columns.items():
        value = mae(values)
        good = round(value, 2) == recomputed and abs(value - printed) < 0.5
        ok &= good
        parts.append(f"{name} {value:.2f} vs {printed}")
    report("MAE rounding check", ok, ", ".join(parts), time.perf_counter() - start)


def test_stage_c_bit_for_bit():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    same = 0
    for i in range(100):
        family = list(FAMILIES)[i % len(FAMILIES)]
        base = PeriodTable.from_array(0, rng.integers(20, 2000, 7).tolist())
        current = PeriodTable.from_array(1, rng.integers(20, 2000, 7).tolist())
        same += em_fit(StackedTable(base, current), family, "c").N_nc == tse(current, family).N
    report("stage-c equals tse", same == 100, f"{same}/100 identical", time.perf_counter() - start)


def test_determinism(tmp_path, capsys):
    start = time.perf_counter()
    tables = read_counts_csv((DATA / "synthetic_years.csv").read_text())
    y2017, y2018 = tmp_path / "y2017.csv", tmp_path / "y2018_partial.csv"
    y2017.write_text(emit_counts_csv(tables[2017]))
    y2018.write_text(emit_counts_csv(tables[2018].aggregate("b")))
    study = tmp_path / "study.json"
    study.write_text(json.dumps({"N": 20000, "mu_base": {"AB": 0.7, "A": -0.5}, "replications": 10}))
    commands = {
        "fit": ["fit", "--input", str(y2017)],
        "nowcast": ["nowcast", "--base", str(y2017), "--current", str(y2018), "--stage", "b"],
        "bootstrap": ["bootstrap", "--base", str(y2017), "--current", str(y2018), "--estimator", "nowcast", "--boot", "60", "--seed", "42"],
        "simulate": ["simulate", "--config", str(study), "--seed", "42"],
        "evaluate": ["evaluate", "--input", str(DATA / "synthetic_years.csv")],
    }
    threaded = {"bootstrap", "simulate"}
    failures = []
    for name, argv in commands.items():
        outputs = []
        for i, workers in enumerate(["1", "1", "4"] if name in threaded else ["1", "1"]):
            target = tmp_path / f"{name}{i}"
            extra = ["--workers", workers] if name in threaded else []
            code = run(argv + extra + ["--out", str(target)])
            capsys.readouterr()
            if code != 0:
                failures.append(f"{name} exit {code}")
                break
            if target.is_dir():
                outputs.append({p.name: p.read_bytes() for p in sorted(target.iterdir())})
            else:
                sidecar = target.with_suffix(".csv")
                outputs.append((target.read_bytes(), sidecar.read_bytes() if sidecar.exists() else b""))
        if any(o != outputs[0] for o in outputs[1:]):
            failures.append(name)
    ok = not failures
    detail = "byte-identical: " + ", ".join(commands) if ok else "differs: " + ", ".join(failures)
    report("CLI determinism (repeat runs, 1 vs 4 workers)", ok, detail, time.perf_counter() - start)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
