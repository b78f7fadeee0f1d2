from __future__ import annotations

import zlib

import numpy as np
import pytest

from oracles import observed_likelihood_nowcast, stage_a_identity, stage_b_closed_form
from tsenowcast.estimators import tse
from tsenowcast.loglinear import FAMILIES, ConvergenceError
from tsenowcast.nowcast import (
    STAGE_GROUPS,
    build_stacked_model,
    completed_counts,
    e_step,
    em_fit,
    initialize,
    nowcast_estimate,
)
from tsenowcast.tables import AggregatedCounts, PeriodTable, StackedTable

SYM_BASE = PeriodTable.from_array(2017, [10] * 7)


def random_stacked(rng, stage):
    base = PeriodTable.from_array(0, rng.integers(20, 2000, 7).tolist())
    current = PeriodTable.from_array(1, rng.integers(20, 2000, 7).tolist())
    return StackedTable(base, current).hold_out(stage)


def agg_b(n11, n10, n01, period=2018):
    return AggregatedCounts(period, {"11+": n11, "10+": n10, "01+": n01})


@pytest.mark.parametrize(
    "family, stage, params, rows, df",
    [("saturated", "b", 10, 13, 3), ("saturated", "a", 8, 11, 3), ("independence", "b", 7, 13, 6)],
)
def test_stacked_model_counts(family, stage, params, rows, df):
    model = build_stacked_model(family, stage)
    assert model.n_params == params
    assert len(model.cells) == rows
    assert model.df == df
    assert model.design().shape == (rows, params)


@pytest.mark.parametrize("family", list(FAMILIES))
@pytest.mark.parametrize("stage", ["a", "b"])
def test_every_family_is_identified(family, stage):
    assert build_stacked_model(family, stage).design().shape[1] == build_stacked_model(family, stage).n_params


def test_stacked_model_rejects_stage_c():
    with pytest.raises(ValueError):
        build_stacked_model("saturated", "c")


def test_initialize_halves():
    init = initialize(agg_b(20, 8, 0))
    assert init["111"] == 10 and init["110"] == 10
    assert init["101"] == 4 and init["100"] == 4
    assert init["011"] == 0 and init["010"] == 0


def test_initialize_stage_a():
    init = initialize(AggregatedCounts(1, {"1++": 40}))
    assert [init[k] for k in STAGE_GROUPS["a"]["1++"]] == [10, 10, 10, 10]


def test_initialize_weights():
    init = initialize(agg_b(20, 10, 10), (0.9, 0.1))
    assert init["111"] == pytest.approx(18) and init["110"] == pytest.approx(2)
    with pytest.raises(ValueError):
        initialize(agg_b(20, 10, 10), (0.5, 0.3, 0.2))


def test_e_step_equal_and_proportional():
    agg = agg_b(20, 21, 20)
    fitted = {"111": 1.0, "110": 1.0, "101": 2.0, "100": 2.0, "011": 3.0, "010": 1.0}
    out = e_step(agg, fitted)
    assert (out["111"], out["110"]) == (10, 10)
    assert (out["101"], out["100"]) == (10.5, 10.5)
    assert out["011"] == pytest.approx(15) and out["010"] == pytest.approx(5)


def test_e_step_stage_a_proportional():
    fitted = {(1, "111"): 1.0, (1, "110"): 2.0, (1, "101"): 3.0, (1, "100"): 4.0}
    out = e_step(AggregatedCounts(1, {"1++": 40}), fitted)
    assert [out[k] for k in ("111", "110", "101", "100")] == pytest.approx([4, 8, 12, 16])


def test_e_step_sums_are_exact():
    rng = np.random.default_rng(9)
    for _ in range(500):
        agg = agg_b(*rng.integers(0, 10**7, 3).tolist())
        fitted = dict(zip(("111", "110", "101", "100", "011", "010"), rng.uniform(1e-3, 1e4, 6)))
        out = e_step(agg, fitted)
        for key, cells in STAGE_GROUPS["b"].items():
            assert sum(out[c] for c in cells) == agg[key]


def test_symmetric_stage_b():
    res = em_fit(StackedTable(SYM_BASE, agg_b(20, 20, 20)))
    assert res.converged
    assert nowcast_estimate(res) == pytest.approx(80.0, rel=1e-10)
    assert res.N_nc == pytest.approx(80.0, rel=1e-10)
    assert res.m_nc["001"] == pytest.approx(10.0, rel=1e-10)
    assert res.m_nc["000"] == pytest.approx(10.0, rel=1e-10)
    cells = completed_counts(res).cells
    assert len(cells) == 6
    assert list(cells.values()) == pytest.approx([10.0] * 6, rel=1e-12)


def test_symmetric_stage_a():
    res = em_fit(StackedTable(SYM_BASE, AggregatedCounts(2018, {"1++": 40})))
    assert res.N_nc == pytest.approx(80.0, rel=1e-10)
    assert res.N_nc == pytest.approx(tse(SYM_BASE).N, rel=1e-10)


def test_completed_split_of_odd_aggregate():
    res = em_fit(StackedTable(SYM_BASE, agg_b(21, 20, 20)))
    cells = completed_counts(res).cells
    assert cells["111"] == pytest.approx(10.5, rel=1e-9)
    assert cells["110"] == pytest.approx(10.5, rel=1e-9)


def test_stage_b_closed_form_and_likelihood_oracle():
    rng = np.random.default_rng(77)
    for _ in range(10):
        stacked = random_stacked(rng, "b")
        res = em_fit(stacked)
        base = stacked.base.as_list()
        agg = [stacked.current[k] for k in ("11+", "10+", "01+")]
        N, m000, m001 = stage_b_closed_form(base, agg)
        assert res.N_nc == pytest.approx(N, rel=1e-8)
        assert res.m_nc["000"] == pytest.approx(m000, rel=1e-8)
        assert res.m_nc["001"] == pytest.approx(m001, rel=1e-8)
        assert res.N_nc == pytest.approx(observed_likelihood_nowcast(base, agg), rel=1e-6)


def test_stage_a_scaling_identity():
    rng = np.random.default_rng(78)
    for _ in range(20):
        stacked = random_stacked(rng, "a")
        res = em_fit(stacked)
        expected = stage_a_identity(stacked.base.as_list(), stacked.current["1++"])
        assert res.N_nc == pytest.approx(expected, rel=1e-8)


@pytest.mark.parametrize("family", list(FAMILIES))
def test_stage_c_is_tse(family):
    rng = np.random.default_rng(79)
    for _ in range(5):
        stacked = random_stacked(rng, "c")
        res = em_fit(stacked, family)
        assert res.N_nc == tse(stacked.current, family).N
        assert res.iterations == 0


def test_requested_stage_hides_samples():
    rng = np.random.default_rng(80)
    stacked = random_stacked(rng, "c")
    assert em_fit(stacked, stage="b").N_nc == em_fit(stacked.hold_out("b")).N_nc
    assert em_fit(stacked, stage="a").stage == "a"


@pytest.mark.parametrize("family", list(FAMILIES))
@pytest.mark.parametrize("stage", ["a", "b"])
def test_monotone_loglik_and_margins(family, stage):
    rng = np.random.default_rng(zlib.crc32(f"{family}/{stage}".encode()))
    for _ in range(100):
        stacked = random_stacked(rng, stage)
        res = em_fit(stacked, family)
        trace = np.array(res.trace)
        # float noise in the log-likelihood is far below this slack
        assert np.all(np.diff(trace) >= -1e-10 * (1 + abs(trace[-1])))
        for key, cells in STAGE_GROUPS[stage].items():
            fitted = sum(res.fit.fitted[(1, c)] for c in cells)
            assert fitted == pytest.approx(stacked.current[key], rel=1e-8)
        for key, cells in STAGE_GROUPS[stage].items():
            assert sum(res.completed.cells[c] for c in cells) == stacked.current[key]


@pytest.mark.parametrize("family", ["saturated", "2pd-II", "independence"])
def test_initialization_does_not_matter(family):
    rng = np.random.default_rng(81)
    for _ in range(10):
        stacked = random_stacked(rng, "b")
        a = em_fit(stacked, family)
        b = em_fit(stacked, family, init=(0.9, 0.1))
        assert b.N_nc == pytest.approx(a.N_nc, rel=1e-6)


@pytest.mark.parametrize("stage", ["a", "b"])
def test_no_change_consistency(stage):
    rng = np.random.default_rng(82)
    for _ in range(10):
        base = PeriodTable.from_array(0, rng.integers(20, 2000, 7).tolist())
        stacked = StackedTable(base, base.with_period(1)).hold_out(stage)
        assert em_fit(stacked).N_nc == pytest.approx(tse(base).N, rel=1e-8)


def test_non_convergence_is_reported():
    rng = np.random.default_rng(83)
    with pytest.raises(ConvergenceError, match="did not converge"):
        em_fit(random_stacked(rng, "b"), max_iter=2)


def test_m_step_failure_names_iteration():
    base = PeriodTable.from_array(0, [30, 40, 50, 60, 70, 80, 90])
    with pytest.raises(ConvergenceError, match="EM iteration 0"):
        em_fit(StackedTable(base, agg_b(0, 10, 10)))


def test_result_serialization():
    res = em_fit(StackedTable(SYM_BASE, agg_b(20, 20, 20)))
    out = res.to_dict()
    assert out["N_nc"] == pytest.approx(80.0)
    assert set(out["completed"]) == {"111", "110", "101", "100", "011", "010"}
    assert out["stage"] == "b" and out["base_period"] == 2017
