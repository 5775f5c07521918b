import dataclasses
import random

import pytest

from mixflow import experiment as E
from mixflow.metrics import NodeEvaluationResult, percent_benefit

TABLE4_BENEFIT = (0.0, 7.408, 10.437, 11.279, 10.957, 17.059, 23.578)


def result(fuel_per_veh=0.01, count=100, **kw):
    base = dict(scope="node", vehicle_count=count, completed_count=count, total_fuel_gal=fuel_per_veh * count,
                fuel_per_veh_gal=fuel_per_veh, co_g=1.0, nox_g=1.0, voc_g=1.0, co_g_per_veh=0.01,
                nox_g_per_veh=0.01, voc_g_per_veh=0.01, avg_queue_m=5.0, max_queue_m=20.0, avg_delay_s=10.0,
                avg_stopped_delay_s=3.0, total_stops=12)
    base.update(kw)
    return NodeEvaluationResult(**base)


def synthetic(grid=E.DEFAULT_GRID, seeds=E.DEFAULT_SEEDS, fpv=lambda p, s: 0.01 * (1 - 0.2 * p) + 1e-4 * s,
              count=lambda p, s: 100 + s):
    out = []
    for p in grid:
        for s in seeds:
            cell = E.Cell("route19", 500.0, "node", p, s)
            out.append(E.RunResult(cell, "route19", result(fpv(p, s), count(p, s))))
    return out


# --- sweep spec ----------------------------------------------------------------------


def test_default_protocol_size():
    spec = E.SweepSpec()
    assert spec.n_runs == 7 * 10 * 2 == 140
    assert len(spec.cells()) == 140
    assert E.SweepSpec(scenarios=("route19", "route15", "us33", "cosi")).n_runs == 560


def test_tiny_grid():
    spec = E.SweepSpec(penetrations=(0.0, 1.0), seeds=(1,), durations=(500,))
    assert spec.n_runs == 2


def test_default_scopes():
    spec = E.SweepSpec()
    assert spec.scope_for(500) == "node" and spec.scope_for(3600) == "full"
    assert E.SweepSpec(scopes={500: "full"}).scope_for(500) == "full"


@pytest.mark.parametrize("kw", [
    dict(penetrations=(0.2, 0.5)),
    dict(penetrations=(0.0, 0.5, 0.5)),
    dict(penetrations=(0.0, 1.2)),
    dict(seeds=()),
    dict(seeds=(1, 1)),
    dict(durations=(0,)),
    dict(scopes={500: "region"}),
    dict(scenarios=()),
])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        E.SweepSpec(**kw)


def test_spec_dict_round_trip():
    spec = E.SweepSpec(scenarios=("cosi",), seeds=(3, 4), scopes={500.0: "full"})
    assert E.SweepSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        E.SweepSpec.from_dict({"grid": [0, 1]})


# --- aggregation ----------------------------------------------------------------------


def test_seed_mean():
    rows = E.aggregate(synthetic(count=lambda p, s: s))
    assert all(r.veh_count_mean == 5.5 for r in rows)
    assert len(rows) == 7


def test_baseline_row_is_exactly_zero():
    rows = E.aggregate(synthetic())
    assert rows[0].penetration == 0.0
    assert rows[0].pct_fuel_benefit == 0.0 and rows[0].pct_mobility_change == 0.0


def test_benefit_against_baseline_mean():
    rows = E.aggregate(synthetic(grid=(0.0, 1.0), seeds=(1,), fpv=lambda p, s: 0.01144 if p == 0 else 0.00977))
    assert rows[1].pct_fuel_benefit == pytest.approx(14.60, abs=0.01)
    assert abs(rows[1].pct_fuel_benefit - 14.628) <= 0.15


def test_aggregation_is_order_free():
    res = synthetic()
    shuffled = res[:]
    random.Random(4).shuffle(shuffled)
    assert E.aggregate(res) == E.aggregate(shuffled)
    assert E.aggregate_csv(E.aggregate(res)) == E.aggregate_csv(E.aggregate(shuffled))


def test_aggregation_rejects_missing_and_duplicate_seeds():
    res = synthetic()
    with pytest.raises(ValueError):
        E.aggregate(res[:-1])
    with pytest.raises(ValueError):
        E.aggregate(res + [res[0]])


def test_aggregate_csv_round_trip():
    rows = E.aggregate(synthetic())
    text = E.aggregate_csv(rows)
    assert text.splitlines()[0] == ",".join(E.AGGREGATE_COLUMNS)
    again = E.read_aggregate(text)
    assert E.aggregate_csv(again) == text


def test_read_aggregate_rejects_bad_header():
    with pytest.raises(ValueError):
        E.read_aggregate("route,foo\nx,1\n")


def test_raw_rows_benefit_against_same_seed():
    res = synthetic(grid=(0.0, 0.5), seeds=(1, 2))
    rows = E.raw_rows(res)
    by = {(r["penetration_pct"], r["seed"]): r for r in rows}
    assert by[("0", "1")]["pct_fuel_benefit"] == "0.0"
    want = percent_benefit(res[1].result.fuel_per_veh_gal, res[3].result.fuel_per_veh_gal)
    assert float(by[("50", "2")]["pct_fuel_benefit"]) == want


def test_pct_recomputed_from_csv_means():
    rows = E.read_aggregate(E.aggregate_csv(E.aggregate(synthetic())))
    base = rows[0].fuel_per_veh_mean
    for r in rows:
        assert r.pct_fuel_benefit == pytest.approx(percent_benefit(base, r.fuel_per_veh_mean), abs=1e-9)


# --- trends ------------------------------------------------------------------------------


def test_table4_sequence_is_non_monotone_improving():
    assert E.benefit_trend(TABLE4_BENEFIT) == "non-monotone-improving"


def test_strictly_decreasing_fuel_is_improving():
    rho, verdict = E.classify([7, 6, 5, 4, 3, 2, 1], larger_is_better=False)
    assert verdict == "improving" and rho == pytest.approx(-1.0)


def test_constant_is_flat():
    assert E.classify([3.0] * 7, larger_is_better=False)[1] == "flat"


def test_endpoint_worse_is_degrading():
    assert E.classify([1, 2, 3, 4, 5, 6, 7], larger_is_better=False)[1] == "degrading"


def test_insignificant_difference_is_flat():
    assert E.classify([7, 6, 5, 4, 3, 2, 1], False, welch_p=0.3)[1] == "flat"
    assert E.classify([7, 6, 5, 4, 3, 2, 1], False, welch_p=0.01)[1] == "improving"


def test_classify_needs_three_points():
    with pytest.raises(ValueError):
        E.classify([1.0, 2.0], True)


def test_trend_report_uses_seed_samples():
    rows = E.aggregate(synthetic())
    trends = {t.metric: t for t in E.trend_report(rows)}
    assert trends["fuel_per_veh"].verdict == "improving"
    assert trends["fuel_per_veh"].welch_p is not None and trends["fuel_per_veh"].welch_p < 0.05
    assert trends["avg_queue_m"].verdict == "flat"


def test_default_workers_env(monkeypatch):
    monkeypatch.setenv("MIXFLOW_WORKERS", "3")
    assert E.default_workers() == 3
    monkeypatch.delenv("MIXFLOW_WORKERS")
    assert E.default_workers() >= 1


# --- real runs ------------------------------------------------------------------------------


SMALL = E.SweepSpec(scenarios=("cosi",), penetrations=(0.0, 0.5, 1.0), seeds=(1, 2), durations=(60,))


def test_run_sweep_small():
    res = E.run_sweep(SMALL)
    assert len(res) == 6
    assert [(r.cell.penetration, r.cell.seed) for r in res] == [(p, s) for p in (0.0, 0.5, 1.0) for s in (1, 2)]
    rows = E.aggregate(res)
    assert len(rows) == 3 and rows[0].pct_fuel_benefit == 0.0


def test_run_sweep_worker_count_does_not_matter():
    a = E.run_sweep(SMALL, workers=1)
    b = E.run_sweep(SMALL, workers=2)
    assert E.write_csv(E.raw_rows(a), E.RESULT_COLUMNS) == E.write_csv(E.raw_rows(b), E.RESULT_COLUMNS)


def test_cell_is_reproducible():
    cell = dataclasses.replace(SMALL.cells()[3])
    assert E.run_cell(cell) == E.run_cell(cell)
