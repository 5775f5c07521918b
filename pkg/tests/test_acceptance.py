"""Acceptance checks, one test per criterion; each records a PASS/FAIL line shown in the summary.

Criteria 2-6 read the default sweeps cached by tools/acceptance_sweeps.py and
run them first if the cache is empty (about 40 minutes on one core).
"""
import json
import os
import time

import numpy as np
import pytest

from conftest import record
from helpers import line_doc, oracle_evaluation, oracle_net, random_log
from mixflow import osm_ingest as O
from mixflow.engine import RandomStream, SimConfig, run, spawn_arrivals
from mixflow.experiment import read_aggregate, read_raw_samples, welch
from mixflow.metrics import node_evaluation, per_vehicle, percent_benefit
from mixflow.net import load_network
from tools.acceptance_sweeps import sweep_dir
from test_osm import FIXTURE, fixture_hand_length

# Published results: (label, vehicle count, total fuel gal, fuel per vehicle gal, % fuel economy)
PUBLISHED = {
    "route19 500s node": [
        ("No AV", 162, 1.85383, 0.01144, 0.000), ("20% AV", 165, 1.85720, 0.01129, 1.279),
        ("35% AV", 166, 1.88086, 0.01133, 0.928), ("50% AV", 168, 1.86087, 0.01108, 3.186),
        ("65% AV", 170, 1.86702, 0.01102, 3.692), ("80% AV", 172, 1.79269, 0.01045, 8.644),
        ("100% AV", 175, 1.70830, 0.00977, 14.628)],
    "route19 3600s full": [
        ("No AV", 3996, 372.55360, 0.09321, 0.000), ("20% AV", 4196, 362.30330, 0.08631, 7.408),
        ("35% AV", 4317, 360.47950, 0.08348, 10.437), ("50% AV", 4466, 369.35350, 0.08270, 11.279),
        ("65% AV", 4665, 387.17020, 0.08300, 10.957), ("80% AV", 4930, 381.16070, 0.07731, 17.059),
        ("100% AV", 5027, 358.17840, 0.07124, 23.578)],
    "route15 500s node": [
        ("No AV", 84, 1.00240, 0.01190, 0.000), ("20% AV", 86, 1.00240, 0.01166, 1.962),
        ("35% AV", 87, 1.03420, 0.01183, 0.527), ("50% AV", 89, 1.05790, 0.01182, 0.642),
        ("65% AV", 91, 1.07430, 0.01182, 0.670), ("80% AV", 94, 1.09340, 0.01167, 1.915),
        ("100% AV", 97, 1.12040, 0.01151, 3.232)],
    "route15 3600s full": [
        ("No AV", 1438, 83.08310, 0.05776, 0.000), ("20% AV", 1440, 82.35840, 0.05735, 0.720),
        ("35% AV", 1443, 82.25670, 0.05700, 1.328), ("50% AV", 1444, 81.79750, 0.05666, 1.917),
        ("65% AV", 1445, 80.94580, 0.05602, 3.024), ("80% AV", 1445, 79.44190, 0.05496, 4.846),
        ("100% AV", 1449, 76.63170, 0.05287, 8.464)],
    "us33 500s node": [
        ("No AV", 177, 3.54600, 0.02007, 0.000), ("20% AV", 197, 3.58380, 0.01817, 9.490),
        ("35% AV", 198, 3.61810, 0.01824, 9.123), ("50% AV", 201, 3.58130, 0.01785, 11.044),
        ("65% AV", 204, 3.57040, 0.01754, 12.591), ("80% AV", 208, 3.65840, 0.01761, 12.242),
        ("100% AV", 215, 3.71840, 0.01731, 13.769)],
    "us33 3600s full": [
        ("No AV", 2176, 517.21540, 0.23776, 0.000), ("20% AV", 2350, 554.28280, 0.23587, 0.795),
        ("35% AV", 2378, 557.18610, 0.23435, 1.433), ("50% AV", 2408, 560.21790, 0.23269, 2.132),
        ("65% AV", 2437, 563.76760, 0.23140, 2.675), ("80% AV", 2476, 571.53420, 0.23088, 2.896),
        ("100% AV", 2551, 571.19560, 0.22400, 5.787)],
    "cosi 500s node": [
        ("No AV", 132, 1.2904, 0.009776, 0.000), ("20% AV", 135, 1.2675, 0.009389, 3.957),
        ("35% AV", 136, 1.2714, 0.009349, 4.370), ("50% AV", 137, 1.25463, 0.009158, 6.320),
        ("65% AV", 139, 1.2792, 0.009203, 5.860), ("80% AV", 138, 1.24722, 0.009038, 7.549),
        ("100% AV", 140, 1.27023, 0.009073, 7.188)],
    "cosi 3600s full": [
        ("No AV", 2410, 84.74760, 0.03515, 0.000), ("20% AV", 2422, 82.55580, 0.03409, 3.009),
        ("35% AV", 2432, 80.33030, 0.03303, 6.027), ("50% AV", 2436, 79.99210, 0.03283, 6.595),
        ("65% AV", 2440, 79.77000, 0.03269, 7.001), ("80% AV", 2444, 80.27640, 0.03285, 6.557),
        ("100% AV", 2450, 81.36700, 0.03321, 5.521)],
}
PV_TOL = 5e-5  # agreement to 4 decimal places
PCT_TOL = 0.15

SCENARIOS = ("route19", "route15", "us33", "cosi")


# --- 1: formula fidelity ----------------------------------------------------------------------


def formula_mismatches():
    pv_bad, pct_bad = [], []
    for block, rows in PUBLISHED.items():
        base = per_vehicle(rows[0][2], rows[0][1])
        for label, n, total, pv, pct in rows:
            got = per_vehicle(total, n)
            if abs(got - pv) >= PV_TOL:
                pv_bad.append(f"{block} {label} {got:.6f}!={pv}")
            if abs(percent_benefit(base, got) - pct) > PCT_TOL:
                pct_bad.append(f"{block} {label} {percent_benefit(base, got):.3f}!={pct}")
    return pv_bad, pct_bad


def test_per_vehicle_is_plain_division():
    for rows in PUBLISHED.values():
        for _, n, total, _, _ in rows:
            assert per_vehicle(total, n) == total / n


def test_benefit_column_from_printed_per_vehicle():
    # the published percent column follows from the published per-vehicle column
    for rows in PUBLISHED.values():
        base = rows[0][3]
        for _, _, _, pv, pct in rows:
            assert abs(percent_benefit(base, pv) - pct) <= PCT_TOL


@pytest.mark.xfail(strict=True, reason="published per-vehicle column is not total/count in 7 rows; see README")
def test_criterion_1_formula_fidelity():
    t0 = time.perf_counter()
    pv_bad, pct_bad = formula_mismatches()
    elapsed = time.perf_counter() - t0
    n = sum(len(r) for r in PUBLISHED.values())
    ok = not pv_bad and not pct_bad and elapsed < 1.0
    record(1, ok, f"{n} rows: per-vehicle off in {len(pv_bad)}, % benefit off in {len(pct_bad)}, {elapsed:.3f}s"
           + (f"; per-vehicle: {'; '.join(pv_bad)}" if pv_bad else ""))
    assert ok, (pv_bad, pct_bad)


# --- 2-5: sweeps ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweeps():
    return {s: sweep_dir(s) for s in SCENARIOS}


@pytest.mark.slow
def test_criterion_2_protocol(sweeps):
    counts = {}
    for s, d in sweeps.items():
        raw = (d / "results.csv").read_text().splitlines()[1:]
        agg = read_aggregate((d / "aggregate.csv").read_text())
        counts[s] = (len(raw), len(agg), json.loads((d / "sweep_meta.json").read_text())["runs"])
    ok = all(c == (140, 14, 140) for c in counts.values())
    record(2, ok, " ".join(f"{s}: {r} runs/{a} rows" for s, (r, a, _) in counts.items()))
    assert ok, counts


@pytest.mark.slow
def test_criterion_3_determinism(sweeps):
    one, eight = sweeps["route15"], sweep_dir("route15", 8)
    same = {name: (one / name).read_bytes() == (eight / name).read_bytes()
            for name in ("results.csv", "aggregate.csv")}
    ok = all(same.values())
    record(3, ok, "route15 workers 1 vs 8: " + ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}"
                                                         for k, v in same.items()))
    assert ok


@pytest.mark.slow
def test_criterion_4_safety(sweeps):
    # the kernel checks gaps and conservation every step and aborts the run on a violation,
    # so a complete sweep means no violation occurred
    runs = sum(json.loads((d / "sweep_meta.json").read_text())["runs"] for d in sweeps.values())
    ok = runs == 4 * 140
    record(4, ok, f"{runs} runs over {len(sweeps)} scenarios completed with per-step invariant checks")
    assert ok


@pytest.mark.slow
def test_criterion_5_trends(sweeps):
    s19 = read_raw_samples((sweeps["route19"] / "results.csv").read_text())
    lo, hi = s19[("route19", 500.0, "node", 0.0)], s19[("route19", 500.0, "node", 1.0)]
    m = {k: (np.mean(lo[k]), np.mean(hi[k])) for k in ("fuel_per_veh", "veh_count", "avg_queue_m",
                                                       "avg_stopped_delay_s")}
    p = welch(lo["fuel_per_veh"], hi["fuel_per_veh"])
    s15 = read_raw_samples((sweeps["route15"] / "results.csv").read_text())
    f0 = np.mean(s15[("route15", 3600.0, "full", 0.0)]["fuel_per_veh"])
    f1 = np.mean(s15[("route15", 3600.0, "full", 1.0)]["fuel_per_veh"])
    checks = {
        "fuel lower": m["fuel_per_veh"][1] < m["fuel_per_veh"][0] and p is not None and p < 0.05,
        "throughput not lower": m["veh_count"][1] >= m["veh_count"][0],
        "queue not higher": m["avg_queue_m"][1] <= m["avg_queue_m"][0],
        "stopped delay not higher": m["avg_stopped_delay_s"][1] <= m["avg_stopped_delay_s"][0],
        "route15 full fuel lower": f1 < f0,
    }
    ok = all(checks.values())
    detail = (f"route19 node fuel {m['fuel_per_veh'][0]:.5f}->{m['fuel_per_veh'][1]:.5f} (p={p:.2g}), "
              f"veh {m['veh_count'][0]:.1f}->{m['veh_count'][1]:.1f}, "
              f"queue {m['avg_queue_m'][0]:.2f}->{m['avg_queue_m'][1]:.2f} m, "
              f"stopped {m['avg_stopped_delay_s'][0]:.2f}->{m['avg_stopped_delay_s'][1]:.2f} s; "
              f"route15 full fuel {f0:.5f}->{f1:.5f}")
    failed = [k for k, v in checks.items() if not v]
    record(5, ok, detail + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, failed


# --- 6: performance ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_performance():
    run(SimConfig(duration=10, seed=1), "route19")  # compile outside the timing
    t0 = time.perf_counter()
    out = run(SimConfig(duration=3600, penetration=0.35, seed=1), "route19")
    single = time.perf_counter() - t0
    d = sweep_dir("route15", 8)
    meta = json.loads((d / "sweep_meta.json").read_text())
    sweep = meta["elapsed_s"]
    ok = single < 120.0 and sweep < 1800.0
    record(6, ok, f"route19 3600 s run: {single:.1f}s for {out.spawned} vehicles; route15 140-run sweep with "
                  f"{meta['workers']} workers: {sweep / 60:.1f} min on {os.cpu_count()} core(s)")
    assert ok


# --- 7-9 --------------------------------------------------------------------------------------


def test_criterion_7_oracle_equivalence():
    net = oracle_net()
    bad = []
    for seed in range(1000):
        log = random_log(np.random.default_rng(seed), net)
        if node_evaluation(log, "node") != oracle_evaluation(log, "node"):
            bad.append(seed)
    record(7, not bad, f"1000 random logs, {len(bad)} differ from the brute-force recomputation")
    assert not bad


def test_criterion_8_composition():
    net = load_network(line_doc(rate=7200.0))
    got = spawn_arrivals(net.flow_inputs[0], (0.0, 6000.0), RandomStream(11), 0.35, net)[:10_000]
    share = sum(v.kind == "av" for v in got) / len(got)
    ok = len(got) == 10_000 and 0.3377 <= share <= 0.3623
    record(8, ok, f"AV share {share:.4f} over {len(got)} spawns, interval [0.3377, 0.3623]")
    assert ok


def test_criterion_9_ingest():
    net = O.build_network(O.parse_osm(FIXTURE), O.IngestDefaults(), [100, 101])
    hand = fixture_hand_length()
    got = net.route_length("main")
    rel = abs(got - hand) / hand
    ok = rel < 1e-3 and len(net.signal_controllers) == 1 and len(net.stop_signs) == 1
    record(9, ok, f"length {got:.2f} m vs {hand:.2f} m (rel {rel:.1e}); signals {len(net.signal_controllers)}/1, "
                  f"stop signs {len(net.stop_signs)}/1")
    assert ok
