import numpy as np
import pytest

from helpers import line_doc
from mixflow import _kernel as K
from mixflow.engine import (Arrivals, RandomStream, SimConfig, Simulation, SimulationError, run,
                            spawn_arrivals)
from mixflow.net import load_network, load_scenario


def fixed_arrivals(steps, n_inputs=1):
    steps = np.asarray(steps, dtype=np.int64)
    n = steps.size
    return Arrivals(
        step=steps,
        input=np.zeros(n, dtype=np.int64),
        composition=np.zeros(n),
        params=np.full((n, 3), 0.5),
        routing=np.zeros(n),
    )


# --- arrivals and composition -----------------------------------------------------


@pytest.mark.parametrize("seed", range(1, 6))
def test_poisson_arrival_count(seed):
    net = load_network(line_doc(rate=360.0))
    got = spawn_arrivals(net.flow_inputs[0], (0.0, 500.0), RandomStream(seed), 0.0, net)
    assert 29 <= len(got) <= 74


def test_no_avs_at_zero_penetration():
    net = load_network(line_doc(rate=3600.0))
    got = spawn_arrivals(net.flow_inputs[0], (0.0, 1000.0), RandomStream(3), 0.0, net)
    assert got and all(v.kind == "human" for v in got)


def test_all_avs_at_full_penetration():
    net = load_network(line_doc(rate=3600.0))
    got = spawn_arrivals(net.flow_inputs[0], (0.0, 200.0), RandomStream(3), 1.0, net)
    assert got and all(v.kind == "av" for v in got)


def test_av_share_binomial_interval():
    net = load_network(line_doc(rate=7200.0))
    got = spawn_arrivals(net.flow_inputs[0], (0.0, 6000.0), RandomStream(11), 0.35, net)
    assert len(got) >= 10_000
    share = sum(v.kind == "av" for v in got[:10_000]) / 10_000
    assert 0.3377 <= share <= 0.3623


def test_spawned_vehicle_state():
    net = load_network(line_doc(rate=3600.0))
    got = spawn_arrivals(net.flow_inputs[0], (10.0, 20.0), RandomStream(5), 0.5, net)
    for v in got:
        assert 10.0 <= v.spawn_time < 20.0
        assert v.position is None and v.length == 4.5 and v.path == ("a",)
        if v.kind == "av":
            assert v.params.desired_speed == pytest.approx(13.9)
        else:
            assert 0.85 * 13.9 - 1e-9 <= v.params.desired_speed <= 1.05 * 13.9 + 1e-9


def test_substreams_are_independent():
    a, b = RandomStream(7), RandomStream(7)
    a.composition.random(1000)
    assert np.array_equal(a.arrivals.random(5), b.arrivals.random(5))
    assert not np.array_equal(RandomStream(7).arrivals.random(5), RandomStream(7).routing.random(5))
    with pytest.raises(KeyError):
        a["weather"]


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(duration=500.05)
    with pytest.raises(ValueError):
        SimConfig(penetration=1.2)
    assert SimConfig(duration=500).resolved_scope == "node"
    assert SimConfig(duration=3600).resolved_scope == "full"


# --- stepping -------------------------------------------------------------------------


def test_step_count():
    out = run(SimConfig(duration=500, dt=0.1, seed=1), "cosi")
    assert out.steps == 5000


def test_runs_are_bit_identical():
    cfg = SimConfig(duration=120, penetration=0.5, seed=4)
    a = run(cfg, "route19", record=True)
    b = run(cfg, "route19", record=True)
    assert a.log.equals(b.log)
    assert a.evaluation == b.evaluation
    assert a.log.n_vehicles > 10


def test_free_vehicle_advances_at_desired_speed():
    net = load_network(line_doc(length=2000.0, limit=13.9))
    sim = Simulation(net, SimConfig(duration=20, penetration=1.0, scope="full"), record=True,
                     arrivals=fixed_arrivals([0]))
    log = sim.run().log
    off, v, a = log.offset, log.speed, log.accel
    assert np.all(v == 13.9)
    assert np.all(a == 0.0)
    assert np.allclose(np.diff(off), 13.9 * 0.1, rtol=0, atol=1e-9)


def test_platoon_equilibrium_is_a_fixed_point():
    # v * 10 * dt - length = s0 + t_gap * v  for v = 13.75: the second AV enters at its equilibrium gap
    net = load_network(line_doc(length=3000.0, limit=13.75))
    sim = Simulation(net, SimConfig(duration=60, penetration=1.0, scope="full"), record=True,
                     arrivals=fixed_arrivals([0, 10]))
    log = sim.run().log
    both = [s for s in range(log.n_steps) if np.count_nonzero(log.step == s) == 2]
    gaps = []
    for s in both:
        k = np.flatnonzero(log.step == s)
        lead, fol = k[log.veh[k] == 0][0], k[log.veh[k] == 1][0]
        gaps.append(log.offset[lead] - 4.5 - log.offset[fol])
    assert len(gaps) > 100
    assert gaps[0] == pytest.approx(1.0 + 0.6 * 13.75, abs=1e-9)
    assert np.max(np.abs(np.diff(gaps))) < 1e-9


def test_red_signal_ahead_brakes():
    # green for the first second, then red; at that moment the line is 20 m ahead
    doc = line_doc(length=1000.0, limit=13.9 / 0.95, signal=(33.9, [("green", 1.0), ("red", 100.0)]))
    sim = Simulation(load_network(doc), SimConfig(duration=5, penetration=0.0, scope="full"), record=True,
                     arrivals=fixed_arrivals([0]))
    log = sim.run().log
    assert np.all(log.speed[:10] == pytest.approx(13.9))
    assert 33.9 - log.offset[9] == pytest.approx(20.0)
    assert log.signal_state(10, "sig") == "red"
    assert log.accel[10] < 0.0
    # 13.9**2 / 40 = 4.8 m/s^2 exceeds b_max: the best it can do is brake fully
    assert log.accel[10] == pytest.approx(-3.5)


def test_stop_sign_dwell_then_proceed():
    doc = line_doc(length=600.0, stop=200.0)
    sim = Simulation(load_network(doc), SimConfig(duration=60, scope="full"), record=True,
                     arrivals=fixed_arrivals([0]))
    log = sim.run().log
    near = (np.abs(200.0 - log.offset) <= 2.0) & (log.speed < 0.1)
    assert near.sum() * 0.1 >= 1.0 - 1e-9
    assert log.offset.max() > 300.0


def test_arrival_override_validation():
    net = load_network(line_doc())
    with pytest.raises(ValueError):
        Simulation(net, SimConfig(duration=10, scope="full"), arrivals=fixed_arrivals([200]))


# --- invariants ------------------------------------------------------------------------


def test_conservation_every_step():
    sim = Simulation(load_scenario("us33"), SimConfig(duration=300, penetration=0.35, seed=2))
    seen = 0
    while not sim.done:
        sim.step()
        c = sim.counts()
        assert c["spawned"] == c["present"] + c["exited"] + c["queued"]
        seen = max(seen, c["present"])
    assert seen > 0


def test_gaps_non_negative_every_step():
    out = run(SimConfig(duration=200, penetration=0.65, seed=3), "cosi", record=True)
    log = out.log
    for s in range(log.n_steps):
        k = np.flatnonzero(log.step == s)
        for link in np.unique(log.link[k]):
            for lane in np.unique(log.lane[k][log.link[k] == link]):
                sel = k[(log.link[k] == link) & (log.lane[k] == lane)]
                off = np.sort(log.offset[sel])
                assert np.all(np.diff(off) - 4.5 >= -K.GAP_TOL)


def test_log_invariants():
    out = run(SimConfig(duration=150, penetration=0.5, seed=8), "route15", record=True)
    log = out.log
    assert np.all(log.speed >= 0.0)
    lengths = np.array([l.length for l in log.net.links])
    assert np.all((log.offset >= 0.0) & (log.offset <= lengths[log.link]))
    for vid in np.unique(log.veh):
        st = log.step[log.samples(vid)]
        assert np.all(np.diff(st) == 1)


def test_simulation_error_carries_context():
    err = SimulationError("boom", 12, (3, 4))
    assert err.step == 12 and err.vehicles == (3, 4)


def test_route19_hour_vehicle_count():
    out = run(SimConfig(duration=3600, seed=1), "route19")
    assert 0.75 * 3996 <= out.spawned <= 1.25 * 3996
    assert out.spawned == out.present + out.exited + out.queued


def test_straddler_does_not_hide_closer_leader():
    # a vehicle hanging back from an exit branch used to fill the single leader slot,
    # hiding a closer vehicle on the path; a lane change then overlapped it
    out = run(SimConfig(duration=500, penetration=0.65, seed=8), "cosi")
    assert out.spawned == out.present + out.exited + out.queued
