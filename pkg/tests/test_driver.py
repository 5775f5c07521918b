import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from mixflow import driver as D
from mixflow.net import load_scenario, bundled_scenarios

H = D.W74Params()
A = D.AvParams()


def veh(gap, speed=0.0):
    return D.PerceivedObject("vehicle", gap, speed)


# --- W74 safety distance --------------------------------------------------------


def test_w74_distance_examples():
    assert D.w74_safety_distance(10.0, D.W74Params(ax=2, bx_add=2, bx_mult=3, z=0.5)) == pytest.approx(
        2 + 3.5 * math.sqrt(10), abs=1e-12)
    assert D.w74_safety_distance(10.0, H) == pytest.approx(13.068, abs=1e-3)
    assert D.w74_safety_distance(0.0, H) == 2.0
    assert D.w74_safety_distance(4.0, D.W74Params(ax=2, bx_add=2, bx_mult=3, z=1.0)) == pytest.approx(12.0)


def test_w74_distance_rejects_negative_speed():
    with pytest.raises(ValueError):
        D.w74_safety_distance(-1.0, H)


def test_param_validation():
    with pytest.raises(ValueError):
        D.W74Params(z=1.5)
    with pytest.raises(ValueError):
        D.AvParams(accel_curve=D.AccelCurve.human_default())
    with pytest.raises(ValueError):
        D.AvParams(b_comf=4.0, b_max=3.5)


# --- following laws ----------------------------------------------------------------


def test_human_free_flow_equilibrium():
    assert D.human_accel(H.desired_speed, (), H) == 0.0


def test_human_following_equilibrium():
    d = D.w74_safety_distance(10.0, H)
    assert D.human_accel(10.0, (veh(d, 10.0),), H) == pytest.approx(0.0, abs=1e-12)


def test_human_following_law_example():
    d = D.w74_safety_distance(10.0, H)
    assert d == pytest.approx(13.068, abs=1e-3)
    assert D.human_accel(10.0, (veh(d, 8.0),), H) == pytest.approx(-1.0, abs=1e-12)


def test_human_too_close_brakes_hard():
    assert D.human_accel(5.0, (veh(1.0, 5.0),), H) == -H.b_max


def test_human_far_leader_is_free():
    assert D.human_accel(10.0, (veh(100.0, 10.0),), H) == D.human_accel(10.0, (), H)


def test_av_equilibrium():
    d = A.desired_gap(12.0)
    assert D.av_accel(12.0, (veh(d, 12.0),), A) == pytest.approx(0.0, abs=1e-12)


def test_av_law_example():
    assert A.desired_gap(10.0) == pytest.approx(7.0)
    assert D.av_accel(10.0, (veh(10.0, 10.0),), A) == pytest.approx(0.69, abs=1e-12)


def test_av_braking_clamped():
    assert A.desired_gap(15.0) == pytest.approx(10.0)
    assert D.av_accel(15.0, (veh(10.0, 10.0),), A) == -3.5


def test_most_constraining_object_wins():
    near, far = veh(8.0, 5.0), veh(30.0, 12.0)
    both = D.av_accel(10.0, (near, far), A)
    assert both == min(D.av_accel(10.0, (near,), A), D.av_accel(10.0, (far,), A))


def test_av_accel_is_pure():
    p = (veh(12.0, 9.0), D.PerceivedObject("signal", 40.0))
    assert D.av_accel(11.0, p, A) == D.av_accel(11.0, p, D.AvParams())


# --- signals and stop signs -----------------------------------------------------------


def test_signal_green_passes():
    assert D.signal_constraint("green", 50.0, 10.0, H) is None


def test_signal_red_is_stationary_object():
    obj = D.signal_constraint("red", 50.0, 10.0, H)
    assert obj == D.PerceivedObject("signal", 50.0, 0.0)
    assert 10.0 ** 2 / (2 * 50.0) == pytest.approx(1.0)


def test_signal_amber_dilemma():
    assert 13.0 ** 2 / (2 * 10.0) == pytest.approx(8.45)
    assert D.signal_constraint("amber", 10.0, 13.0, H) is None
    assert D.signal_constraint("amber", 50.0, 10.0, H) is not None


def test_stop_sign_until_dwell():
    assert D.stop_sign_constraint(30.0, 10.0, 0.0) == D.PerceivedObject("stop_sign", 30.0, 0.0)
    assert D.stop_sign_constraint(0.5, 0.0, 1.2) is None


def test_rolling_stop_is_not_a_stop():
    timer = 0.0
    for _ in range(30):
        timer = D.update_stop_timer(timer, 0.5, 0.5, 0.1)
    assert timer == 0.0
    assert D.stop_sign_constraint(0.5, 0.5, timer) is not None


def test_dwell_accumulates_in_steps():
    timer = 0.0
    for _ in range(10):
        timer = D.update_stop_timer(timer, 1.0, 0.0, 0.1)
    assert D.stop_sign_constraint(1.0, 0.0, timer) is None
    assert D.update_stop_timer(timer, 1.0, 2.0, 0.1) == 0.0


def test_red_signal_stops_vehicle_before_line():
    v, x, line = 13.9, 0.0, 60.0
    for _ in range(400):
        obj = D.signal_constraint("red", max(line - x, 0.0), v, H)
        a = D.human_accel(v, (obj,), H)
        v = max(0.0, v + a * 0.1)
        x += v * 0.1
    assert v == 0.0
    assert line - D.LINE_MARGIN - 1.0 <= x <= line


# --- lane change -----------------------------------------------------------------------


def test_lane_change_no_adjacent_lane():
    assert D.lane_change_decision(10.0, H, D.Neighbor(10.0, 5.0), []).action == "keep"


def test_lane_change_to_empty_faster_lane():
    dec = D.lane_change_decision(10.0, H, D.Neighbor(20.0, 5.0), [D.LaneOption(1)])
    assert dec.action == "change" and dec.target == 1


def test_lane_change_without_advantage_keeps():
    dec = D.lane_change_decision(10.0, H, None, [D.LaneOption(1)])
    assert dec.action == "keep"


def test_lane_change_blocked_by_follower():
    f = D.Neighbor(gap=4.0, speed=14.0, standstill=2.0, b_accept=2.0)
    assert float(D.decel_needed(4.0, 14.0, 10.0, 2.0)) == pytest.approx(4.0)
    dec = D.lane_change_decision(10.0, H, D.Neighbor(20.0, 5.0), [D.LaneOption(1, follower=f)])
    assert dec.action == "keep" and not dec.follower_yields


def test_cooperative_follower_yields():
    f = D.Neighbor(gap=4.0, speed=14.0, kind=D.AV, standstill=1.0, b_accept=3.0, coop=True)
    dec = D.lane_change_decision(10.0, H, D.Neighbor(20.0, 5.0), [D.LaneOption(1, follower=f)])
    assert dec.action == "keep" and dec.follower_yields


def test_route_required_change_without_advantage():
    dec = D.lane_change_decision(10.0, H, None, [D.LaneOption(1)], urgency="route-required",
                                 distance_to_mandatory=100.0)
    assert dec.action == "change"


def test_lane_change_blocked_by_lead():
    ld = D.Neighbor(gap=3.0, speed=10.0)
    dec = D.lane_change_decision(10.0, H, D.Neighbor(20.0, 5.0), [D.LaneOption(1, leader=ld)])
    assert dec.action == "keep" and dec.reason == "lead gap"


def test_urgency_scale_bounds():
    assert float(D.urgency_scale(0.0)) == 0.5
    assert float(D.urgency_scale(1e9)) == 1.0
    assert float(D.urgency_scale(D.LC_URGENCY_ZONE / 2)) == pytest.approx(0.75)


# --- perception -------------------------------------------------------------------------


def test_perceive_empty():
    assert D.perceive([], 10) == ()


@pytest.mark.parametrize("k", [A.perception_count, H.perception_count])
def test_perceive_nearest_k(k):
    cars = [veh(10.0 * (12 - i)) for i in range(12)]
    got = D.perceive(cars, k)
    assert len(got) == k
    assert [o.gap for o in got] == [10.0 * (i + 1) for i in range(k)]


def test_perception_counts():
    assert A.perception_count == 10
    assert H.perception_count == 2


def test_perceive_lookahead():
    assert D.perceive([veh(D.LOOKAHEAD + 1.0)], 10) == ()


# --- invariants ------------------------------------------------------------------------


def test_accel_curve_invariant():
    assert A.accel_curve.deterministic
    h = H.accel_curve
    assert not h.deterministic
    for v in np.linspace(0.0, 40.0, 41):
        lo, med, hi = h(v, 0.0), h(v, 0.5), h(v, 1.0)
        assert lo < med < hi
        assert A.accel_curve(v, 0.0) == A.accel_curve(v, 1.0) == A.accel_curve.median_at(v)


def _max_limit():
    return max(l.speed_limit for name in bundled_scenarios() for l in load_scenario(name).links)


@settings(max_examples=200, deadline=None)
@given(v=st.floats(5.0, 35.0))
def test_equilibrium_gap_ordering(v):
    assert A.desired_gap(v) < D.w74_safety_distance(v, H)


def test_equilibrium_gap_ordering_covers_bundled_limits():
    assert _max_limit() <= 35.0


accels = st.lists(st.floats(-3.5, 2.0), min_size=5, max_size=40)


@settings(max_examples=300, deadline=None)
@given(
    model=st.sampled_from(["human", "av"]),
    v_f=st.floats(0.0, 25.0),
    v_l=st.floats(0.0, 25.0),
    extra=st.floats(0.0, 80.0),
    profile=accels,
    z=st.floats(0.0, 1.0),
    pct=st.floats(0.0, 1.0),
)
def test_collision_freedom(model, v_f, v_l, extra, profile, z, pct):
    dt = 0.1
    if model == "human":
        p = D.W74Params(z=z, accel_curve=D.AccelCurve.human_default(percentile=pct))
        law = D.human_accel
    else:
        p = A
        law = D.av_accel
    gap = p.standstill + extra
    # the start must be recoverable: the follower can still stop behind a leader braking at b_max
    assume(v_f <= float(D.safe_speed(gap, v_l, p.b_max, 3.5, dt)))
    for k in range(400):
        a_f = law(v_f, (D.PerceivedObject("vehicle", gap, v_l, 3.5),), p, dt)
        assert -p.b_max - 1e-12 <= a_f
        a_l = profile[(k // 10) % len(profile)]
        v_l = max(0.0, v_l + a_l * dt)
        v_f = max(0.0, v_f + a_f * dt)
        gap += (v_l - v_f) * dt
        assert gap >= 0.0
        assert v_f >= 0.0
