"""Longitudinal and lateral driver behavior.

Two follower laws share one interface: a Wiedemann-74 style human follower
(safety distance ``ax + (bx_add + bx_mult*z)*sqrt(v)``, three regimes) and a
deterministic constant-time-gap AV follower. Both are layered under a
kinematic safe-speed guard so a follower can always stop behind a leader
that brakes at its own maximum deceleration.

The scalar laws are numba-compiled; the simulation kernel calls them
directly and the dataclass-level API below wraps them for everything else.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np
from numba import njit

# --- kinds, regimes, constants ------------------------------------------------

HUMAN = 0
AV = 1

OBJ_VEHICLE = 0
OBJ_SIGNAL = 1
OBJ_STOP = 2
OBJ_LANE_END = 3
OBJECT_KINDS = ("vehicle", "signal", "stop_sign", "lane_end")

SIG_RED = 0
SIG_GREEN = 1
SIG_AMBER = 2

LOOKAHEAD = 300.0  # m, perception range
LINE_MARGIN = 0.5  # m, vehicles come to rest this far before a stop line
STOP_SPEED = 0.1  # m/s, "stopped" at a stop sign
STOP_RADIUS = 2.0  # m, dwell must happen this close to the line
STOP_DWELL = 1.0  # s
DWELL_EPS = 1e-9  # dwell is accumulated in dt increments; absorb float drift
LC_THRESHOLD = 0.5  # m/s speed advantage that motivates a routine change
LC_ANTICIPATION = 100.0  # m, leaders farther than this do not limit lane speed
LC_URGENCY_ZONE = 250.0  # m before a mandatory point where required gaps shrink
LC_MIN_SCALE = 0.5

KEEP = 0
CHANGE = 1
BLOCKED_LEAD = 2
BLOCKED_FOLLOWER = 3

# column layout of the per-kind parameter table used by the kernel
P_STANDSTILL = 0  # ax (human) / s0 (AV)
P_BXADD = 1
P_BXMULT = 2
P_SDX = 3
P_KSPEED = 4
P_KGAP = 5
P_TGAP = 6
P_BCOMF = 7
P_BMAX = 8
P_BACCEPT = 9
P_PERCEPTION = 10
P_COOP = 11
P_COOLDOWN = 12
P_MODEL = 13
P_SPEED_MEAN = 14
P_SPEED_SPREAD = 15
P_LENGTH = 16
N_PARAMS = 17

_DEFAULT_GRID = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0)
_DEFAULT_MEDIAN = (3.0, 2.8, 2.2, 1.6, 1.2, 0.9, 0.7, 0.5, 0.4)


# --- compiled scalar laws -----------------------------------------------------


@njit(cache=True)
def _interp(v, grid, vals):
    n = grid.shape[0]
    if v <= grid[0]:
        return vals[0]
    if v >= grid[n - 1]:
        return vals[n - 1]
    i = 1
    while grid[i] < v:
        i += 1
    w = (v - grid[i - 1]) / (grid[i] - grid[i - 1])
    return vals[i - 1] + w * (vals[i] - vals[i - 1])


@njit(cache=True)
def curve_value(v, grid, lo, med, hi, pct):
    a_lo = _interp(v, grid, lo)
    a_med = _interp(v, grid, med)
    a_hi = _interp(v, grid, hi)
    if pct <= 0.5:
        return a_lo + (a_med - a_lo) * (2.0 * pct)
    return a_med + (a_hi - a_med) * (2.0 * pct - 1.0)


@njit(cache=True)
def w74_distance(v, ax, bx_total):
    return ax + bx_total * math.sqrt(v)


@njit(cache=True)
def safe_speed(gap, v_lead, b_own, b_lead, dt):
    """Largest next-step speed from which the follower can still stop behind
    a leader that starts braking at ``b_lead`` now (semi-implicit Euler)."""
    lead = v_lead * v_lead / (2.0 * b_lead) - 0.5 * v_lead * dt
    if lead < 0.0:
        lead = 0.0
    rhs = gap + lead - b_own * dt * dt / 8.0
    if rhs <= 0.0:
        return 0.0
    h = 0.5 * dt
    return b_own * (-h + math.sqrt(h * h + 2.0 * rhs / b_own))


@njit(cache=True)
def free_accel(v, v_des, amax, b_comf, dt):
    a = (v_des - v) / dt
    if a > amax:
        a = amax
    if a < -b_comf:
        a = -b_comf
    return a


@njit(cache=True)
def follow_accel(model, v, gap, v_obj, bx_total, p, amax, a_free):
    """Commanded acceleration against one object, before the safety guard."""
    if model == HUMAN:
        d = p[P_STANDSTILL] + bx_total * math.sqrt(v)
        if gap > p[P_SDX] * d:
            return a_free
        if gap < p[P_STANDSTILL]:
            return -p[P_BMAX]
        a = p[P_KSPEED] * (v_obj - v) + p[P_KGAP] * (gap - d)
        lo = -p[P_BCOMF]
    else:
        d = p[P_STANDSTILL] + p[P_TGAP] * v
        a = p[P_KSPEED] * (v_obj - v) + p[P_KGAP] * (gap - d)
        lo = -p[P_BMAX]
    if a > amax:
        a = amax
    if a < lo:
        a = lo
    if a > a_free:
        a = a_free
    return a


@njit(cache=True)
def object_accel(model, v, kind, raw_gap, v_obj, b_obj, bx_total, p, amax, a_free, dt):
    """Law plus guard for one perceived object.

    Line objects (signal, stop sign, lane end) are stationary; the law sees
    them shifted so the vehicle rests LINE_MARGIN before the line, the guard
    sees the raw distance.
    """
    if kind == OBJ_VEHICLE:
        gap = raw_gap
    else:
        gap = raw_gap + p[P_STANDSTILL] - LINE_MARGIN
    a = follow_accel(model, v, gap, v_obj, bx_total, p, amax, a_free)
    vs = safe_speed(raw_gap, v_obj, p[P_BMAX], b_obj, dt)
    ag = (vs - v) / dt
    if ag < a:
        a = ag
    return a


@njit(cache=True)
def finalize_accel(a, v, b_max, dt):
    if a < -b_max:
        a = -b_max
    if v + a * dt < 0.0:
        a = -v / dt
    return a


@njit(cache=True)
def signal_blocks(state, dist, v, b_comf):
    if state == SIG_RED:
        return True
    if state == SIG_GREEN:
        return False
    if dist <= 0.0:
        return v <= 0.0
    return v * v / (2.0 * dist) <= b_comf


@njit(cache=True)
def urgency_scale(dist_to_mandatory):
    f = dist_to_mandatory / LC_URGENCY_ZONE
    if f > 1.0:
        f = 1.0
    if f < 0.0:
        f = 0.0
    return LC_MIN_SCALE + (1.0 - LC_MIN_SCALE) * f


@njit(cache=True)
def decel_needed(gap_f, v_f, v, standstill_f):
    if v_f <= v:
        return 0.0
    room = gap_f - standstill_f
    if room <= 0.0:
        return np.inf
    dv = v_f - v
    return dv * dv / (2.0 * room)


@njit(cache=True)
def lane_change_core(
    v, own_ach, target_ach, mandatory, scale, desired_gap, b_own, dt,
    has_lead, gap_l, v_l, b_l,
    has_fol, gap_f, v_f, standstill_f, b_accept_f, b_max_f,
):
    """Discrete lane-change verdict: KEEP, CHANGE, BLOCKED_LEAD or BLOCKED_FOLLOWER."""
    if not mandatory and target_ach < own_ach + LC_THRESHOLD:
        return KEEP
    if has_lead:
        if gap_l < scale * desired_gap:
            return BLOCKED_LEAD
        if v > safe_speed(gap_l, v_l, b_own, b_l, dt):
            return BLOCKED_LEAD
    if has_fol:
        if gap_f < scale * standstill_f:
            return BLOCKED_FOLLOWER
        if decel_needed(gap_f, v_f, v, scale * standstill_f) > b_accept_f:
            return BLOCKED_FOLLOWER
        if v_f > safe_speed(gap_f, v, b_max_f, b_own, dt):
            return BLOCKED_FOLLOWER
    return CHANGE


@njit(cache=True)
def lane_speed(v_des, has_lead, gap_l, v_l):
    if has_lead and gap_l < LC_ANTICIPATION and v_l < v_des:
        return v_l
    return v_des


# --- parameter objects --------------------------------------------------------


@dataclass(frozen=True)
class AccelCurve:
    """Achievable acceleration by speed: (min, median, max) on a speed grid.

    ``percentile`` picks a driver's curve: 0 -> min, 0.5 -> median, 1 -> max,
    linear in between. Values between grid points interpolate linearly and
    clamp at the ends.
    """

    grid: tuple[float, ...]
    lo: tuple[float, ...]
    median: tuple[float, ...]
    hi: tuple[float, ...]
    percentile: float = 0.5

    def __post_init__(self):
        n = len(self.grid)
        if not (len(self.lo) == len(self.median) == len(self.hi) == n) or n < 2:
            raise ValueError("curve arrays must share the grid length (>= 2)")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("speed grid must be strictly increasing")
        for lo, med, hi in zip(self.lo, self.median, self.hi):
            if not lo <= med <= hi:
                raise ValueError("need min <= median <= max at every grid point")
        if not 0.0 <= self.percentile <= 1.0:
            raise ValueError("percentile must lie in [0, 1]")

    @classmethod
    def human_default(cls, spread: float = 0.3, percentile: float = 0.5) -> "AccelCurve":
        med = _DEFAULT_MEDIAN
        return cls(
            _DEFAULT_GRID,
            tuple(m * (1.0 - spread) for m in med),
            med,
            tuple(m * (1.0 + spread) for m in med),
            percentile,
        )

    @classmethod
    def collapsed(cls, median: Sequence[float] = _DEFAULT_MEDIAN, grid: Sequence[float] = _DEFAULT_GRID):
        med = tuple(float(m) for m in median)
        return cls(tuple(grid), med, med, med, 0.5)

    @property
    def deterministic(self) -> bool:
        return self.lo == self.median == self.hi

    def arrays(self):
        return tuple(np.asarray(x, dtype=np.float64) for x in (self.grid, self.lo, self.median, self.hi))

    def __call__(self, v: float, percentile: float | None = None) -> float:
        g, lo, med, hi = self.arrays()
        return float(curve_value(v, g, lo, med, hi, self.percentile if percentile is None else percentile))

    def median_at(self, v: float) -> float:
        g, _, med, _ = self.arrays()
        return float(_interp(v, g, med))


@dataclass(frozen=True)
class W74Params:
    ax: float = 2.0
    bx_add: float = 2.0
    bx_mult: float = 3.0
    z: float = 0.5
    desired_speed: float = 13.2
    accel_curve: AccelCurve = field(default_factory=AccelCurve.human_default)
    b_comf: float = 3.0
    b_max: float = 3.5
    perception_count: int = 2
    sdx_factor: float = 1.5
    k_speed: float = 0.5
    k_gap: float = 0.25
    b_accept: float = 2.0
    lc_cooldown: float = 3.0

    def __post_init__(self):
        if self.ax <= 0:
            raise ValueError("ax must be positive")
        if self.bx_add < 0 or self.bx_mult < 0:
            raise ValueError("bx_add and bx_mult must be non-negative")
        if not 0.0 <= self.z <= 1.0:
            raise ValueError("z must lie in [0, 1]")
        if not self.b_max >= self.b_comf > 0:
            raise ValueError("need b_max >= b_comf > 0")
        if self.perception_count < 1:
            raise ValueError("perception_count must be >= 1")

    @property
    def bx_total(self) -> float:
        return self.bx_add + self.bx_mult * self.z

    @property
    def standstill(self) -> float:
        return self.ax

    def desired_gap(self, v: float) -> float:
        return w74_safety_distance(v, self)


@dataclass(frozen=True)
class AvParams:
    s0: float = 1.0
    t_gap: float = 0.6
    k_gap: float = 0.23
    k_speed: float = 0.74
    desired_speed: float = 13.9
    accel_curve: AccelCurve = field(default_factory=AccelCurve.collapsed)
    b_comf: float = 3.0
    b_max: float = 3.5
    perception_count: int = 10
    coop_lane_change: bool = True
    b_accept: float = 3.0
    lc_cooldown: float = 1.0

    def __post_init__(self):
        if self.t_gap <= 0 or self.s0 <= 0:
            raise ValueError("t_gap and s0 must be positive")
        if not self.accel_curve.deterministic:
            raise ValueError("AV acceleration curve must have min = median = max")
        if not self.b_max >= self.b_comf > 0:
            raise ValueError("need b_max >= b_comf > 0")
        if self.perception_count < 1:
            raise ValueError("perception_count must be >= 1")

    @property
    def standstill(self) -> float:
        return self.s0

    def desired_gap(self, v: float) -> float:
        return self.s0 + self.t_gap * v


def _param_row(p: W74Params | AvParams, speed_mean: float, speed_spread: float, length: float) -> np.ndarray:
    row = np.zeros(N_PARAMS)
    if isinstance(p, W74Params):
        row[P_STANDSTILL] = p.ax
        row[P_BXADD] = p.bx_add
        row[P_BXMULT] = p.bx_mult
        row[P_SDX] = p.sdx_factor
        row[P_MODEL] = HUMAN
        row[P_COOP] = 0.0
    else:
        row[P_STANDSTILL] = p.s0
        row[P_TGAP] = p.t_gap
        row[P_MODEL] = AV
        row[P_COOP] = 1.0 if p.coop_lane_change else 0.0
    row[P_KSPEED] = p.k_speed
    row[P_KGAP] = p.k_gap
    row[P_BCOMF] = p.b_comf
    row[P_BMAX] = p.b_max
    row[P_BACCEPT] = p.b_accept
    row[P_PERCEPTION] = p.perception_count
    row[P_COOLDOWN] = p.lc_cooldown
    row[P_SPEED_MEAN] = speed_mean
    row[P_SPEED_SPREAD] = speed_spread
    row[P_LENGTH] = length
    return row


@dataclass(frozen=True)
class Population:
    """Fleet-level driver templates.

    Per-driver draws (z, acceleration percentile, desired-speed factor) happen
    at spawn; everything else comes from these templates. Human desired speed
    is ``speed_mean * limit`` spread uniformly by +-``speed_spread`` (relative);
    AVs drive at the limit.
    """

    human: W74Params = field(default_factory=W74Params)
    av: AvParams = field(default_factory=AvParams)
    human_speed_mean: float = 0.95
    human_speed_spread: float = 0.10
    av_speed_factor: float = 1.0
    vehicle_length: float = 4.5

    def table(self) -> np.ndarray:
        out = np.zeros((2, N_PARAMS))
        out[HUMAN] = _param_row(self.human, self.human_speed_mean, self.human_speed_spread, self.vehicle_length)
        out[AV] = _param_row(self.av, self.av_speed_factor, 0.0, self.vehicle_length)
        return out

    def curves(self) -> tuple[np.ndarray, np.ndarray]:
        h, a = self.human.accel_curve, self.av.accel_curve
        if h.grid != a.grid:
            raise ValueError("human and AV acceleration curves must share one speed grid")
        grid = np.asarray(h.grid, dtype=np.float64)
        curves = np.zeros((2, 3, grid.size))
        for kind, c in ((HUMAN, h), (AV, a)):
            curves[kind, 0] = c.lo
            curves[kind, 1] = c.median
            curves[kind, 2] = c.hi
        return grid, curves

    @classmethod
    def from_overrides(cls, overrides: dict | None) -> "Population":
        """Defaults updated from a ``{"human": {...}, "av": {...}, ...}`` mapping."""
        pop = cls()
        if not overrides:
            return pop
        known = {f.name for f in fields(cls)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown population keys: {sorted(unknown)}")
        kw = {}
        for key, value in overrides.items():
            if key == "human":
                kw[key] = _override(pop.human, value)
            elif key == "av":
                kw[key] = _override(pop.av, value)
            else:
                kw[key] = float(value)
        return replace(pop, **kw)


def _override(params, values: dict):
    values = dict(values)
    curve = values.pop("accel_curve", None)
    if curve is not None:
        values["accel_curve"] = AccelCurve(
            tuple(curve["grid"]), tuple(curve["lo"]), tuple(curve["median"]), tuple(curve["hi"])
        )
    return replace(params, **values)


# --- perception ---------------------------------------------------------------


@dataclass(frozen=True)
class PerceivedObject:
    kind: str
    gap: float  # front bumper to rear bumper, or to the line
    speed: float = 0.0
    b_max: float = 3.5

    @property
    def kind_code(self) -> int:
        return OBJECT_KINDS.index(self.kind)


Perception = tuple  # ordered tuple of PerceivedObject, nearest first


def perceive(candidates: Iterable[PerceivedObject], k: int, lookahead: float = LOOKAHEAD) -> Perception:
    """The nearest ``k`` constraining objects within ``lookahead``, ordered by gap.

    Objects at an identical gap collapse into the slower one so gaps are
    strictly increasing.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ahead = sorted((o for o in candidates if o.gap <= lookahead), key=lambda o: (o.gap, o.speed))
    out: list[PerceivedObject] = []
    for obj in ahead:
        if out and obj.gap == out[-1].gap:
            continue
        out.append(obj)
        if len(out) == k:
            break
    return tuple(out)


# --- dataclass-level API --------------------------------------------------------


def w74_safety_distance(v: float, p: W74Params) -> float:
    if v < 0:
        raise ValueError("speed must be non-negative")
    return float(w74_distance(v, p.ax, p.bx_total))


def _accel(model: int, v: float, perception: Perception, p, dt: float, pct: float, bx_total: float) -> float:
    pop = Population(human=p if model == HUMAN else W74Params(), av=p if model == AV else AvParams())
    row = pop.table()[model]
    curve = p.accel_curve
    amax = curve(v, pct)
    a_free = float(free_accel(v, p.desired_speed, amax, p.b_comf, dt))
    a = a_free
    for obj in perception:
        a = min(a, float(object_accel(model, v, obj.kind_code, obj.gap, obj.speed, obj.b_max, bx_total, row, amax, a_free, dt)))
    return float(finalize_accel(a, v, p.b_max, dt))


def human_accel(v: float, perception: Perception, p: W74Params, dt: float = 0.1) -> float:
    """Acceleration of a human driver against its perceived objects.

    Free driving toward ``desired_speed`` on the driver's acceleration curve;
    following law ``0.5*(v_o - v) + 0.25*(g - d)`` clamped to
    ``[-b_comf, curve]`` when ``ax <= g <= 1.5*d``; ``-b_max`` when ``g < ax``.
    The most constraining object wins.
    """
    return _accel(HUMAN, v, perception, p, dt, p.accel_curve.percentile, p.bx_total)


def av_accel(v: float, perception: Perception, p: AvParams, dt: float = 0.1) -> float:
    """Deterministic AV acceleration: ``k_speed*(v_o - v) + k_gap*(g - s0 - t_gap*v)``
    clamped to ``[-b_max, median curve]``."""
    return _accel(AV, v, perception, p, dt, 0.5, 0.0)


def signal_constraint(state: str, distance: float, v: float, p) -> PerceivedObject | None:
    """Virtual stationary object at a stop line, or None when the vehicle may pass."""
    if distance < 0:
        raise ValueError("distance must be non-negative")
    code = {"red": SIG_RED, "green": SIG_GREEN, "amber": SIG_AMBER}[state]
    if signal_blocks(code, distance, v, p.b_comf):
        return PerceivedObject("signal", distance, 0.0)
    return None


def stop_sign_constraint(distance: float, v: float, stop_timer: float) -> PerceivedObject | None:
    """Stationary object at a stop sign until the vehicle has dwelt there.

    ``stop_timer`` is the time already spent below STOP_SPEED within
    STOP_RADIUS of the line.
    """
    if distance < 0:
        raise ValueError("distance must be non-negative")
    if stop_timer >= STOP_DWELL - DWELL_EPS:
        return None
    return PerceivedObject("stop_sign", distance, 0.0)


def update_stop_timer(timer: float, distance: float, v: float, dt: float) -> float:
    """Advance the dwell timer one step; it resets whenever the vehicle is not stopped at the line."""
    if v < STOP_SPEED and 0.0 <= distance <= STOP_RADIUS:
        return timer + dt
    return 0.0


@dataclass(frozen=True)
class Neighbor:
    gap: float
    speed: float
    kind: int = HUMAN
    standstill: float = 2.0
    b_accept: float = 2.0
    b_max: float = 3.5
    coop: bool = False


@dataclass(frozen=True)
class LaneOption:
    lane: int
    leader: Neighbor | None = None
    follower: Neighbor | None = None


@dataclass(frozen=True)
class LaneDecision:
    action: str  # "keep" | "change"
    target: int | None = None
    follower_yields: bool = False
    reason: str = ""


def lane_change_decision(
    v: float,
    p: W74Params | AvParams,
    own_leader: Neighbor | None,
    options: Sequence[LaneOption],
    urgency: str = "routine",
    distance_to_mandatory: float = math.inf,
    dt: float = 0.1,
) -> LaneDecision:
    """Gap-acceptance lane choice over the adjacent lanes in ``options``.

    A change needs motivation (the target lane's achievable speed beats the
    own lane by LC_THRESHOLD, or ``urgency == "route-required"``) and safety
    (lead gap at least the own desired gap, follower braking need within its
    ``b_accept``, both kinematically safe). Route-required changes shrink the
    required gaps linearly to half as the mandatory point approaches. When
    only the follower blocks and it is a cooperative AV, it yields.
    """
    if not options:
        return LaneDecision("keep", reason="no adjacent lane")
    mandatory = urgency == "route-required"
    scale = float(urgency_scale(distance_to_mandatory)) if mandatory else 1.0
    own_ach = float(lane_speed(p.desired_speed, own_leader is not None,
                               own_leader.gap if own_leader else 0.0, own_leader.speed if own_leader else 0.0))

    def ach(opt: LaneOption) -> float:
        ld = opt.leader
        return float(lane_speed(p.desired_speed, ld is not None, ld.gap if ld else 0.0, ld.speed if ld else 0.0))

    best = max(options, key=lambda o: (ach(o), -o.lane))
    ld, fl = best.leader, best.follower
    verdict = lane_change_core(
        v, own_ach, ach(best), mandatory, scale, p.desired_gap(v), p.b_max, dt,
        ld is not None, ld.gap if ld else 0.0, ld.speed if ld else 0.0, ld.b_max if ld else 3.5,
        fl is not None, fl.gap if fl else 0.0, fl.speed if fl else 0.0,
        fl.standstill if fl else 0.0, fl.b_accept if fl else 0.0, fl.b_max if fl else 3.5,
    )
    if verdict == CHANGE:
        return LaneDecision("change", best.lane, reason="accepted")
    if verdict == BLOCKED_FOLLOWER:
        return LaneDecision("keep", reason="follower gap", follower_yields=bool(fl.coop))
    if verdict == BLOCKED_LEAD:
        return LaneDecision("keep", reason="lead gap")
    return LaneDecision("keep", reason="no advantage")
