"""Deterministic fixed-step simulation of a mixed human/AV fleet.

A run is a pure function of (scenario, :class:`SimConfig`). All randomness is
drawn up front from four independent substreams of the master seed:

- ``arrivals``: Poisson counts per step and input
- ``composition``: one uniform per arrival, AV iff below the penetration
- ``driver_params``: three uniforms per arrival (z, acceleration percentile,
  desired-speed factor), drawn for every arrival regardless of its kind
- ``routing``: one uniform per arrival choosing its path through diverges

Arrival ``k`` therefore meets the same conditions at every penetration rate,
and raising the penetration only converts humans into AVs.

Step phases: signals, arrivals and entry insertion, decisions against the
frozen snapshot, lane changes in ascending id, kinematics, link transitions,
stop-sign dwell and removal, invariant checks and metric accumulation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import _kernel as K
from .driver import (
    AV,
    HUMAN,
    SIG_AMBER,
    SIG_GREEN,
    SIG_RED,
    AvParams,
    Population,
    W74Params,
)
from .metrics import (
    FuelEmissionModel,
    NodeEvaluationResult,
    QueueConfig,
    new_accumulator,
    result_from_accumulator,
    scope_arrays,
)
from .net import FlowInput, Network, ScenarioError, load_scenario

SUBSTREAMS = ("arrivals", "composition", "driver_params", "routing")
KIND_NAMES = ("human", "av")
_STATE_CODES = {"red": SIG_RED, "green": SIG_GREEN, "amber": SIG_AMBER}
_STATE_NAMES = {v: k for k, v in _STATE_CODES.items()}
TRAJECTORY_HEADER = ("t", "veh_id", "kind", "link", "offset_m", "speed_mps", "accel_mps2")


class SimulationError(RuntimeError):
    """A run violated a hard invariant; carries the step and vehicle ids."""

    def __init__(self, message: str, step: int, vehicles: tuple[int, ...] = ()):
        super().__init__(message)
        self.step = step
        self.vehicles = vehicles


@dataclass(frozen=True)
class SimConfig:
    duration: float = 500.0
    penetration: float = 0.0
    seed: int = 1
    dt: float = 0.1
    scope: str | None = None  # None: node for runs up to 500 s, full otherwise
    node: str | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        n = round(self.duration / self.dt)
        if abs(n * self.dt - self.duration) > 1e-9 * max(1.0, self.duration):
            raise ValueError("duration must be a whole number of steps")
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must lie in [0, 1]")
        if self.scope not in (None, "node", "full"):
            raise ValueError("scope must be 'node' or 'full'")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def resolved_scope(self) -> str:
        if self.scope is not None:
            return self.scope
        return "node" if self.duration <= 500.0 else "full"


class RandomStream:
    """Named, independent generators derived from one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(SUBSTREAMS))
        for name, child in zip(SUBSTREAMS, children):
            setattr(self, name, np.random.Generator(np.random.PCG64(child)))

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in SUBSTREAMS:
            raise KeyError(name)
        return getattr(self, name)


@dataclass(frozen=True)
class Arrivals:
    """Every arrival of a run, in (step, input) order."""

    step: np.ndarray
    input: np.ndarray
    composition: np.ndarray
    params: np.ndarray  # (n, 3): z, percentile, speed draw
    routing: np.ndarray

    def __len__(self) -> int:
        return int(self.step.size)


def draw_arrivals(rates: Sequence[float], n_steps: int, dt: float, streams: RandomStream) -> Arrivals:
    lam = np.asarray(rates, dtype=np.float64) * dt / 3600.0
    if np.any(lam < 0):
        raise ValueError("rates must be non-negative")
    counts = streams.arrivals.poisson(lam, size=(n_steps, lam.size))
    flat = counts.ravel()
    idx = np.repeat(np.arange(flat.size), flat)
    n = int(flat.sum())
    return Arrivals(
        step=(idx // max(lam.size, 1)).astype(np.int64),
        input=(idx % max(lam.size, 1)).astype(np.int64),
        composition=streams.composition.random(n),
        params=streams.driver_params.random((n, 3)),
        routing=streams.routing.random(n),
    )


@dataclass
class VehicleState:
    id: int
    kind: str
    params: W74Params | AvParams
    position: tuple[str, int, float] | None
    v: float
    a: float
    route: str
    path: tuple[str, ...]
    spawn_time: float
    stop_timer: float = 0.0
    length: float = 4.5
    distance: float = 0.0
    speed_factor: float = 1.0


# --- compiled network -----------------------------------------------------------


@dataclass
class CompiledNetwork:
    net: Network
    population: Population
    arrays: K.Net
    paths: list[tuple[str, ...]]
    input_paths: list[tuple[int, np.ndarray]]  # (first path index, cumulative probabilities)
    input_factor: np.ndarray  # (n_inputs, 2): mean and half-width of the human speed factor
    line_ids: list[str]


def compile_network(net: Network, population: Population | None = None, dt: float = 0.1) -> CompiledNetwork:
    """Flatten a Network into kernel arrays and check engine-level restrictions.

    Each (link, lane) may be entered from at most one lane and may connect to
    a given link through at most one lane; merges of lanes are modelled as a
    lane ending next to a through lane.
    """
    pop = population or Population()
    links = net.links
    li = net.link_index
    lanes = np.array([l.lanes for l in links], dtype=np.int64)
    cell0 = np.concatenate(([0], np.cumsum(lanes)[:-1])).astype(np.int64)
    ncell = int(lanes.sum())
    cell_link = np.repeat(np.arange(len(links)), lanes).astype(np.int64)
    cell_lane = (np.arange(ncell) - cell0[cell_link]).astype(np.int64)
    conn = np.full((ncell, len(links)), -1, dtype=np.int64)
    pred = np.full(ncell, -1, dtype=np.int64)
    succ: list[list[int]] = [[] for _ in range(ncell)]
    for c in net.connectors:
        fc = cell0[li[c.from_link]] + c.from_lane
        tc = cell0[li[c.to_link]] + c.to_lane
        if conn[fc, li[c.to_link]] >= 0:
            raise ScenarioError(f"lane {c.from_link}:{c.from_lane} connects to {c.to_link!r} twice")
        if pred[tc] >= 0:
            raise ScenarioError(f"lane {c.to_link}:{c.to_lane} is entered from two lanes (lane merges are unsupported)")
        conn[fc, li[c.to_link]] = c.to_lane
        pred[tc] = fc
        succ[fc].append(tc)
    succ_start = np.zeros(ncell + 1, dtype=np.int64)
    succ_start[1:] = np.cumsum([len(s) for s in succ])
    succ_cells = np.array([x for s in succ for x in s], dtype=np.int64)

    # control lines, sorted by (link, position)
    lines = []
    sig_index = {s.id: k for k, s in enumerate(net.signal_controllers)}
    for s in net.signal_controllers:
        lines.append((li[s.link], s.position, K.LINE_SIGNAL, -1 if s.lane is None else s.lane, sig_index[s.id], s.id))
    for s in net.stop_signs:
        lines.append((li[s.link], s.position, K.LINE_STOP, -1 if s.lane is None else s.lane, -1, s.id))
    lines.sort(key=lambda x: (x[0], x[1], x[2], x[5]))
    line_start = np.zeros(len(links) + 1, dtype=np.int64)
    for x in lines:
        line_start[x[0] + 1] += 1
    line_start = np.cumsum(line_start).astype(np.int64)
    sigs = net.signal_controllers
    ph_start = np.zeros(len(sigs) + 1, dtype=np.int64)
    ph_start[1:] = np.cumsum([len(s.program) for s in sigs])

    # concrete paths per input
    paths: list[tuple[str, ...]] = []
    input_paths = []
    for f in net.flow_inputs:
        options = net.paths(f.route, f.link)
        first = len(paths)
        probs = []
        for links_seq, p in options:
            paths.append(links_seq)
            probs.append(p)
        cum = np.cumsum(probs)
        cum[-1] = 1.0
        input_paths.append((first, cum))
    maxlen = max((len(p) for p in paths), default=1)
    path_links = np.full((max(len(paths), 1), maxlen), -1, dtype=np.int64)
    for k, p in enumerate(paths):
        path_links[k, : len(p)] = [li[x] for x in p]
    path_n = np.array([len(p) for p in paths] or [0], dtype=np.int64)

    factors = np.zeros((len(net.flow_inputs), 2))
    for k, f in enumerate(net.flow_inputs):
        limit = net.link(f.link).speed_limit
        if f.desired_speed is None:
            factors[k] = (pop.human_speed_mean, pop.human_speed_mean * pop.human_speed_spread)
        else:
            factors[k] = (f.desired_speed[0] / limit, f.desired_speed[1] / limit)

    grid, curves = pop.curves()
    arrays = K.Net(
        link_len=np.array([l.length for l in links], dtype=np.float64),
        link_limit=np.array([l.speed_limit for l in links], dtype=np.float64),
        link_lanes=lanes,
        link_cell0=cell0,
        cell_link=cell_link,
        cell_lane=cell_lane,
        conn=conn,
        pred_cell=pred,
        succ_start=succ_start,
        succ_cells=succ_cells,
        line_start=line_start,
        line_pos=np.array([x[1] for x in lines], dtype=np.float64),
        line_lane=np.array([x[3] for x in lines], dtype=np.int64),
        line_kind=np.array([x[2] for x in lines], dtype=np.int64),
        line_sig=np.array([x[4] for x in lines], dtype=np.int64),
        sig_offset=np.array([s.offset for s in sigs], dtype=np.float64),
        sig_cycle=np.array([s.cycle for s in sigs], dtype=np.float64),
        ph_start=ph_start,
        ph_state=np.array([_STATE_CODES[st] for s in sigs for st, _ in s.program], dtype=np.int64),
        ph_dur=np.array([d for s in sigs for _, d in s.program], dtype=np.float64),
        path_links=path_links,
        path_n=path_n,
        input_link=np.array([li[f.link] for f in net.flow_inputs], dtype=np.int64),
        input_lane=np.array([-1 if f.lane is None else f.lane for f in net.flow_inputs], dtype=np.int64),
        par=pop.table(),
        grid=grid,
        curves=curves,
        dt=float(dt),
    )
    return CompiledNetwork(net, pop, arrays, paths, input_paths, factors, [x[5] for x in lines])


def vehicle_table(cn: CompiledNetwork, arr: Arrivals, penetration: float):
    """Per-arrival kind, gap parameter, percentile, speed factor and path."""
    pop = cn.population
    n = len(arr)
    kind = np.where(arr.composition < penetration, AV, HUMAN).astype(np.int64)
    z, pct, us = arr.params[:, 0], arr.params[:, 1], arr.params[:, 2]
    human = kind == HUMAN
    bxt = np.where(human, pop.human.bx_add + pop.human.bx_mult * z, 0.0)
    pct = np.where(human, pct, 0.5)
    fmean = cn.input_factor[arr.input, 0] if n else np.zeros(0)
    fhw = cn.input_factor[arr.input, 1] if n else np.zeros(0)
    fac = np.where(human, fmean + fhw * (2.0 * us - 1.0), pop.av_speed_factor)
    path = np.zeros(n, dtype=np.int64)
    for k, (first, cum) in enumerate(cn.input_paths):
        sel = arr.input == k
        choice = np.searchsorted(cum, arr.routing[sel], side="right")
        path[sel] = first + np.minimum(choice, cum.size - 1)
    return kind, bxt, pct, fac, path


def _vehicle_state(cn: CompiledNetwork, i: int, F: np.ndarray, I: np.ndarray, dt: float) -> VehicleState:
    pop = cn.population
    kind = int(I[i, K.I_KIND])
    path = cn.paths[I[i, K.I_PATH]]
    entry = cn.net.link(path[0])
    if kind == AV:
        params = pop.av.__class__(**{**pop.av.__dict__, "desired_speed": F[i, K.F_FAC] * entry.speed_limit})
    else:
        z = 0.0 if pop.human.bx_mult == 0 else (F[i, K.F_BXT] - pop.human.bx_add) / pop.human.bx_mult
        curve = pop.human.accel_curve.__class__(
            pop.human.accel_curve.grid, pop.human.accel_curve.lo, pop.human.accel_curve.median,
            pop.human.accel_curve.hi, float(F[i, K.F_PCT]),
        )
        params = pop.human.__class__(
            **{**pop.human.__dict__, "z": float(min(max(z, 0.0), 1.0)), "accel_curve": curve,
               "desired_speed": F[i, K.F_FAC] * entry.speed_limit}
        )
    status = I[i, K.I_STATUS]
    pos = None
    if status == K.PRESENT:
        pos = (cn.net.links[I[i, K.I_LINK]].id, int(I[i, K.I_LANE]), float(F[i, K.F_OFF]))
    route = next(f.route for k, f in enumerate(cn.net.flow_inputs) if k == I[i, K.I_INPUT])
    return VehicleState(
        id=int(i),
        kind=KIND_NAMES[kind],
        params=params,
        position=pos,
        v=float(F[i, K.F_V]),
        a=float(F[i, K.F_A]),
        route=route,
        path=path,
        spawn_time=float(I[i, K.I_ARRIVE]) * dt,
        stop_timer=float(F[i, K.F_STOPT]),
        length=float(F[i, K.F_LEN]),
        distance=float(F[i, K.F_DIST]),
        speed_factor=float(F[i, K.F_FAC]),
    )


def spawn_arrivals(
    flow_input: FlowInput,
    window: tuple[float, float],
    streams: RandomStream,
    penetration: float,
    net: Network,
    dt: float = 0.1,
    population: Population | None = None,
) -> list[VehicleState]:
    """New vehicles arriving at one input during ``window`` (not yet inserted).

    Counts are Poisson with mean ``rate*dt/3600`` per step; each arrival is an
    AV with probability ``penetration``.
    """
    t0, t1 = window
    n_steps = int(round((t1 - t0) / dt))
    if n_steps < 0:
        raise ValueError("window end precedes start")
    sub = Network(
        name=net.name, links=net.links, connectors=net.connectors, signal_controllers=net.signal_controllers,
        stop_signs=net.stop_signs, flow_inputs=(flow_input,), routes=net.routes, eval_nodes=net.eval_nodes,
        meta=net.meta,
    )
    cn = compile_network(sub, population, dt)
    arr = draw_arrivals([flow_input.rate], n_steps, dt, streams)
    kind, bxt, pct, fac, path = vehicle_table(cn, arr, penetration)
    n = len(arr)
    F = np.zeros((n, K.NF))
    I = np.zeros((n, K.NI), dtype=np.int64)
    F[:, K.F_BXT], F[:, K.F_PCT], F[:, K.F_FAC] = bxt, pct, fac
    F[:, K.F_LEN] = cn.population.vehicle_length
    I[:, K.I_KIND], I[:, K.I_PATH] = kind, path
    I[:, K.I_ARRIVE] = arr.step + int(round(t0 / dt))
    I[:, K.I_STATUS] = K.PENDING
    return [_vehicle_state(cn, i, F, I, dt) for i in range(n)]


# --- trajectory log ---------------------------------------------------------------


@dataclass
class TrajectoryLog:
    """Columnar record of a run: one sample per present vehicle per step.

    Sample ``step`` s describes the state at the end of step s, time
    ``(s + 1) * dt``. Per-vehicle arrays are indexed by vehicle id;
    ``exit_step`` is the step a vehicle left the network (-1 if never).
    """

    net: Network
    dt: float
    n_steps: int
    step: np.ndarray
    veh: np.ndarray
    link: np.ndarray
    lane: np.ndarray
    offset: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    kind: np.ndarray
    length: np.ndarray
    speed_factor: np.ndarray
    arrive_step: np.ndarray
    enter_step: np.ndarray
    exit_step: np.ndarray
    signal_states: np.ndarray  # (n_steps, n_signals) state codes

    @property
    def n_vehicles(self) -> int:
        return int(self.kind.size)

    @property
    def t(self) -> np.ndarray:
        return (self.step + 1) * self.dt

    def samples(self, veh_id: int) -> np.ndarray:
        return np.flatnonzero(self.veh == veh_id)

    def signal_state(self, step: int, signal_id: str) -> str:
        k = [s.id for s in self.net.signal_controllers].index(signal_id)
        return _STATE_NAMES[int(self.signal_states[step, k])]

    def equals(self, other: "TrajectoryLog") -> bool:
        names = ("step", "veh", "link", "lane", "offset", "speed", "accel", "kind", "length", "speed_factor",
                 "arrive_step", "enter_step", "exit_step", "signal_states")
        return self.n_steps == other.n_steps and self.dt == other.dt and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in names
        )

    def rows(self) -> Iterator[tuple]:
        link_ids = [l.id for l in self.net.links]
        for k in range(self.step.size):
            yield (
                repr(round(float((self.step[k] + 1) * self.dt), 10)),
                str(int(self.veh[k])),
                KIND_NAMES[int(self.kind[self.veh[k]])],
                link_ids[int(self.link[k])],
                repr(float(self.offset[k])),
                repr(float(self.speed[k])),
                repr(float(self.accel[k])),
            )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_HEADER)
            w.writerows(self.rows())


@dataclass
class RunOutput:
    config: SimConfig
    scope: str
    evaluation: NodeEvaluationResult
    steps: int
    spawned: int
    inserted: int
    exited: int
    present: int
    queued: int
    lane_changes: int
    wall_stops: int
    log: TrajectoryLog | None = None


class Simulation:
    """One replication. ``step()`` advances one step; ``run()`` runs to the horizon.

    With ``record=True`` every step is logged into a :class:`TrajectoryLog`
    (memory grows with vehicles x steps; meant for short runs and tests).
    ``arrivals`` replaces the Poisson draw with a fixed arrival table.
    """

    def __init__(
        self,
        net: Network,
        config: SimConfig,
        population: Population | None = None,
        fuel_model: FuelEmissionModel | None = None,
        queue: QueueConfig | None = None,
        record: bool = False,
        arrivals: Arrivals | None = None,
    ):
        params = dict(net.meta.get("parameters") or {})
        self.net = net
        self.config = config
        self.population = population or Population.from_overrides(params.get("drivers"))
        self.fuel_model = fuel_model or FuelEmissionModel.from_dict(params.get("fuel_model"))
        self.queue = queue or QueueConfig.from_dict(params.get("queue"))
        self.scope = config.resolved_scope
        self.cn = compile_network(net, self.population, config.dt)
        self.streams = RandomStream(config.seed)
        rates = [f.rate for f in net.flow_inputs]
        if arrivals is None:
            arrivals = draw_arrivals(rates, config.n_steps, config.dt, self.streams)
        elif len(arrivals) and (np.any(np.diff(arrivals.step) < 0) or arrivals.step.max() >= config.n_steps
                                or arrivals.input.min() < 0 or arrivals.input.max() >= len(rates)):
            raise ValueError("arrivals must be sorted by step, within the horizon and name existing inputs")
        self.arrivals = arrivals
        kind, bxt, pct, fac, path = vehicle_table(self.cn, self.arrivals, config.penetration)
        n = len(self.arrivals)
        F = np.zeros((n, K.NF))
        I = np.zeros((n, K.NI), dtype=np.int64)
        F[:, K.F_BXT], F[:, K.F_PCT], F[:, K.F_FAC] = bxt, pct, fac
        F[:, K.F_LEN] = self.population.vehicle_length
        I[:, K.I_KIND], I[:, K.I_PATH], I[:, K.I_INPUT] = kind, path, self.arrivals.input
        I[:, K.I_ARRIVE] = self.arrivals.step
        I[:, K.I_STATUS] = K.PENDING
        I[:, K.I_CLEARED] = -1
        I[:, K.I_ENTER] = -1
        I[:, K.I_EXIT] = -1
        n_inputs = len(net.flow_inputs)
        by_input = np.argsort(self.arrivals.input, kind="stable").astype(np.int64)
        in_start = np.zeros(n_inputs + 1, dtype=np.int64)
        in_start[1:] = np.cumsum(np.bincount(self.arrivals.input, minlength=n_inputs))
        ncell = self.cn.arrays.cell_link.size
        self.fleet = K.Fleet(
            F=F, I=I,
            present=np.zeros(n, dtype=np.int64),
            order=np.zeros(n, dtype=np.int64),
            rank=np.zeros(n, dtype=np.int64),
            cell_start=np.zeros(ncell + 1, dtype=np.int64),
            sig_state=np.zeros(len(net.signal_controllers), dtype=np.int64),
            in_start=in_start,
            in_ids=by_input,
            in_head=in_start[:-1].copy(),
            arrive_ptr=in_start[:-1].copy(),
            a_new=np.zeros(n),
            target=np.full(n, -1, dtype=np.int64),
            yield_now=np.zeros(n, dtype=np.int64),
            yield_next=np.zeros(n, dtype=np.int64),
            blocked=np.full(ncell, -1, dtype=np.int64),
            ok=np.zeros(64, dtype=np.int64),
            og=np.zeros(64),
            ov=np.zeros(64),
            ob=np.zeros(64),
            oi=np.zeros(64, dtype=np.int64),
            exited=np.zeros(n, dtype=np.int64),
            ctr=np.zeros(K.N_COUNTERS, dtype=np.int64),
            c_link=np.zeros(n, dtype=np.int64),
            c_lane=np.zeros(n, dtype=np.int64),
            c_off=np.zeros(n),
            c_v=np.zeros(n),
            c_a=np.zeros(n),
            c_len=np.zeros(n),
            c_fac=np.zeros(n),
        )
        if int(self.population.table()[:, 10].max()) > 64:
            raise ValueError("perception_count above 64 is not supported")
        self.scope_arrays = scope_arrays(net, self.scope, self.fuel_model, self.queue, config.node)
        self.acc = new_accumulator(n, config.n_steps, self.scope_arrays.q_link.size)
        self.step_index = 0
        self.record = record
        self._chunks: list[tuple[np.ndarray, ...]] = []
        self._signals = np.zeros((config.n_steps, len(net.signal_controllers)), dtype=np.int64)

    # -- stepping --

    @property
    def t(self) -> float:
        return self.step_index * self.config.dt

    @property
    def done(self) -> bool:
        return self.step_index >= self.config.n_steps

    def _advance(self, s1: int) -> None:
        ok = K.run_steps(self.cn.arrays, self.fleet, self.scope_arrays, self.acc, self.step_index, s1)
        if not ok:
            ctr = self.fleet.ctr
            step = int(ctr[K.C_ERR_STEP])
            ids = tuple(int(x) for x in (ctr[K.C_ERR_A], ctr[K.C_ERR_B]) if x >= 0)
            if ctr[K.C_ERROR] == K.ERR_GAP:
                msg = f"negative gap at step {step}: vehicle {ids[0]} overlaps its leader {ids[1:] or '?'}"
            else:
                msg = f"vehicle conservation violated at step {step}"
            raise SimulationError(msg, step, ids)
        self.step_index = s1

    def step(self) -> None:
        if self.done:
            raise RuntimeError("simulation already reached its horizon")
        s = self.step_index
        self._advance(s + 1)
        self._signals[s] = self.fleet.sig_state
        if self.record:
            fl = self.fleet
            n = int(fl.ctr[K.C_PRESENT])
            ids = fl.present[:n].copy()
            self._chunks.append((
                np.full(n, s, dtype=np.int64), ids,
                fl.I[ids, K.I_LINK].copy(), fl.I[ids, K.I_LANE].copy(),
                fl.F[ids, K.F_OFF].copy(), fl.F[ids, K.F_V].copy(), fl.F[ids, K.F_A].copy(),
            ))

    def run(self) -> RunOutput:
        if self.record:
            while not self.done:
                self.step()
        else:
            self._advance(self.config.n_steps)
        return self.output()

    # -- inspection --

    def vehicles(self, include_pending: bool = False) -> list[VehicleState]:
        fl = self.fleet
        n = int(fl.ctr[K.C_PRESENT])
        ids = sorted(int(i) for i in fl.present[:n])
        if include_pending:
            ids = sorted(set(ids) | set(np.flatnonzero(fl.I[:, K.I_STATUS] == K.PENDING).tolist()))
        return [_vehicle_state(self.cn, i, fl.F, fl.I, self.config.dt) for i in ids]

    def counts(self) -> dict[str, int]:
        ctr = self.fleet.ctr
        queued = int((self.fleet.arrive_ptr - self.fleet.in_head).sum())
        return {
            "spawned": int(ctr[K.C_ARRIVED]),
            "present": int(ctr[K.C_PRESENT]),
            "exited": int(ctr[K.C_EXITED]),
            "queued": queued,
            "inserted": int(ctr[K.C_INSERTED]),
        }

    def evaluation(self) -> NodeEvaluationResult:
        return result_from_accumulator(self.acc, self.config.dt, self.scope)

    @property
    def log(self) -> TrajectoryLog:
        if not self.record:
            raise RuntimeError("simulation was not recording")
        cols = list(zip(*self._chunks)) if self._chunks else [()] * 7
        cat = lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dtype=dt)  # noqa: E731
        fl = self.fleet
        exit_step = fl.I[:, K.I_EXIT].copy()
        exit_step[exit_step >= self.step_index] = -1
        return TrajectoryLog(
            net=self.net,
            dt=self.config.dt,
            n_steps=self.step_index,
            step=cat(cols[0], np.int64),
            veh=cat(cols[1], np.int64),
            link=cat(cols[2], np.int64),
            lane=cat(cols[3], np.int64),
            offset=cat(cols[4], np.float64),
            speed=cat(cols[5], np.float64),
            accel=cat(cols[6], np.float64),
            kind=fl.I[:, K.I_KIND].copy(),
            length=fl.F[:, K.F_LEN].copy(),
            speed_factor=fl.F[:, K.F_FAC].copy(),
            arrive_step=fl.I[:, K.I_ARRIVE].copy(),
            enter_step=fl.I[:, K.I_ENTER].copy(),
            exit_step=exit_step,
            signal_states=self._signals[: self.step_index].copy(),
        )

    def output(self) -> RunOutput:
        c = self.counts()
        return RunOutput(
            config=self.config,
            scope=self.scope,
            evaluation=self.evaluation(),
            steps=self.step_index,
            spawned=c["spawned"],
            inserted=c["inserted"],
            exited=c["exited"],
            present=c["present"],
            queued=c["queued"],
            lane_changes=int(self.fleet.ctr[K.C_CHANGES]),
            wall_stops=int(self.fleet.ctr[K.C_WALL]),
            log=self.log if self.record else None,
        )


def run(config: SimConfig, scenario: Network | str = "route19", record: bool = False, **kwargs) -> RunOutput:
    """One replication of ``scenario`` (a Network or a bundled scenario name)."""
    net = scenario if isinstance(scenario, Network) else load_scenario(scenario)
    return Simulation(net, config, record=record, **kwargs).run()
