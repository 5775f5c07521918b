"""Node-evaluation metrics: fuel, emissions, queues, delays, stops.

The engine streams samples through the same compiled accumulator that
:func:`node_evaluation` replays a recorded :class:`~mixflow.engine.TrajectoryLog`
through, so live and post-hoc evaluation cannot drift apart.

Conventions
-----------
- A sample is one vehicle at the end of one step. Node scope keeps samples
  whose front lies in ``[position - capture, position]`` of an approach link;
  full scope keeps all samples.
- ``vehicle_count`` counts vehicles with at least one in-scope sample.
- Delay is averaged over completed vehicles only (left the region, or left
  the network from inside it). Per sample it adds ``dt`` of actual time and
  ``v*dt / desired_speed`` of theoretical time, so for full scope a vehicle's
  delay is its travel time minus free-flow time at its own desired speed.
- Stopped time counts samples below 0.1 m/s; stop events use hysteresis
  (count below 0.2 m/s, rearm above 1.0 m/s).
- Queue length per approach and step is the longest lane queue; see
  :class:`QueueConfig`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import _kernel as K
from .net import Network

QUANTITIES = ("fuel", "co", "nox", "voc")
STOP_ENTER = 0.2
STOP_REARM = 1.0
FULL_SCOPE_CAPTURE = 250.0

RESULT_COLUMNS = (
    "route", "scope", "duration_s", "penetration_pct", "seed", "veh_count", "total_fuel_gal",
    "fuel_per_veh_gal", "pct_fuel_benefit", "co_g", "nox_g", "voc_g", "avg_queue_m", "max_queue_m",
    "avg_delay_s", "avg_stopped_delay_s", "total_stops",
)


@dataclass(frozen=True)
class FuelEmissionModel:
    """Rate family ``c0 + c1*v + c3*v**3 + c_a*max(a, 0)*v`` per quantity.

    Fuel in US gal/h, emissions in g/h; v in m/s, a in m/s^2.
    """

    fuel: tuple[float, float, float, float] = (0.30, 0.032, 1.8e-5, 0.09)
    co: tuple[float, float, float, float] = (20.0, 1.5, 0.0, 4.0)
    nox: tuple[float, float, float, float] = (2.0, 0.25, 0.0, 0.6)
    voc: tuple[float, float, float, float] = (3.0, 0.3, 0.0, 0.5)

    def __post_init__(self):
        for q in QUANTITIES:
            c = getattr(self, q)
            if len(c) != 4:
                raise ValueError(f"{q}: need (c0, c1, c3, c_a)")
            if c[3] < 0:
                raise ValueError(f"{q}: c_a must be non-negative")
            for v in np.linspace(0.0, 40.0, 81):
                if c[0] + c[1] * v + c[2] * v * v * v < 0:
                    raise ValueError(f"{q}: rate negative at v={v:g} m/s")

    def table(self) -> np.ndarray:
        return np.array([getattr(self, q) for q in QUANTITIES], dtype=np.float64)

    def rate(self, quantity: str, v: float, a: float) -> float:
        return float(K.rate(self.table(), QUANTITIES.index(quantity), float(v), float(a)))

    @classmethod
    def from_dict(cls, d: dict | None) -> "FuelEmissionModel":
        if not d:
            return cls()
        unknown = set(d) - set(QUANTITIES)
        if unknown:
            raise ValueError(f"unknown quantities: {sorted(unknown)}")
        return cls(**{k: tuple(float(x) for x in v) for k, v in d.items()})


@dataclass(frozen=True)
class QueueConfig:
    """Queue condition: a vehicle joins below ``enter`` m/s and leaves above
    ``exit`` m/s; a chain continues while bumper spacing <= ``max_spacing``."""

    enter: float = 1.39
    exit: float = 2.78
    max_spacing: float = 20.0

    def __post_init__(self):
        if not self.exit > self.enter > 0:
            raise ValueError("need exit > enter > 0")
        if self.max_spacing <= 0:
            raise ValueError("max_spacing must be positive")

    def array(self) -> np.ndarray:
        return np.array([self.enter, self.exit, self.max_spacing])

    @classmethod
    def from_dict(cls, d: dict | None) -> "QueueConfig":
        return cls(**(d or {}))


@dataclass(frozen=True)
class NodeEvaluationResult:
    scope: str
    vehicle_count: int
    completed_count: int
    total_fuel_gal: float
    fuel_per_veh_gal: float
    co_g: float
    nox_g: float
    voc_g: float
    co_g_per_veh: float
    nox_g_per_veh: float
    voc_g_per_veh: float
    avg_queue_m: float
    max_queue_m: float
    avg_delay_s: float
    avg_stopped_delay_s: float
    total_stops: int

    def as_dict(self) -> dict:
        return asdict(self)


def per_vehicle(total: float, vehicle_count: int) -> float:
    if vehicle_count < 0:
        raise ValueError("vehicle_count must be >= 0")
    if vehicle_count == 0:
        return 0.0
    return total / vehicle_count


def percent_benefit(base_per_vehicle: float, case_per_vehicle: float) -> float:
    """Relative saving of ``case`` against ``base`` in percent."""
    if not base_per_vehicle > 0:
        raise ValueError("baseline must be positive")
    return 100.0 * (base_per_vehicle - case_per_vehicle) / base_per_vehicle


def queue_summary(series) -> tuple[float, float]:
    """(mean, max) over every step and approach."""
    flat = [float(x) for x in np.asarray(series, dtype=np.float64).ravel()]
    if not flat:
        raise ValueError("empty queue series")
    return math.fsum(flat) / len(flat), max(flat)


# --- scope --------------------------------------------------------------------


def scope_arrays(net: Network, scope: str, model: FuelEmissionModel, qc: QueueConfig, node_id: str | None = None):
    """Kernel-side description of a measurement scope.

    ``node`` uses one evaluation node (the first unless ``node_id`` names
    another); ``full`` covers every sample and queues at every controlled line.
    """
    nl = len(net.links)
    reg_pos = np.full(nl, np.nan)
    reg_cap = np.zeros(nl)
    if scope == "node":
        node = net.eval_node(node_id)
        approaches = [(net.link_index[a.link], a.position, node.capture) for a in node.approaches]
        for li, pos, cap in approaches:
            reg_pos[li] = pos
            reg_cap[li] = cap
        full = False
    elif scope == "full":
        approaches = [
            (net.link_index[link], pos, min(FULL_SCOPE_CAPTURE, pos)) for link, pos in net.stop_lines()
        ]
        full = True
    else:
        raise ValueError(f"scope must be 'node' or 'full', not {scope!r}")
    q_link = np.array([a[0] for a in approaches], dtype=np.int64)
    q_pos = np.array([a[1] for a in approaches], dtype=np.float64)
    q_cap = np.array([a[2] for a in approaches], dtype=np.float64)
    return K.Scope(full, reg_pos, reg_cap, q_link, q_pos, q_cap, model.table(), qc.array())


def new_accumulator(n_vehicles: int, n_steps: int, n_approaches: int):
    z = lambda: np.zeros(n_vehicles, dtype=np.int64)  # noqa: E731
    return K.Acc(
        np.zeros((n_vehicles, 4)), z(), np.zeros(n_vehicles), z(), z(), z(), z(), z(), z(), z(),
        np.zeros((n_steps, n_approaches)),
    )


def result_from_accumulator(acc, dt: float, scope: str) -> NodeEvaluationResult:
    seen = np.flatnonzero(acc.seen)
    count = int(seen.size)
    totals = [math.fsum(acc.qty[seen, q].tolist()) for q in range(4)]
    done = np.flatnonzero(acc.completed & acc.seen)
    delay_each = [float(acc.n_in[i]) * dt - float(acc.theo[i]) for i in done]
    avg_delay = math.fsum(delay_each) / len(delay_each) if delay_each else 0.0
    stopped = int(acc.n_stop[seen].sum()) * dt
    if acc.qseries.size:
        avg_q, max_q = queue_summary(acc.qseries)
    else:
        avg_q, max_q = 0.0, 0.0
    return NodeEvaluationResult(
        scope=scope,
        vehicle_count=count,
        completed_count=int(done.size),
        total_fuel_gal=totals[0],
        fuel_per_veh_gal=per_vehicle(totals[0], count),
        co_g=totals[1],
        nox_g=totals[2],
        voc_g=totals[3],
        co_g_per_veh=per_vehicle(totals[1], count),
        nox_g_per_veh=per_vehicle(totals[2], count),
        voc_g_per_veh=per_vehicle(totals[3], count),
        avg_queue_m=avg_q,
        max_queue_m=max_q,
        avg_delay_s=avg_delay,
        avg_stopped_delay_s=stopped / count if count else 0.0,
        total_stops=int(acc.stops[seen].sum()),
    )


# --- log-based evaluation -------------------------------------------------------


def _replay(log, scope: str, model: FuelEmissionModel, qc: QueueConfig, node_id: str | None = None):
    net = log.net
    sc = scope_arrays(net, scope, model, qc, node_id)
    lanes = np.array([l.lanes for l in net.links], dtype=np.int64)
    cell0 = np.concatenate(([0], np.cumsum(lanes)[:-1])).astype(np.int64)
    limit = np.array([l.speed_limit for l in net.links], dtype=np.float64)
    ncell = int(lanes.sum())
    n_veh = log.n_vehicles
    acc = new_accumulator(n_veh, log.n_steps, sc.q_link.size)
    if log.n_steps == 0:
        return acc
    cell = cell0[log.link] + log.lane
    order = np.lexsort((log.veh, log.offset, cell, log.step))
    step = log.step[order]
    step_start = np.searchsorted(step, np.arange(log.n_steps + 1), side="left").astype(np.int64)
    veh = log.veh[order].astype(np.int64)
    exited = np.flatnonzero(log.exit_step >= 0)
    ex_order = exited[np.argsort(log.exit_step[exited], kind="stable")]
    exit_ids = ex_order.astype(np.int64)
    exit_start = np.searchsorted(log.exit_step[ex_order], np.arange(log.n_steps + 1), side="left").astype(np.int64)
    K.accumulate_log(
        step_start, veh, log.link[order].astype(np.int64), log.lane[order].astype(np.int64),
        log.offset[order].astype(np.float64), log.speed[order].astype(np.float64),
        log.accel[order].astype(np.float64), log.length[veh].astype(np.float64),
        log.speed_factor[veh].astype(np.float64), exit_start, exit_ids,
        cell0, lanes, limit, ncell, sc, float(log.dt), acc,
    )
    return acc


def node_evaluation(
    log,
    scope: str = "node",
    model: FuelEmissionModel | None = None,
    qc: QueueConfig | None = None,
    node_id: str | None = None,
) -> NodeEvaluationResult:
    """Every metric for one recorded run over one scope."""
    acc = _replay(log, scope, model or FuelEmissionModel(), qc or QueueConfig(), node_id)
    return result_from_accumulator(acc, log.dt, scope)


def integrate_quantities(log, model: FuelEmissionModel | None = None, scope: str = "full",
                         node_id: str | None = None) -> dict[str, float]:
    """Totals of fuel (gal) and CO/NOx/VOC (g) over the scope."""
    r = node_evaluation(log, scope, model, None, node_id)
    return {"fuel": r.total_fuel_gal, "co": r.co_g, "nox": r.nox_g, "voc": r.voc_g}


def queue_series(log, node_id: str | None = None, qc: QueueConfig | None = None, scope: str = "node") -> np.ndarray:
    """Queue length (m) per step (rows) and approach (columns)."""
    acc = _replay(log, scope, FuelEmissionModel(), qc or QueueConfig(), node_id)
    return acc.qseries


def delays(log, scope: str = "full", node_id: str | None = None) -> tuple[float, float, int]:
    """(average delay s, average stopped delay s, total stops)."""
    r = node_evaluation(log, scope, None, None, node_id)
    return r.avg_delay_s, r.avg_stopped_delay_s, r.total_stops


def format_value(x) -> str:
    """Shortest round-trip text for floats; plain integers; blank for None."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def result_row(route: str, duration: float, penetration: float, seed: int, r: NodeEvaluationResult,
               pct_fuel_benefit: float | None) -> dict[str, str]:
    vals = {
        "route": route,
        "scope": r.scope,
        "duration_s": format_value(int(round(duration))) if float(duration).is_integer() else format_value(duration),
        "penetration_pct": format_penetration(penetration),
        "seed": str(int(seed)),
        "veh_count": str(r.vehicle_count),
        "total_fuel_gal": format_value(r.total_fuel_gal),
        "fuel_per_veh_gal": format_value(r.fuel_per_veh_gal),
        "pct_fuel_benefit": format_value(pct_fuel_benefit),
        "co_g": format_value(r.co_g),
        "nox_g": format_value(r.nox_g),
        "voc_g": format_value(r.voc_g),
        "avg_queue_m": format_value(r.avg_queue_m),
        "max_queue_m": format_value(r.max_queue_m),
        "avg_delay_s": format_value(r.avg_delay_s),
        "avg_stopped_delay_s": format_value(r.avg_stopped_delay_s),
        "total_stops": str(r.total_stops),
    }
    return vals


def format_penetration(p: float) -> str:
    pct = round(100.0 * p, 6)
    return str(int(pct)) if float(pct).is_integer() else repr(pct)
