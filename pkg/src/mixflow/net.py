"""Road network model and scenario file format.

A scenario is one JSON document describing a directed link/lane graph plus
its control (fixed-time signals, stop signs), demand (flow inputs), routes
and measurement regions (evaluation nodes). Positions are 1-D arc length
along a link; vehicles never leave the lane graph.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema

__all__ = [
    "EXITED",
    "Approach",
    "Connector",
    "Diverge",
    "EvalNode",
    "FlowInput",
    "GeometryViolation",
    "Link",
    "Network",
    "ReferenceViolation",
    "Route",
    "ScenarioError",
    "SchemaViolation",
    "SignalController",
    "StopSign",
    "advance_position",
    "bundled_scenarios",
    "dumps",
    "load_network",
    "load_scenario",
    "scenario_path",
    "serialize",
    "theoretical_travel_time",
]

SIGNAL_STATES = ("red", "green", "amber")
# fixed-time program used when no timing is known (90 s cycle)
DEFAULT_SIGNAL_PROGRAM = (("green", 45.0), ("amber", 3.0), ("red", 42.0))
PROBABILITY_TOL = 1e-9


class ScenarioError(ValueError):
    """Base class for scenario documents that cannot be turned into a Network."""


class SchemaViolation(ScenarioError):
    pass


class ReferenceViolation(ScenarioError):
    pass


class GeometryViolation(ScenarioError):
    pass


class _Exited:
    def __repr__(self):
        return "EXITED"


#: returned by :func:`advance_position` when the route end is passed
EXITED = _Exited()


@dataclass(frozen=True)
class Link:
    id: str
    length: float
    lanes: int
    speed_limit: float
    kind: str = "urban"
    geometry: tuple[tuple[float, float], ...] = ()


@dataclass(frozen=True)
class Connector:
    from_link: str
    from_lane: int
    to_link: str
    to_lane: int


@dataclass(frozen=True)
class SignalController:
    """Fixed-time signal head at a stop line.

    ``lane`` of None means the head controls every lane of the link.
    """

    id: str
    link: str
    position: float
    program: tuple[tuple[str, float], ...]
    lane: int | None = None
    offset: float = 0.0
    assumed: bool = False

    @property
    def cycle(self) -> float:
        return float(sum(d for _, d in self.program))

    def state_at(self, t: float) -> str:
        tau = (t - self.offset) % self.cycle
        for state, duration in self.program:
            if tau < duration:
                return state
            tau -= duration
        return self.program[-1][0]


@dataclass(frozen=True)
class StopSign:
    id: str
    link: str
    position: float
    lane: int | None = None


@dataclass(frozen=True)
class FlowInput:
    id: str
    link: str
    rate: float
    route: str
    lane: int | None = None
    # (mean, half-width) in m/s, relative to the entry link; None -> driver defaults
    desired_speed: tuple[float, float] | None = None


@dataclass(frozen=True)
class Diverge:
    at: str
    options: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class Route:
    id: str
    links: tuple[str, ...]
    diverges: tuple[Diverge, ...] = ()


@dataclass(frozen=True)
class Approach:
    link: str
    position: float


@dataclass(frozen=True)
class EvalNode:
    id: str
    approaches: tuple[Approach, ...]
    capture: float


@dataclass(frozen=True)
class Network:
    name: str
    links: tuple[Link, ...]
    connectors: tuple[Connector, ...] = ()
    signal_controllers: tuple[SignalController, ...] = ()
    stop_signs: tuple[StopSign, ...] = ()
    flow_inputs: tuple[FlowInput, ...] = ()
    routes: tuple[Route, ...] = ()
    eval_nodes: tuple[EvalNode, ...] = ()
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @cached_property
    def link_index(self) -> dict[str, int]:
        return {link.id: i for i, link in enumerate(self.links)}

    def link(self, link_id: str) -> Link:
        return self.links[self.link_index[link_id]]

    def route(self, route_id: str) -> Route:
        for r in self.routes:
            if r.id == route_id:
                return r
        raise KeyError(route_id)

    def eval_node(self, node_id: str | None = None) -> EvalNode:
        if not self.eval_nodes:
            raise KeyError("scenario has no evaluation nodes")
        if node_id is None:
            return self.eval_nodes[0]
        for node in self.eval_nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    @cached_property
    def _connector_map(self) -> dict[tuple[str, int], list[tuple[str, int]]]:
        out: dict[tuple[str, int], list[tuple[str, int]]] = {}
        for c in self.connectors:
            out.setdefault((c.from_link, c.from_lane), []).append((c.to_link, c.to_lane))
        return out

    def next_lane(self, link_id: str, lane: int, to_link: str) -> int | None:
        """Lane reached on ``to_link`` from (link_id, lane), or None if not connected."""
        for target, to_lane in self._connector_map.get((link_id, lane), ()):
            if target == to_link:
                return to_lane
        return None

    def connected(self, from_link: str, to_link: str) -> bool:
        return any(c.from_link == from_link and c.to_link == to_link for c in self.connectors)

    def route_length(self, route_id: str) -> float:
        return sum(self.link(l).length for l in self.route(route_id).links)

    def paths(self, route_id: str, entry_link: str) -> list[tuple[tuple[str, ...], float]]:
        """All concrete link sequences a vehicle entering at ``entry_link`` can take.

        Branch links that leave the route chain are terminal. Probabilities
        multiply along diverges and sum to 1 over the returned list.
        """
        route = self.route(route_id)
        start = route.links.index(entry_link)
        diverges = {d.at: d for d in route.diverges}
        out: list[tuple[tuple[str, ...], float]] = []

        def expand(idx: int, prefix: tuple[str, ...], prob: float) -> None:
            link_id = route.links[idx]
            prefix = prefix + (link_id,)
            succ = route.links[idx + 1] if idx + 1 < len(route.links) else None
            div = diverges.get(link_id)
            if div is None:
                if succ is None:
                    out.append((prefix, prob))
                else:
                    expand(idx + 1, prefix, prob)
                return
            for nxt, p in div.options:
                if p == 0.0:
                    continue
                if nxt == succ:
                    expand(idx + 1, prefix, prob * p)
                else:
                    out.append((prefix + (nxt,), prob * p))

        expand(start, (), 1.0)
        return out

    def stop_lines(self) -> list[tuple[str, float]]:
        """Every controlled line (signal heads and stop signs), deduplicated, in file order."""
        seen: dict[tuple[str, float], None] = {}
        for s in self.signal_controllers:
            seen.setdefault((s.link, s.position), None)
        for s in self.stop_signs:
            seen.setdefault((s.link, s.position), None)
        return list(seen)


# ---------------------------------------------------------------------------
# loading / serialization


def _schema() -> dict:
    text = resources.files("mixflow").joinpath("data/scenario.schema.json").read_text("utf-8")
    return json.loads(text)


def _unique(kind: str, ids: Iterable[str]) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise SchemaViolation(f"duplicate {kind} id {i!r}")
        seen.add(i)


def load_network(document: str | bytes | dict) -> Network:
    """Parse and validate a scenario document.

    Raises SchemaViolation, ReferenceViolation or GeometryViolation naming the
    offending entity.
    """
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"not valid JSON: {exc}") from exc
    else:
        doc = document
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaViolation(f"{where}: {exc.message}") from None

    links = tuple(
        Link(
            id=l["id"],
            length=float(l["length"]),
            lanes=int(l["lanes"]),
            speed_limit=float(l["speed_limit"]),
            kind=l["kind"],
            geometry=tuple((float(x), float(y)) for x, y in l.get("geometry", ())),
        )
        for l in doc["links"]
    )
    _unique("link", (l.id for l in links))
    by_id = {l.id: l for l in links}

    def need_link(link_id: str, owner: str) -> Link:
        if link_id not in by_id:
            raise ReferenceViolation(f"{owner} references unknown link {link_id!r}")
        return by_id[link_id]

    def need_lane(link: Link, lane: int | None, owner: str) -> None:
        if lane is not None and lane >= link.lanes:
            raise ReferenceViolation(f"{owner} references lane {lane} of link {link.id!r} ({link.lanes} lanes)")

    def need_position(link: Link, pos: float, owner: str) -> None:
        if not 0.0 <= pos <= link.length:
            raise GeometryViolation(f"{owner} at {pos} m lies beyond link {link.id!r} ({link.length} m)")

    connectors = []
    for c in doc["connectors"]:
        (fl, fln), (tl, tln) = c["from"], c["to"]
        name = f"connector {fl}:{fln}->{tl}:{tln}"
        need_lane(need_link(fl, name), fln, name)
        need_lane(need_link(tl, name), tln, name)
        connectors.append(Connector(fl, int(fln), tl, int(tln)))
    conn_pairs = {(c.from_link, c.to_link) for c in connectors}

    signals = []
    for s in doc["signals"]:
        name = f"signal {s['id']!r}"
        link = need_link(s["link"], name)
        need_lane(link, s.get("lane"), name)
        need_position(link, float(s["position"]), name)
        program = tuple((state, float(d)) for state, d in s["program"])
        signals.append(
            SignalController(
                id=s["id"],
                link=s["link"],
                position=float(s["position"]),
                program=program,
                lane=s.get("lane"),
                offset=float(s.get("offset", 0.0)),
                assumed=bool(s.get("assumed", False)),
            )
        )
    _unique("signal", (s.id for s in signals))

    stops = []
    for s in doc["stop_signs"]:
        name = f"stop sign {s['id']!r}"
        link = need_link(s["link"], name)
        need_lane(link, s.get("lane"), name)
        need_position(link, float(s["position"]), name)
        stops.append(StopSign(id=s["id"], link=s["link"], position=float(s["position"]), lane=s.get("lane")))
    _unique("stop sign", (s.id for s in stops))

    routes = []
    for r in doc["routes"]:
        name = f"route {r['id']!r}"
        chain = tuple(r["links"])
        for l in chain:
            need_link(l, name)
        for a, b in zip(chain, chain[1:]):
            if (a, b) not in conn_pairs:
                raise ReferenceViolation(f"{name}: no connector joins {a!r} to {b!r}")
        diverges = []
        for d in r.get("diverges", ()):
            if d["at"] not in chain:
                raise ReferenceViolation(f"{name}: diverge at {d['at']!r} is not on the route")
            total = 0.0
            options = []
            for opt in d["options"]:
                need_link(opt["next"], name)
                if (d["at"], opt["next"]) not in conn_pairs:
                    raise ReferenceViolation(f"{name}: no connector joins {d['at']!r} to {opt['next']!r}")
                total += float(opt["p"])
                options.append((opt["next"], float(opt["p"])))
            if abs(total - 1.0) > PROBABILITY_TOL:
                raise SchemaViolation(f"{name}: turn probabilities at {d['at']!r} sum to {total}")
            diverges.append(Diverge(at=d["at"], options=tuple(options)))
        routes.append(Route(id=r["id"], links=chain, diverges=tuple(diverges)))
    _unique("route", (r.id for r in routes))

    inputs = []
    for f in doc["inputs"]:
        name = f"input {f['id']!r}"
        link = need_link(f["link"], name)
        need_lane(link, f.get("lane"), name)
        route_id = f.get("route")
        if route_id is None:
            owners = [r.id for r in routes if f["link"] in r.links]
            if len(owners) != 1:
                raise ReferenceViolation(f"{name}: link {f['link']!r} lies on {len(owners)} routes; name one")
            route_id = owners[0]
        matching = [r for r in routes if r.id == route_id]
        if not matching:
            raise ReferenceViolation(f"{name} references unknown route {route_id!r}")
        if f["link"] not in matching[0].links:
            raise ReferenceViolation(f"{name}: link {f['link']!r} is not on route {route_id!r}")
        ds = f.get("desired_speed")
        inputs.append(
            FlowInput(
                id=f["id"],
                link=f["link"],
                rate=float(f["rate"]),
                route=route_id,
                lane=f.get("lane"),
                desired_speed=None if ds is None else (float(ds[0]), float(ds[1])),
            )
        )
    _unique("input", (f.id for f in inputs))

    nodes = []
    for n in doc["eval_nodes"]:
        name = f"eval node {n['id']!r}"
        approaches = []
        for a in n["approaches"]:
            link = need_link(a["link"], name)
            need_position(link, float(a["position"]), name)
            if float(n["capture"]) > link.length:
                raise GeometryViolation(f"{name}: capture {n['capture']} m exceeds link {link.id!r} ({link.length} m)")
            approaches.append(Approach(link=a["link"], position=float(a["position"])))
        if len({a.link for a in approaches}) != len(approaches):
            raise SchemaViolation(f"{name}: at most one approach per link")
        nodes.append(EvalNode(id=n["id"], approaches=tuple(approaches), capture=float(n["capture"])))
    _unique("eval node", (n.id for n in nodes))

    return Network(
        name=doc["meta"]["name"],
        links=links,
        connectors=tuple(connectors),
        signal_controllers=tuple(signals),
        stop_signs=tuple(stops),
        flow_inputs=tuple(inputs),
        routes=tuple(routes),
        eval_nodes=tuple(nodes),
        meta=dict(doc["meta"]),
    )


def serialize(net: Network) -> dict:
    """Canonical scenario document for ``net`` (fixed key order, every field present)."""
    meta = dict(net.meta)
    meta["name"] = net.name
    links = []
    for l in net.links:
        entry = {"id": l.id, "length": l.length, "lanes": l.lanes, "speed_limit": l.speed_limit, "kind": l.kind}
        if l.geometry:
            entry["geometry"] = [list(p) for p in l.geometry]
        links.append(entry)
    return {
        "meta": meta,
        "links": links,
        "connectors": [{"from": [c.from_link, c.from_lane], "to": [c.to_link, c.to_lane]} for c in net.connectors],
        "signals": [
            {
                "id": s.id,
                "link": s.link,
                "lane": s.lane,
                "position": s.position,
                "offset": s.offset,
                "program": [[state, d] for state, d in s.program],
                "assumed": s.assumed,
            }
            for s in net.signal_controllers
        ],
        "stop_signs": [{"id": s.id, "link": s.link, "lane": s.lane, "position": s.position} for s in net.stop_signs],
        "inputs": [
            {
                "id": f.id,
                "link": f.link,
                "route": f.route,
                "lane": f.lane,
                "rate": f.rate,
                **({} if f.desired_speed is None else {"desired_speed": list(f.desired_speed)}),
            }
            for f in net.flow_inputs
        ],
        "routes": [
            {
                "id": r.id,
                "links": list(r.links),
                "diverges": [
                    {"at": d.at, "options": [{"next": n, "p": p} for n, p in d.options]} for d in r.diverges
                ],
            }
            for r in net.routes
        ],
        "eval_nodes": [
            {
                "id": n.id,
                "capture": n.capture,
                "approaches": [{"link": a.link, "position": a.position} for a in n.approaches],
            }
            for n in net.eval_nodes
        ],
    }


def dumps(net: Network) -> str:
    return json.dumps(serialize(net), indent=1)


def scenario_path(name: str) -> Path:
    """Path of a bundled scenario by short name (``route19``) or a filesystem path."""
    p = Path(name)
    if p.suffix == ".json" and p.exists():
        return p
    bundled = resources.files("mixflow").joinpath(f"scenarios/{name}.json")
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"no scenario {name!r} (not a file, not bundled: {', '.join(bundled_scenarios())})")


def bundled_scenarios() -> list[str]:
    root = resources.files("mixflow").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(name: str | Path) -> Network:
    return load_network(scenario_path(str(name)).read_text("utf-8"))


# ---------------------------------------------------------------------------
# route arithmetic


def advance_position(pos: tuple[str, int, float], distance: float, route: Route, net: Network):
    """Move ``distance`` meters along the route chain.

    Returns the new (link, lane, offset) or :data:`EXITED` once the end of the
    last link is passed. Lanes carry across boundaries through connectors.
    """
    if distance < 0:
        raise ValueError("distance must be non-negative")
    link_id, lane, offset = pos
    if link_id not in route.links:
        raise ValueError(f"link {link_id!r} is not on route {route.id!r}")
    idx = route.links.index(link_id)
    if not 0.0 <= offset <= net.link(link_id).length:
        raise ValueError(f"offset {offset} outside link {link_id!r}")
    offset += distance
    while offset > net.link(link_id).length:
        offset -= net.link(link_id).length
        if idx + 1 >= len(route.links):
            return EXITED
        nxt = route.links[idx + 1]
        new_lane = net.next_lane(link_id, lane, nxt)
        if new_lane is None:
            new_lane = min(c.to_lane for c in net.connectors if c.from_link == link_id and c.to_link == nxt)
        link_id, lane, idx = nxt, new_lane, idx + 1
    return (link_id, lane, offset)


def theoretical_travel_time(
    route: Route | Sequence[str],
    desired_speed: float | None,
    net: Network,
    speed_factor: float = 1.0,
) -> float:
    """Free-flow travel time with every signal green and no other traffic.

    Each segment is driven at ``min(desired_speed, speed_factor * limit)``;
    pass ``desired_speed=None`` to drive at ``speed_factor * limit``.
    """
    links = route.links if isinstance(route, Route) else tuple(route)
    if desired_speed is not None and desired_speed <= 0:
        raise ValueError("desired_speed must be positive")
    total = 0.0
    for link_id in links:
        link = net.link(link_id)
        speed = speed_factor * link.speed_limit
        if desired_speed is not None:
            speed = min(desired_speed, speed)
        total += link.length / speed
    return total


def route_length(route: Route, net: Network) -> float:
    return math.fsum(net.link(l).length for l in route.links)
