"""Build scenario networks from OpenStreetMap XML extracts.

The corridor is an ordered list of way ids whose end nodes chain. It is cut
into links at junction nodes (nodes used by more than one highway way), link
lengths are great-circle distances, and ``highway=traffic_signals`` and
``highway=stop`` nodes become signal heads and stop signs at their arc
length. Side streets meeting the corridor become exit stubs with uniform
turn probabilities, which a scenario author is expected to edit.

Signal timing does not exist in OSM; every signal gets the default fixed-time
program flagged ``assumed``.
"""
from __future__ import annotations

import json
import logging
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

from .net import DEFAULT_SIGNAL_PROGRAM, Network, load_network

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371008.8  # mean Earth radius
MPH = 0.44704
KMH = 1.0 / 3.6
FREEWAY_CLASSES = frozenset({"motorway", "motorway_link", "trunk", "trunk_link"})


class OsmParseError(ValueError):
    """Malformed XML or a dangling reference."""


class IngestError(ValueError):
    """The corridor cannot be turned into a network."""


@dataclass(frozen=True)
class OsmNode:
    id: int
    lat: float
    lon: float
    tags: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class OsmWay:
    id: int
    nodes: tuple[int, ...]
    tags: dict = field(default_factory=dict, compare=False)


@dataclass
class RawGraph:
    nodes: dict[int, OsmNode]
    ways: dict[int, OsmWay]


@dataclass(frozen=True)
class IngestDefaults:
    lanes: dict = field(default_factory=lambda: {
        "motorway": 2, "motorway_link": 1, "trunk": 2, "trunk_link": 1, "primary": 2, "primary_link": 1,
        "secondary": 2, "secondary_link": 1, "tertiary": 1, "tertiary_link": 1, "unclassified": 1,
        "residential": 1, "living_street": 1, "service": 1,
    })
    speeds: dict = field(default_factory=lambda: {
        "motorway": 29.06, "motorway_link": 17.88, "trunk": 24.59, "trunk_link": 17.88, "primary": 15.65,
        "primary_link": 13.41, "secondary": 15.65, "secondary_link": 13.41, "tertiary": 13.9,
        "tertiary_link": 13.9, "unclassified": 13.9, "residential": 13.9, "living_street": 4.2, "service": 8.3,
    })
    units: dict = field(default_factory=lambda: {"mph": MPH, "km/h": KMH, "kmh": KMH, "kph": KMH, "knots": 0.514444,
                                                 "": KMH})
    fallback_class: str = "residential"  # used for classes missing from the tables

    def __post_init__(self):
        for name, table in (("lanes", self.lanes), ("speeds", self.speeds), ("units", self.units)):
            for k, v in table.items():
                if not v > 0:
                    raise ValueError(f"default {name}[{k!r}] must be positive, got {v!r}")
        if self.fallback_class not in self.lanes or self.fallback_class not in self.speeds:
            raise ValueError(f"fallback class {self.fallback_class!r} needs a lane count and a speed")

    def lanes_for(self, cls: str | None) -> int:
        return int(self.lanes.get(cls, self.lanes[self.fallback_class]))

    def speed_for(self, cls: str | None) -> float:
        return float(self.speeds.get(cls, self.speeds[self.fallback_class]))

    @classmethod
    def from_dict(cls, d: dict) -> "IngestDefaults":
        base = cls()
        extra = set(d) - {"lanes", "speeds", "units", "fallback_class"}
        if extra:
            raise ValueError(f"unknown ingest default fields: {', '.join(sorted(extra))}")
        return cls(
            lanes={**base.lanes, **d.get("lanes", {})},
            speeds={**base.speeds, **d.get("speeds", {})},
            units={**base.units, **d.get("units", {})},
            fallback_class=d.get("fallback_class", base.fallback_class),
        )

    @classmethod
    def load(cls, path: str | Path) -> "IngestDefaults":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))


# --- parsing ------------------------------------------------------------------


def _tags(el) -> dict:
    return {t.get("k"): t.get("v", "") for t in el.findall("tag") if t.get("k") is not None}


def parse_osm(xml: bytes | str | Path | BinaryIO) -> RawGraph:
    """Nodes and ways with their tags; relations are ignored."""
    try:
        if isinstance(xml, (bytes, bytearray)):
            root = ET.fromstring(xml)
        elif isinstance(xml, Path):
            root = ET.parse(xml).getroot()
        elif isinstance(xml, str):
            root = ET.fromstring(xml.encode("utf-8"))
        else:
            root = ET.parse(xml).getroot()
    except ET.ParseError as e:
        raise OsmParseError(f"malformed OSM XML: {e}") from e
    nodes: dict[int, OsmNode] = {}
    ways: dict[int, OsmWay] = {}
    for el in root.iter("node"):
        try:
            nid = int(el.get("id"))
            nodes[nid] = OsmNode(nid, float(el.get("lat")), float(el.get("lon")), _tags(el))
        except (TypeError, ValueError) as e:
            raise OsmParseError(f"node {el.get('id')!r}: bad id or coordinates") from e
    for el in root.iter("way"):
        try:
            wid = int(el.get("id"))
            refs = tuple(int(nd.get("ref")) for nd in el.findall("nd"))
        except (TypeError, ValueError) as e:
            raise OsmParseError(f"way {el.get('id')!r}: bad id or node reference") from e
        for ref in refs:
            if ref not in nodes:
                raise OsmParseError(f"way {wid} references unknown node {ref}")
        ways[wid] = OsmWay(wid, refs, _tags(el))
    return RawGraph(nodes, ways)


_SPEED = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([a-z/]*)\s*$")


def parse_speed_limit(value: str | None, defaults: IngestDefaults | None = None, highway: str | None = None) -> float:
    """m/s from a ``maxspeed`` value: "N mph", bare N in km/h, else the class default."""
    defaults = defaults or IngestDefaults()
    if value:
        m = _SPEED.match(str(value).lower())
        if m is not None:
            unit, x = m.group(2), float(m.group(1))
            if unit in defaults.units and 0 < x < math.inf:
                return x * defaults.units[unit]
        log.warning("unparseable maxspeed %r; using the %s default", value, highway or defaults.fallback_class)
    return defaults.speed_for(highway)


def haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def path_length(g: RawGraph, node_ids: Sequence[int]) -> float:
    n = [g.nodes[i] for i in node_ids]
    return math.fsum(haversine(a.lat, a.lon, b.lat, b.lon) for a, b in zip(n, n[1:]))


# --- network building -----------------------------------------------------------------


def _is_road(w: OsmWay) -> bool:
    return "highway" in w.tags


def _lanes(w: OsmWay, defaults: IngestDefaults) -> int:
    try:
        n = int(str(w.tags.get("lanes", "")).split(";")[0])
        if n >= 1:
            return n
    except ValueError:
        pass
    return defaults.lanes_for(w.tags.get("highway"))


def _kind(w: OsmWay) -> str:
    return "freeway" if w.tags.get("highway") in FREEWAY_CLASSES else "urban"


def chain_corridor(g: RawGraph, corridor: Sequence[int]) -> list[tuple[OsmWay, tuple[int, ...]]]:
    """Ways of the corridor with their node lists oriented in travel order."""
    if not corridor:
        raise IngestError("corridor is empty")
    for wid in corridor:
        if wid not in g.ways:
            raise IngestError(f"corridor way {wid} is not in the extract")
    ways = [g.ways[w] for w in corridor]
    first = ways[0].nodes
    if len(ways) > 1 and first[0] in (ways[1].nodes[0], ways[1].nodes[-1]) and \
            first[-1] not in (ways[1].nodes[0], ways[1].nodes[-1]):
        first = first[::-1]
    out = [(ways[0], first)]
    for w in ways[1:]:
        end = out[-1][1][-1]
        if w.nodes[0] == end:
            seq = w.nodes
        elif w.nodes[-1] == end:
            seq = w.nodes[::-1]
        else:
            raise IngestError(f"way {w.id} does not continue from node {end} (corridor is not chainable)")
        if seq is not w.nodes and w.tags.get("oneway") == "yes":
            log.warning("way %d is one-way but the corridor runs against it", w.id)
        out.append((w, seq))
    return out


def _stubs(g: RawGraph, node: int, skip: set[int]) -> list[tuple[OsmWay, tuple[int, ...]]]:
    """Side-street pieces leaving ``node``, each up to the next junction or the way end."""
    out = []
    for w in sorted(g.ways.values(), key=lambda w: w.id):
        if w.id in skip or not _is_road(w) or node not in w.nodes:
            continue
        oneway = w.tags.get("oneway")
        k = w.nodes.index(node)
        if k + 1 < len(w.nodes) and oneway != "-1":
            out.append((w, w.nodes[k:]))
        if k > 0 and oneway not in ("yes", "true", "1"):
            out.append((w, w.nodes[k::-1]))
    return out


def _cut(seq: Sequence[int], junctions: set[int]) -> list[tuple[int, ...]]:
    pieces, start = [], 0
    for k in range(1, len(seq)):
        if seq[k] in junctions or k == len(seq) - 1:
            pieces.append(tuple(seq[start:k + 1]))
            start = k
    return pieces


def build_network(g: RawGraph, defaults: IngestDefaults | None = None, corridor: Sequence[int] = (),
                  name: str = "corridor", input_rate: float = 600.0) -> Network:
    """Scenario network for the corridor, validated like any scenario file."""
    return load_network(build_document(g, defaults, corridor, name, input_rate))


def build_document(g: RawGraph, defaults: IngestDefaults | None = None, corridor: Sequence[int] = (),
                   name: str = "corridor", input_rate: float = 600.0) -> dict:
    defaults = defaults or IngestDefaults()
    chain = chain_corridor(g, corridor)
    use = {}
    for w in g.ways.values():
        if _is_road(w) or w.id in corridor:
            for n in set(w.nodes):
                use[n] = use.get(n, 0) + 1
    junctions = {n for n, c in use.items() if c > 1}

    links, conns, signals, stops, diverges = [], [], [], [], []
    ids: list[str] = []
    node_at: dict[int, tuple[str, float]] = {}  # corridor node -> (link, arc position), upstream link wins
    ends: list[int] = []
    for w, seq in chain:
        for piece in _cut(seq, junctions):
            length = path_length(g, piece)
            lid = f"w{w.id}_{len(ids)}"
            if not length > 0:
                raise IngestError(f"way {w.id}: zero-length segment between nodes {piece[0]} and {piece[-1]}")
            pos = 0.0
            for k, n in enumerate(piece):
                if k > 0:
                    a, b = g.nodes[piece[k - 1]], g.nodes[n]
                    pos += haversine(a.lat, a.lon, b.lat, b.lon)
                if k == 0 and ids:
                    continue  # boundary node, already placed at the end of the upstream link
                node_at[n] = (lid, min(pos, length))
            links.append(_link(lid, length, w, piece, g, defaults))
            ids.append(lid)
            ends.append(piece[-1])
    for a, b in zip(links, links[1:]):
        for k in range(min(a["lanes"], b["lanes"])):
            conns.append({"from": [a["id"], k], "to": [b["id"], k]})

    # side streets at interior junctions become exits
    corridor_ways = set(corridor)
    for li, (lid, end) in enumerate(zip(ids[:-1], ends[:-1])):
        stubs = _stubs(g, end, corridor_ways)
        if not stubs:
            continue
        options = [ids[li + 1]]
        for w, seq in stubs:
            piece = _cut(seq, junctions)[0]
            length = path_length(g, piece)
            if not length > 0:
                log.warning("skipping zero-length side street piece of way %d at node %d", w.id, end)
                continue
            sid = f"s{end}_w{w.id}_{len(options)}"
            links.append(_link(sid, length, w, piece, g, defaults))
            for k in range(min(links[li]["lanes"], links[-1]["lanes"])):
                conns.append({"from": [lid, k], "to": [sid, k]})
            options.append(sid)
        if len(options) > 1:
            p = 1.0 / len(options)
            probs = [p] * (len(options) - 1)
            probs.append(1.0 - math.fsum(probs))
            diverges.append({"at": lid, "options": [{"next": o, "p": q} for o, q in zip(options, probs)]})

    corridor_nodes = [chain[0][1][0]] + [n for _, seq in chain for n in seq[1:]]
    for n in corridor_nodes:
        hw = g.nodes[n].tags.get("highway")
        if hw not in ("traffic_signals", "stop"):
            continue
        lid, pos = node_at[n]
        if hw == "traffic_signals":
            signals.append({"id": f"sig{n}", "link": lid, "position": pos, "offset": 0.0,
                            "program": [list(ph) for ph in DEFAULT_SIGNAL_PROGRAM], "assumed": True})
        else:
            stops.append({"id": f"stop{n}", "link": lid, "position": pos})

    node = None
    for s in signals:
        if s["position"] > 0:
            node = {"id": s["id"], "capture": min(250.0, s["position"]),
                    "approaches": [{"link": s["link"], "position": s["position"]}]}
            break
    if node is None:
        last = links[len(ids) - 1]
        node = {"id": "end", "capture": min(250.0, last["length"]),
                "approaches": [{"link": last["id"], "position": last["length"]}]}
    return {
        "meta": {
            "name": name,
            "description": f"ingested from OpenStreetMap ways {', '.join(str(w) for w in corridor)}",
            "notes": {"signal_programs": "assumed default fixed-time program; OSM carries no timing",
                      "volumes": "placeholder input rate; edit before use"},
            "parameters": {},
        },
        "links": links,
        "connectors": conns,
        "signals": signals,
        "stop_signs": stops,
        "inputs": [{"id": "in_main", "link": ids[0], "route": "main", "rate": float(input_rate)}],
        "routes": [{"id": "main", "links": ids, "diverges": diverges}],
        "eval_nodes": [node],
    }


def _link(lid: str, length: float, w: OsmWay, piece: Sequence[int], g: RawGraph, defaults: IngestDefaults) -> dict:
    hw = w.tags.get("highway")
    return {
        "id": lid,
        "length": length,
        "lanes": _lanes(w, defaults),
        "speed_limit": parse_speed_limit(w.tags.get("maxspeed"), defaults, hw),
        "kind": _kind(w),
        "geometry": [[g.nodes[n].lon, g.nodes[n].lat] for n in piece],  # x, y = lon, lat
    }


def report(net: Network) -> list[str]:
    total = math.fsum(net.route_length(r.id) for r in net.routes[:1])
    return [
        f"links: {len(net.links)}",
        f"signals: {len(net.signal_controllers)}",
        f"stop signs: {len(net.stop_signs)}",
        f"total length: {total:.1f} m",
    ]
