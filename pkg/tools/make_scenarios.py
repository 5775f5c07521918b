"""Generate the bundled corridor scenarios into src/mixflow/scenarios/.

Each corridor is a chain of blocks. A block is an optional on-ramp (side
street or freeway entrance) joining through a short auxiliary lane, a main
link that may end in a signalized stop line, and an optional exit at the end
of the main link. Side-street traffic enters, travels a few blocks and
leaves, which is how the corridors carry their calibrated hourly volumes
without oversaturating any single stop line.

    python tools/make_scenarios.py            # write all four
    python tools/make_scenarios.py --check    # also print per-block demand
"""
from __future__ import annotations

import argparse
import json
from dataclasses import dataclass
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "mixflow" / "scenarios"

MPH = 0.44704
PROGRAM = [["green", 45.0], ["amber", 3.0], ["red", 42.0]]
CYCLE = 90.0
AUX = 200.0  # auxiliary lane where ramp traffic joins
RAMP = 150.0
EXIT = 200.0


@dataclass
class Block:
    length: float
    limit: float
    kind: str = "urban"
    lanes: int = 2
    signal: bool = False
    ramp: float = 0.0  # veh/h entering at the start of the block
    ramp_stop: bool = False  # stop sign at the end of the ramp
    exit_p: float = 0.0  # share leaving at the end of the block


def corridor(name: str, description: str, blocks: list[Block], main_rate: float, node: dict,
             notes: dict, check: bool = False) -> dict:
    links, conns, signals, stops, inputs, routes = [], [], [], [], [], []
    chain: list[str] = []
    diverges: dict[str, list] = {}
    prev: tuple[str, int] | None = None  # last main link and its lane count
    tt = 0.0  # free-flow travel time to the start of the block
    for i, b in enumerate(blocks):
        main_len = b.length
        if b.ramp > 0:
            a, r = f"a{i}", f"r{i}"
            rlimit = min(b.limit, 13.4) if b.kind == "urban" else min(b.limit, 22.4)
            links.append(dict(id=a, length=AUX, lanes=b.lanes + 1, speed_limit=b.limit, kind=b.kind))
            links.append(dict(id=r, length=RAMP, lanes=1, speed_limit=rlimit, kind=b.kind))
            conns.append({"from": [r, 0], "to": [a, 0]})
            if prev is not None:
                for k in range(min(prev[1], b.lanes)):
                    conns.append({"from": [prev[0], k], "to": [a, k + 1]})
            if b.ramp_stop:
                stops.append(dict(id=f"stop{i}", link=r, position=RAMP - 1.0))
            chain.append(a)
            main_len -= AUX
            up = (a, b.lanes + 1, 1)
        else:
            up = prev + (0,) if prev is not None else None
        m = f"m{i}"
        links.append(dict(id=m, length=main_len, lanes=b.lanes, speed_limit=b.limit, kind=b.kind))
        if up is not None:
            src, src_lanes, shift = up
            for k in range(min(src_lanes - shift, b.lanes)):
                conns.append({"from": [src, k + shift], "to": [m, k]})
        chain.append(m)
        if b.signal:
            # green wave timed for the posted speed
            offset = round((tt + b.length / b.limit) % CYCLE, 1)
            signals.append(dict(id=f"sig{i}", link=m, position=main_len - 1.0, offset=offset,
                                program=PROGRAM, assumed=True))
        if b.exit_p > 0 and i + 1 < len(blocks):
            x = f"x{i}"
            # turns are allowed from every lane, so exits never force a lane change
            links.append(dict(id=x, length=EXIT, lanes=b.lanes, speed_limit=min(b.limit, 13.4), kind=b.kind))
            for k in range(b.lanes):
                conns.append({"from": [m, k], "to": [x, k]})
            diverges[m] = [x, b.exit_p]
        tt += b.length / b.limit
        prev = (m, b.lanes)

    def route_doc(rid: str, links_: list[str]) -> dict:
        divs = []
        for li, l in enumerate(links_[:-1]):
            if l in diverges:
                x, p = diverges[l]
                divs.append({"at": l, "options": [{"next": links_[li + 1], "p": round(1 - p, 6)},
                                                  {"next": x, "p": p}]})
        return {"id": rid, "links": links_, "diverges": divs}

    routes.append(route_doc("main", chain))
    inputs.append(dict(id="in_main", link=chain[0], route="main", rate=main_rate))
    for i, b in enumerate(blocks):
        if b.ramp > 0:
            start = chain.index(f"a{i}")
            routes.append(route_doc(f"from_r{i}", [f"r{i}"] + chain[start:]))
            inputs.append(dict(id=f"in_r{i}", link=f"r{i}", route=f"from_r{i}", rate=b.ramp))

    if check:
        f = main_rate
        print(f"{name}: main {main_rate:.0f} veh/h, total demand {main_rate + sum(b.ramp for b in blocks):.0f}")
        for i, b in enumerate(blocks):
            f += b.ramp
            print(f"  block {i:2d} {b.kind:7s} {b.lanes}L {b.length:6.0f} m  {'S' if b.signal else ' '} "
                  f"flow {f:6.0f} veh/h ({f / b.lanes:5.0f}/lane)")
            f *= 1 - b.exit_p
    return {
        "meta": {"name": name, "description": description, "notes": notes, "parameters": {}},
        "links": links,
        "connectors": conns,
        "signals": signals,
        "stop_signs": stops,
        "inputs": inputs,
        "routes": routes,
        "eval_nodes": [node],
    }


NOTES = {
    "signal_programs": "assumed fixed-time 90 s cycles (45 green, 3 amber, 42 red) with progression offsets",
    "volumes": "calibrated so one-hour no-AV runs enter roughly the documented vehicle counts; not measured",
    "target_vehicles_per_hour": None,
}


def route19(check=False):
    urban, fwy = 35 * MPH, 65 * MPH
    blocks = [
        Block(600, urban, signal=True),
        Block(650, urban, signal=True, ramp=300, exit_p=0.15),
        Block(600, urban, signal=True, ramp=200, exit_p=0.2),
        Block(600, urban, signal=True, ramp=200, exit_p=0.2),
        Block(550, urban, signal=True, ramp=200, exit_p=0.2),
        Block(1000, fwy, kind="freeway", ramp=650, exit_p=0.3),
        Block(1000, fwy, kind="freeway", ramp=650, exit_p=0.3),
        Block(1000, fwy, kind="freeway", ramp=650, exit_p=0.3),
        Block(1000, fwy, kind="freeway"),
    ]
    node = {"id": "intersection", "capture": 250.0, "approaches": [{"link": "m1", "position": 449.0}]}
    return corridor("route19", "urban arterial with five signalized intersections feeding a freeway section",
                    blocks, 1800, node, dict(NOTES, target_vehicles_per_hour=3996), check)


def route15(check=False):
    a, b = 35 * MPH, 30 * MPH
    blocks = []
    for i in range(14):
        blocks.append(Block(7400 / 14, a if i % 3 else b, signal=True,
                            ramp=110 if i % 2 and i < 13 else 0.0, exit_p=0.12 if i % 2 == 0 and i < 13 else 0.0))
    node = {"id": "intersection", "capture": 250.0, "approaches": [{"link": "m3", "position": blocks[3].length - AUX - 1.0}]}
    return corridor("route15", "urban arterial with fourteen signalized intersections",
                    blocks, 720, node, dict(NOTES, target_vehicles_per_hour=1438), check)


def us33(check=False):
    fwy = 65 * MPH
    blocks = [Block(30300 / 6, fwy, kind="freeway", ramp=0 if i == 0 else 200, exit_p=0.12 if 0 < i < 5 else 0.0)
              for i in range(6)]
    node = {"id": "merge", "capture": AUX, "approaches": [{"link": "a1", "position": AUX},
                                                        {"link": "m1", "position": blocks[1].length - AUX}]}
    return corridor("us33", "two-lane freeway with single-lane entrance and exit ramps",
                    blocks, 1180, node, dict(NOTES, target_vehicles_per_hour=2176), check)


def cosi(check=False):
    lim = 25 * MPH
    blocks = []
    for i in range(10):
        blocks.append(Block(450, lim, lanes=1 if i % 3 == 1 else 2, signal=i != 9,
                            ramp=0.0 if i == 0 else 210, ramp_stop=i % 2 == 0,
                            exit_p=0.3 if i < 9 else 0.0))
    node = {"id": "intersection", "capture": 200.0, "approaches": [{"link": "m2", "position": 249.0}]}
    return corridor("cosi", "downtown loop with single-lane segments and stop-controlled side streets",
                    blocks, 520, node, dict(NOTES, target_vehicles_per_hour=2410), check)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--check", action="store_true", help="print per-block demand")
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for make in (route19, route15, us33, cosi):
        doc = make(args.check)
        (args.out / f"{doc['meta']['name']}.json").write_text(json.dumps(doc, indent=1) + "\n", "utf-8")


if __name__ == "__main__":
    main()
