"""Small scenario documents and synthetic trajectory logs shared by the tests."""
from __future__ import annotations

import numpy as np

from mixflow.engine import TrajectoryLog
from mixflow.net import load_network


def line_doc(length=1000.0, lanes=1, limit=13.9, rate=0.0, signal=None, stop=None, eval_pos=None, capture=200.0,
             links=None):
    """One route over a chain of links (default one link ``a``).

    ``signal`` is (position, program) on the first link, ``stop`` a stop-sign
    position on the first link, ``eval_pos`` an evaluation-node stop line on it.
    """
    links = links or [("a", length, lanes, limit)]
    doc = {
        "meta": {"name": "test"},
        "links": [dict(id=i, length=L, lanes=n, speed_limit=v, kind="urban") for i, L, n, v in links],
        "connectors": [],
        "signals": [],
        "stop_signs": [],
        "inputs": [{"id": "in", "link": links[0][0], "route": "r", "rate": rate}],
        "routes": [{"id": "r", "links": [l[0] for l in links]}],
        "eval_nodes": [],
    }
    for (a, _, na, _), (b, _, nb, _) in zip(links, links[1:]):
        for k in range(min(na, nb)):
            doc["connectors"].append({"from": [a, k], "to": [b, k]})
    first = links[0][0]
    if signal is not None:
        pos, program = signal
        doc["signals"].append({"id": "sig", "link": first, "position": pos, "program": [list(p) for p in program]})
    if stop is not None:
        doc["stop_signs"].append({"id": "stop", "link": first, "position": stop})
    if eval_pos is not None:
        doc["eval_nodes"].append({"id": "node", "capture": capture, "approaches": [{"link": first, "position": eval_pos}]})
    return doc


def line_net(**kw):
    return load_network(line_doc(**kw))


def make_log(net, dt, n_steps, samples, exit_step=None, length=4.5, speed_factor=1.0):
    """TrajectoryLog from ``samples`` = [(step, veh, link_id, lane, offset, speed, accel), ...]."""
    samples = sorted(samples, key=lambda s: (s[0], s[1]))
    n_veh = 1 + max((s[1] for s in samples), default=-1)
    if exit_step is not None:
        n_veh = max(n_veh, len(exit_step))
    col = lambda k, dtype: np.array([s[k] for s in samples], dtype=dtype)  # noqa: E731
    lk = np.array([net.link_index[s[2]] for s in samples], dtype=np.int64)
    ex = np.full(n_veh, -1, dtype=np.int64)
    if exit_step is not None:
        ex[: len(exit_step)] = exit_step
    first = np.full(n_veh, -1, dtype=np.int64)
    for s in samples:
        if first[s[1]] < 0:
            first[s[1]] = s[0]
    lengths = np.broadcast_to(np.asarray(length, dtype=np.float64), (n_veh,)).copy()
    facs = np.broadcast_to(np.asarray(speed_factor, dtype=np.float64), (n_veh,)).copy()
    return TrajectoryLog(
        net=net, dt=dt, n_steps=n_steps,
        step=col(0, np.int64), veh=col(1, np.int64), link=lk, lane=col(3, np.int64),
        offset=col(4, np.float64), speed=col(5, np.float64), accel=col(6, np.float64),
        kind=np.zeros(n_veh, dtype=np.int64), length=lengths, speed_factor=facs,
        arrive_step=first.copy(), enter_step=first.copy(), exit_step=ex,
        signal_states=np.zeros((n_steps, len(net.signal_controllers)), dtype=np.int64),
    )


# --- brute-force metric oracle ------------------------------------------------------


def oracle_evaluation(log, scope="node", model=None, qc=None, node_id=None):
    """Every NodeEvaluationResult field recomputed straight from the definitions.

    Deliberately naive: plain loops over a dict of samples per step, one
    vehicle at a time, no shared code with the compiled accumulator.
    """
    import math

    from mixflow.metrics import FULL_SCOPE_CAPTURE, FuelEmissionModel, NodeEvaluationResult, QueueConfig

    model = model or FuelEmissionModel()
    qc = qc or QueueConfig()
    net, dt = log.net, log.dt
    coefs = [model.fuel, model.co, model.nox, model.voc]
    if scope == "node":
        node = net.eval_node(node_id)
        approaches = [(a.link, a.position, node.capture) for a in node.approaches]
        region = {a.link: (a.position - node.capture, a.position) for a in node.approaches}

        def inside(link, off):
            return link in region and region[link][0] <= off <= region[link][1]
    else:
        approaches = [(link, pos, min(FULL_SCOPE_CAPTURE, pos)) for link, pos in net.stop_lines()]

        def inside(link, off):
            return True

    n = log.n_vehicles
    qflag = [False] * n
    seen = [False] * n
    armed = [False] * n
    inprev = [False] * n
    completed = [False] * n
    n_in = [0] * n
    theo = [0.0] * n
    n_stop = [0] * n
    stops = [0] * n
    qty = [[0.0] * 4 for _ in range(n)]
    queue = []
    by_step = {}
    for k in range(log.step.size):
        by_step.setdefault(int(log.step[k]), []).append(k)
    for s in range(log.n_steps):
        for i in range(n):
            if log.exit_step[i] == s:
                if inprev[i]:
                    completed[i] = True
                inprev[i] = False
        rows = by_step.get(s, [])
        for k in rows:
            i = int(log.veh[k])
            v, a = float(log.speed[k]), float(log.accel[k])
            link = net.links[int(log.link[k])]
            if v < qc.enter:
                qflag[i] = True
            elif v > qc.exit:
                qflag[i] = False
            if not inside(link.id, float(log.offset[k])):
                if inprev[i]:
                    completed[i] = True
                inprev[i] = False
                continue
            if not seen[i]:
                seen[i] = True
                armed[i] = True
            inprev[i] = True
            n_in[i] += 1
            for q, c in enumerate(coefs):
                pa = a if a > 0.0 else 0.0
                qty[i][q] += (c[0] + c[1] * v + c[2] * v * v * v + c[3] * pa * v) * dt / 3600.0
            theo[i] += v * dt / (float(log.speed_factor[i]) * link.speed_limit)
            if v < 0.1:
                n_stop[i] += 1
            if armed[i]:
                if v < 0.2:
                    stops[i] += 1
                    armed[i] = False
            elif v > 1.0:
                armed[i] = True
        row = []
        for link_id, pos, cap in approaches:
            li = net.link_index[link_id]
            best = 0.0
            for lane in range(net.link(link_id).lanes):
                here = sorted(((float(log.offset[k]), int(log.veh[k]), k) for k in rows
                               if int(log.link[k]) == li and int(log.lane[k]) == lane), reverse=True)
                head = None
                for idx, (off, vid, k) in enumerate(here):
                    if off < pos - cap:
                        break
                    if off <= pos and qflag[vid]:
                        head = idx
                        break
                if head is None:
                    continue
                last = head
                for idx in range(head + 1, len(here)):
                    rear = here[last][0] - float(log.length[here[last][1]])
                    if rear - here[idx][0] <= qc.max_spacing and qflag[here[idx][1]]:
                        last = idx
                    else:
                        break
                best = max(best, pos - (here[last][0] - float(log.length[here[last][1]])))
            row.append(best)
        queue.append(row)
    ids = [i for i in range(n) if seen[i]]
    count = len(ids)
    totals = [math.fsum(qty[i][q] for i in ids) for q in range(4)]
    done = [i for i in ids if completed[i]]
    delay = math.fsum(n_in[i] * dt - theo[i] for i in done) / len(done) if done else 0.0
    flat = [x for row in queue for x in row]
    per = lambda x: x / count if count else 0.0  # noqa: E731
    return NodeEvaluationResult(
        scope=scope,
        vehicle_count=count,
        completed_count=len(done),
        total_fuel_gal=totals[0],
        fuel_per_veh_gal=per(totals[0]),
        co_g=totals[1],
        nox_g=totals[2],
        voc_g=totals[3],
        co_g_per_veh=per(totals[1]),
        nox_g_per_veh=per(totals[2]),
        voc_g_per_veh=per(totals[3]),
        avg_queue_m=math.fsum(flat) / len(flat) if flat else 0.0,
        max_queue_m=max(flat) if flat else 0.0,
        avg_delay_s=delay,
        avg_stopped_delay_s=per(sum(n_stop[i] for i in ids) * dt),
        total_stops=sum(stops[i] for i in ids),
    )


# a node with two approaches, a downstream link and a signal, for random logs
ORACLE_LINKS = [("a", 300.0, 2, 13.9), ("b", 200.0, 1, 11.2)]


def oracle_net():
    doc = line_doc(links=ORACLE_LINKS, signal=(250.0, [("green", 30.0), ("red", 30.0)]), eval_pos=250.0)
    doc["stop_signs"].append({"id": "stop_b", "link": "b", "position": 150.0})
    doc["eval_nodes"][0]["approaches"].append({"link": "b", "position": 150.0})
    return load_network(doc)


SPEEDS = (0.0, 0.05, 0.15, 0.5, 1.2, 1.39, 2.0, 2.78, 3.5, 8.0, 13.9)


def random_log(rng, net, max_vehicles=5, max_steps=100, dt=0.1):
    """A random (not necessarily physical) log: <= 5 vehicles, <= 100 steps."""
    n_steps = int(rng.integers(1, max_steps + 1))
    n_veh = int(rng.integers(0, max_vehicles + 1))
    samples, exits = [], []
    for vid in range(n_veh):
        start = int(rng.integers(0, n_steps))
        stop = int(rng.integers(start, n_steps + 1))
        for s in range(start, stop):
            link, _, lanes, _ = ORACLE_LINKS[int(rng.integers(0, len(ORACLE_LINKS)))]
            length = net.link(link).length
            off = float(rng.choice([rng.uniform(0, length), float(rng.integers(0, int(length) + 1))]))
            v = float(rng.choice(SPEEDS)) if rng.random() < 0.6 else float(rng.uniform(0, 15))
            samples.append((s, vid, link, int(rng.integers(0, lanes)), off, v, float(rng.uniform(-3.5, 2.5))))
        exits.append(stop if stop < n_steps and rng.random() < 0.7 else -1)
    fac = rng.uniform(0.8, 1.1, size=n_veh) if n_veh else 1.0
    return make_log(net, dt, n_steps, samples, exit_step=exits, speed_factor=fac)
