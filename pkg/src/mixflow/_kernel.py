"""Compiled simulation step and metric accumulator.

Everything here works on flat numpy arrays grouped in struct references
(passed by pointer, so calls between kernels stay cheap):

- ``Net``: static lane graph, control lines, signal programs, paths, inputs
- ``Fleet``: per-vehicle float/int state plus the present-vehicle order
- ``Scope``: measurement region and queue approaches
- ``Acc``: per-vehicle metric accumulators and the queue series

A cell is one (link, lane) pair. The present-vehicle order is kept sorted by
(cell, offset, id); it is the frozen snapshot every decision reads from.
Offsets locate the front bumper.
"""
from __future__ import annotations

import math
import numpy as np
from numba import njit
from numba.core import types
from numba.experimental import structref

from .driver import (
    AV,
    BLOCKED_FOLLOWER,
    CHANGE,
    OBJ_LANE_END,
    OBJ_SIGNAL,
    OBJ_STOP,
    OBJ_VEHICLE,
    DWELL_EPS,
    LOOKAHEAD,
    P_BACCEPT,
    P_BCOMF,
    P_BMAX,
    P_COOLDOWN,
    P_COOP,
    P_MODEL,
    P_PERCEPTION,
    P_STANDSTILL,
    P_TGAP,
    STOP_DWELL,
    STOP_RADIUS,
    STOP_SPEED,
    curve_value,
    finalize_accel,
    free_accel,
    lane_change_core,
    lane_speed,
    object_accel,
    safe_speed,
    signal_blocks,
    urgency_scale,
    w74_distance,
)

# per-vehicle float columns
F_OFF, F_V, F_A, F_BXT, F_PCT, F_FAC, F_STOPT, F_LCT, F_LEN, F_DIST = range(10)
NF = 10
# per-vehicle int columns
I_KIND, I_PATH, I_PIDX, I_LINK, I_LANE, I_STATUS, I_CLEARED, I_INPUT, I_ARRIVE, I_ENTER, I_EXIT = range(11)
NI = 11

PENDING = 0
PRESENT = 1
EXITED = 2

LINE_SIGNAL = 1
LINE_STOP = 2

# counters
C_PRESENT, C_EXITED, C_ARRIVED, C_ERROR, C_ERR_STEP, C_ERR_A, C_ERR_B, C_WALL, C_CHANGES, C_INSERTED = range(10)
N_COUNTERS = 10
ERR_NONE = 0
ERR_GAP = 1
ERR_CONSERVATION = 2

GAP_TOL = 1e-6
LOOKBACK = 150.0
CHECK_RANGE = 60.0

def _record(name, fields):
    """Register a structref type ``name`` with keyword construction."""

    def preprocess_fields(self, fs):
        return tuple((n, types.unliteral(t)) for n, t in fs)

    tp = type(name + "Type", (types.StructRef,), {"preprocess_fields": preprocess_fields})
    tp.__module__ = __name__
    globals()[tp.__name__] = structref.register(tp)

    def __new__(cls, *args, **kw):
        if kw:
            args = args + tuple(kw.pop(f) for f in fields[len(args):])
        if kw or len(args) != len(fields):
            raise TypeError(f"{name} takes exactly the fields {fields}")
        return structref.StructRefProxy.__new__(cls, *args)

    proxy = type(name, (structref.StructRefProxy,), {"__new__": __new__, "_fields": tuple(fields)})
    proxy.__module__ = __name__
    for f in fields:
        getter = njit(eval(f"lambda r: r.{f}"))
        setattr(proxy, f, property(lambda self, g=getter: g(self)))
    structref.define_proxy(proxy, tp, list(fields))
    return proxy


Net = _record(
    "Net",
    [
        "link_len", "link_limit", "link_lanes", "link_cell0", "cell_link", "cell_lane",
        "conn", "pred_cell", "succ_start", "succ_cells",
        "line_start", "line_pos", "line_lane", "line_kind", "line_sig",
        "sig_offset", "sig_cycle", "ph_start", "ph_state", "ph_dur",
        "path_links", "path_n",
        "input_link", "input_lane",
        "par", "grid", "curves", "dt",
    ],
)

Fleet = _record(
    "Fleet",
    [
        "F", "I", "present", "order", "rank", "cell_start", "sig_state",
        "in_start", "in_ids", "in_head", "arrive_ptr",
        "a_new", "target", "yield_now", "yield_next", "blocked",
        "ok", "og", "ov", "ob", "oi", "exited", "ctr",
        "c_link", "c_lane", "c_off", "c_v", "c_a", "c_len", "c_fac",
    ],
)

Scope = _record("Scope", ["full", "reg_pos", "reg_cap", "q_link", "q_pos", "q_cap", "coef", "qc"])

Acc = _record(
    "Acc",
    ["qty", "n_in", "theo", "n_stop", "stops", "armed", "qflag", "inprev", "completed", "seen", "qseries"],
)


# --- snapshot ---------------------------------------------------------------


@njit(cache=True)
def _before(F, a, b):
    oa = F[a, F_OFF]
    ob = F[b, F_OFF]
    return oa < ob or (oa == ob and a < b)


@njit(cache=True)
def sort_snapshot(net, fl):
    """Counting sort of present vehicles by cell, then insertion sort by (offset, id).

    The previous order is the input, so cells arrive nearly sorted.
    """
    F, I = fl.F, fl.I
    n = fl.ctr[C_PRESENT]
    ncell = net.cell_link.shape[0]
    cs = fl.cell_start
    cs[:] = 0
    for k in range(n):
        i = fl.present[k]
        cs[net.link_cell0[I[i, I_LINK]] + I[i, I_LANE] + 1] += 1
    for c in range(ncell):
        cs[c + 1] += cs[c]
    fill = cs[:-1].copy()
    for k in range(n):
        i = fl.present[k]
        c = net.link_cell0[I[i, I_LINK]] + I[i, I_LANE]
        fl.order[fill[c]] = i
        fill[c] += 1
    for c in range(ncell):
        for k in range(cs[c] + 1, cs[c + 1]):
            x = fl.order[k]
            m = k - 1
            while m >= cs[c] and _before(F, x, fl.order[m]):
                fl.order[m + 1] = fl.order[m]
                m -= 1
            fl.order[m + 1] = x
    for k in range(n):
        fl.present[k] = fl.order[k]
        fl.rank[fl.order[k]] = k


@njit(cache=True)
def lower_bound(fl, cell, off):
    """First order index in ``cell`` whose offset is >= off."""
    lo = fl.cell_start[cell]
    hi = fl.cell_start[cell + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        if fl.F[fl.order[mid], F_OFF] < off:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def update_signals(net, fl, t):
    for s in range(net.sig_cycle.shape[0]):
        tau = (t - net.sig_offset[s]) % net.sig_cycle[s]
        state = -1
        for q in range(net.ph_start[s], net.ph_start[s + 1]):
            if tau < net.ph_dur[q]:
                state = net.ph_state[q]
                break
            tau -= net.ph_dur[q]
        if state < 0:
            state = net.ph_state[net.ph_start[s + 1] - 1]
        fl.sig_state[s] = state


@njit(cache=True)
def line_constrains(net, fl, q, lane, dist, v, b_comf, cleared):
    ll = net.line_lane[q]
    if ll >= 0 and ll != lane:
        return False
    if net.line_kind[q] == LINE_SIGNAL:
        return signal_blocks(fl.sig_state[net.line_sig[q]], dist, v, b_comf)
    return cleared != q


# --- perception ---------------------------------------------------------------


@njit(cache=True)
def next_control(net, fl, cell, off, pidx, path, v, b_comf, cleared, lookahead, after):
    """(kind, gap) of the first constraining line or lane end beyond ``after``.

    Drivers know their route: this is appended to a full perception list so a
    red light or the end of a lane is never hidden behind the vehicles ahead.
    Returns kind -1 when nothing lies within ``lookahead``.
    """
    d0 = -off
    c = cell
    pi = pidx
    while True:
        link = net.cell_link[c]
        lane = net.cell_lane[c]
        for q in range(net.line_start[link], net.line_start[link + 1]):
            dist = d0 + net.line_pos[q]
            if dist < 0.0 or dist <= after:
                continue
            if dist > lookahead:
                return -1, np.inf
            if line_constrains(net, fl, q, lane, dist, v, b_comf, cleared):
                return OBJ_SIGNAL if net.line_kind[q] == LINE_SIGNAL else OBJ_STOP, dist
        length = net.link_len[link]
        if pi + 1 >= net.path_n[path]:
            return -1, np.inf
        tl = net.conn[c, net.path_links[path, pi + 1]]
        if tl < 0:
            if after < d0 + length <= lookahead:
                return OBJ_LANE_END, d0 + length
            return -1, np.inf
        d0 += length
        if d0 > lookahead:
            return -1, np.inf
        c = net.link_cell0[net.path_links[path, pi + 1]] + tl
        pi += 1


@njit(cache=True)
def scan(net, fl, self_id, cell, off, pidx, path, kmax, with_lines, v, b_comf, cleared, lookahead):
    """Constraining objects ahead of a front bumper at (cell, off) along ``path``.

    Fills fl.ok/og/ov/ob (kind, gap, speed, b_max of the object) in gap order
    and returns the count. Vehicles whose rear still hangs over the end of
    this lane while their front sits on another branch are included.
    """
    F = fl.F
    order = fl.order
    n = 0
    d0 = -off
    c = cell
    link = net.cell_link[c]
    lane = net.cell_lane[c]
    pi = pidx
    jv = lower_bound(fl, c, off)
    jv_end = fl.cell_start[c + 1]
    jl = net.line_start[link]
    jl_end = net.line_start[link + 1]
    while jl < jl_end and net.line_pos[jl] < off:
        jl += 1
    done = False
    extra = 0  # straddlers do not use up the k slots: a closer on-path vehicle may follow
    cap = fl.ok.shape[0] - 1
    while True:
        while n - extra < kmax:
            gv = np.inf
            j = -1
            while jv < jv_end:
                j = order[jv]
                if j == self_id:
                    jv += 1
                    j = -1
                    continue
                gv = d0 + F[j, F_OFF] - F[j, F_LEN]
                break
            gl = np.inf
            if with_lines:
                while jl < jl_end:
                    dist = d0 + net.line_pos[jl]
                    if line_constrains(net, fl, jl, lane, dist, v, b_comf, cleared):
                        gl = dist
                        break
                    jl += 1
            if j < 0 and gl == np.inf:
                break
            if gv <= gl:
                if gv > lookahead:
                    done = True
                    break
                fl.ok[n] = OBJ_VEHICLE
                fl.oi[n] = j
                fl.og[n] = gv
                fl.ov[n] = F[j, F_V]
                fl.ob[n] = net.par[fl.I[j, I_KIND], P_BMAX]
                n += 1
                jv += 1
            else:
                if gl > lookahead:
                    done = True
                    break
                fl.ok[n] = OBJ_SIGNAL if net.line_kind[jl] == LINE_SIGNAL else OBJ_STOP
                fl.oi[n] = -1
                fl.og[n] = gl
                fl.ov[n] = 0.0
                fl.ob[n] = 1.0
                n += 1
                jl += 1
        if done or n - extra >= kmax:
            break
        if pi + 1 >= net.path_n[path]:
            break
        length = net.link_len[link]
        nl = net.path_links[path, pi + 1]
        tl = net.conn[c, nl]
        for s in range(net.succ_start[c], net.succ_start[c + 1]):
            sc = net.succ_cells[s]
            if net.cell_link[sc] == nl or n >= cap:
                continue
            if fl.cell_start[sc + 1] > fl.cell_start[sc]:
                j = order[fl.cell_start[sc]]
                rear = F[j, F_OFF] - F[j, F_LEN]
                if rear < 0.0 and j != self_id:
                    fl.ok[n] = OBJ_VEHICLE
                    fl.oi[n] = j
                    fl.og[n] = d0 + length + rear
                    fl.ov[n] = F[j, F_V]
                    fl.ob[n] = net.par[fl.I[j, I_KIND], P_BMAX]
                    n += 1
                    extra += 1
        if tl < 0:
            if with_lines and n - extra < kmax and d0 + length <= lookahead:
                fl.ok[n] = OBJ_LANE_END
                fl.oi[n] = -1
                fl.og[n] = d0 + length
                fl.ov[n] = 0.0
                fl.ob[n] = 1.0
                n += 1
            break
        d0 += length
        if d0 > lookahead:
            break
        c = net.link_cell0[nl] + tl
        link = nl
        lane = tl
        pi += 1
        jv = fl.cell_start[c]
        jv_end = fl.cell_start[c + 1]
        jl = net.line_start[link]
        jl_end = net.line_start[link + 1]
    # straddlers can land out of order; restore gap order
    for a in range(1, n):
        k, g, sv, sb, si = fl.ok[a], fl.og[a], fl.ov[a], fl.ob[a], fl.oi[a]
        m = a - 1
        while m >= 0 and fl.og[m] > g:
            fl.ok[m + 1] = fl.ok[m]
            fl.og[m + 1] = fl.og[m]
            fl.ov[m + 1] = fl.ov[m]
            fl.ob[m + 1] = fl.ob[m]
            fl.oi[m + 1] = fl.oi[m]
            m -= 1
        fl.ok[m + 1] = k
        fl.og[m + 1] = g
        fl.ov[m + 1] = sv
        fl.ob[m + 1] = sb
        fl.oi[m + 1] = si
    if n > kmax:
        n = kmax
    if with_lines and n >= kmax and n > 0:
        kind, g = next_control(net, fl, cell, off, pidx, path, v, b_comf, cleared, lookahead, fl.og[n - 1])
        if kind >= 0:
            fl.ok[n] = kind
            fl.oi[n] = -1
            fl.og[n] = g
            fl.ov[n] = 0.0
            fl.ob[n] = 1.0
            n += 1
    return n


@njit(cache=True)
def follower(net, fl, self_id, cell, front, rear):
    """Nearest vehicle behind a body spanning [rear, front] in ``cell``.

    Returns (vehicle id or -1, gap from its front to our rear). Searches back
    through predecessor lanes up to LOOKBACK.
    """
    F = fl.F
    k = lower_bound(fl, cell, front) - 1
    while k >= fl.cell_start[cell]:
        j = fl.order[k]
        if j != self_id:
            return j, rear - F[j, F_OFF]
        k -= 1
    d = rear
    c = cell
    while True:
        pc = net.pred_cell[c]
        if pc < 0:
            return -1, np.inf
        plen = net.link_len[net.cell_link[pc]]
        k = fl.cell_start[pc + 1] - 1
        while k >= fl.cell_start[pc]:
            j = fl.order[k]
            if j != self_id:
                return j, d + plen - F[j, F_OFF]
            k -= 1
        d += plen
        if d > LOOKBACK:
            return -1, np.inf
        c = pc


@njit(cache=True)
def desired_gap(net, fl, i, v):
    kind = fl.I[i, I_KIND]
    p = net.par[kind]
    if kind == AV:
        return p[P_STANDSTILL] + p[P_TGAP] * v
    return w74_distance(v, p[P_STANDSTILL], fl.F[i, F_BXT])


@njit(cache=True)
def accel_limits(net, fl, i, link):
    """(curve maximum, free-driving acceleration) of vehicle i on ``link``."""
    F = fl.F
    kind = fl.I[i, I_KIND]
    v = F[i, F_V]
    amax = curve_value(v, net.grid, net.curves[kind, 0], net.curves[kind, 1], net.curves[kind, 2], F[i, F_PCT])
    vdes = F[i, F_FAC] * net.link_limit[link]
    return amax, free_accel(v, vdes, amax, net.par[kind, P_BCOMF], net.dt)


@njit(cache=True)
def accel_in(net, fl, i, cell, off):
    """Commanded acceleration of vehicle i if its front were at (cell, off)."""
    F, I = fl.F, fl.I
    kind = I[i, I_KIND]
    p = net.par[kind]
    v = F[i, F_V]
    link = net.cell_link[cell]
    amax, a_free = accel_limits(net, fl, i, link)
    n = scan(net, fl, i, cell, off, I[i, I_PIDX], I[i, I_PATH], int(p[P_PERCEPTION]), True,
             v, p[P_BCOMF], I[i, I_CLEARED], LOOKAHEAD)
    a = a_free
    model = int(p[P_MODEL])
    for q in range(n):
        aq = object_accel(model, v, fl.ok[q], fl.og[q], fl.ov[q], fl.ob[q], F[i, F_BXT], p, amax, a_free, net.dt)
        if aq < a:
            a = aq
    return a


@njit(cache=True)
def lead_vehicle(net, fl, i, cell, off, lookahead):
    """(found, gap, speed, b_max) of the first vehicle ahead along i's path."""
    F, I = fl.F, fl.I
    n = scan(net, fl, i, cell, off, I[i, I_PIDX], I[i, I_PATH], 1, False, F[i, F_V], 0.0, -1, lookahead)
    if n == 0:
        return False, np.inf, 0.0, 0.0
    return True, fl.og[0], fl.ov[0], fl.ob[0]


# --- phases -----------------------------------------------------------------


@njit(cache=True)
def admit_arrivals(net, fl, step):
    I = fl.I
    for inp in range(fl.in_head.shape[0]):
        ptr = fl.arrive_ptr[inp]
        end = fl.in_start[inp + 1]
        while ptr < end and I[fl.in_ids[ptr], I_ARRIVE] <= step:
            ptr += 1
            fl.ctr[C_ARRIVED] += 1
        fl.arrive_ptr[inp] = ptr


@njit(cache=True)
def try_insert(net, fl, i, link, lane, step):
    """Insert vehicle i with its front at offset 0 of (link, lane) if safe."""
    F, I = fl.F, fl.I
    cell = net.link_cell0[link] + lane
    if fl.blocked[cell] == step:
        return False
    kind = I[i, I_KIND]
    p = net.par[kind]
    vdes = F[i, F_FAC] * net.link_limit[link]
    F[i, F_V] = vdes
    found, gap, vl, bl = lead_vehicle(net, fl, i, cell, 0.0, LOOKAHEAD)
    if found and gap < p[P_STANDSTILL]:
        return False
    n = scan(net, fl, i, cell, 0.0, 0, I[i, I_PATH], int(p[P_PERCEPTION]), True,
             vdes, p[P_BCOMF], -1, LOOKAHEAD)
    v0 = vdes
    for q in range(n):
        vs = safe_speed(fl.og[q], fl.ov[q], p[P_BMAX], fl.ob[q], net.dt)
        if fl.ok[q] != OBJ_VEHICLE:
            # lines: the law sees them shifted by the margin, stay under its stopping speed too
            vs = safe_speed(max(fl.og[q] - 0.5, 0.0), 0.0, p[P_BMAX], 1.0, net.dt)
        if vs < v0:
            v0 = vs
    if found and gap < desired_gap(net, fl, i, vl) and vl < v0:
        v0 = vl
    j, gf = follower(net, fl, i, cell, 0.0, -F[i, F_LEN])
    if j >= 0:
        pf = net.par[I[j, I_KIND]]
        if gf < 0.0 or F[j, F_V] > safe_speed(gf, v0, pf[P_BMAX], p[P_BMAX], net.dt):
            return False
    F[i, F_OFF] = 0.0
    F[i, F_V] = v0
    F[i, F_A] = 0.0
    F[i, F_STOPT] = 0.0
    F[i, F_LCT] = 0.0
    F[i, F_DIST] = 0.0
    I[i, I_LINK] = link
    I[i, I_LANE] = lane
    I[i, I_PIDX] = 0
    I[i, I_STATUS] = PRESENT
    I[i, I_CLEARED] = -1
    I[i, I_ENTER] = step
    fl.present[fl.ctr[C_PRESENT]] = i
    fl.ctr[C_PRESENT] += 1
    fl.ctr[C_INSERTED] += 1
    fl.blocked[cell] = step
    return True


@njit(cache=True)
def insert_queued(net, fl, step):
    F, I = fl.F, fl.I
    inserted = 0
    for inp in range(fl.in_head.shape[0]):
        link = net.input_link[inp]
        nlanes = net.link_lanes[link]
        while fl.in_head[inp] < fl.arrive_ptr[inp]:
            i = fl.in_ids[fl.in_head[inp]]
            ok = False
            if net.input_lane[inp] >= 0:
                ok = try_insert(net, fl, i, link, net.input_lane[inp], step)
            else:
                path = I[i, I_PATH]
                nl = net.path_links[path, 1] if net.path_n[path] > 1 else -1
                # preference: lanes continuing along the path, then the larger gap
                best_rank = np.empty(nlanes)
                for lane in range(nlanes):
                    cell = net.link_cell0[link] + lane
                    found, gap, vl, bl = lead_vehicle(net, fl, i, cell, 0.0, LOOKAHEAD)
                    score = min(gap, 1e6)
                    if nl >= 0 and net.conn[cell, nl] < 0:
                        score -= 2e6
                    best_rank[lane] = score
                tried = np.zeros(nlanes, dtype=np.bool_)
                for _ in range(nlanes):
                    pick = -1
                    for lane in range(nlanes):
                        if not tried[lane] and (pick < 0 or best_rank[lane] > best_rank[pick]):
                            pick = lane
                    tried[pick] = True
                    if try_insert(net, fl, i, link, pick, step):
                        ok = True
                        break
            if not ok:
                break
            fl.in_head[inp] += 1
            inserted += 1
    return inserted


@njit(cache=True)
def yield_to(net, fl, i, c):
    """Cooperating follower i treats changer c as a leader, braking at most b_accept."""
    F, I = fl.F, fl.I
    if I[c, I_STATUS] != PRESENT:
        return
    link = I[i, I_LINK]
    pidx = I[i, I_PIDX]
    path = I[i, I_PATH]
    if I[c, I_LINK] == link:
        gap = F[c, F_OFF] - F[c, F_LEN] - F[i, F_OFF]
    elif pidx + 1 < net.path_n[path] and net.path_links[path, pidx + 1] == I[c, I_LINK]:
        gap = net.link_len[link] - F[i, F_OFF] + F[c, F_OFF] - F[c, F_LEN]
    else:
        return
    if gap < 0.0 or gap > LOOKAHEAD:
        return
    p = net.par[I[i, I_KIND]]
    amax, a_free = accel_limits(net, fl, i, link)
    a = object_accel(int(p[P_MODEL]), F[i, F_V], OBJ_VEHICLE, gap, F[c, F_V], net.par[I[c, I_KIND], P_BMAX],
                     F[i, F_BXT], p, amax, a_free, net.dt)
    a = max(a, -p[P_BACCEPT])
    if a < fl.a_new[i]:
        fl.a_new[i] = a


@njit(cache=True)
def decide(net, fl, i):
    """Phase 3 for one vehicle: acceleration and lane-change intent."""
    F, I = fl.F, fl.I
    kind = I[i, I_KIND]
    p = net.par[kind]
    link = I[i, I_LINK]
    lane = I[i, I_LANE]
    cell = net.link_cell0[link] + lane
    off = F[i, F_OFF]
    v = F[i, F_V]
    fl.target[i] = -1
    fl.a_new[i] = accel_in(net, fl, i, cell, off)
    if fl.yield_now[i] > 0:
        yield_to(net, fl, i, fl.yield_now[i] - 1)
    nlanes = net.link_lanes[link]
    if nlanes < 2:
        return
    path = I[i, I_PATH]
    pidx = I[i, I_PIDX]
    has_next = pidx + 1 < net.path_n[path]
    nl = net.path_links[path, pidx + 1] if has_next else -1
    mandatory = has_next and net.conn[cell, nl] < 0
    if not mandatory and F[i, F_LCT] < p[P_COOLDOWN] - 1e-9:
        return
    goal = -1
    if mandatory:
        for l in range(nlanes):
            if net.conn[net.link_cell0[link] + l, nl] >= 0 and (goal < 0 or abs(l - lane) < abs(goal - lane)):
                goal = l
        if goal < 0:
            return
    vdes = F[i, F_FAC] * net.link_limit[link]
    has_l, gap_l, v_l, b_l = lead_vehicle(net, fl, i, cell, off, LOOKAHEAD)
    own_ach = lane_speed(vdes, has_l, gap_l, v_l)
    best = -1
    best_ach = -np.inf
    t_has, t_gap, t_v, t_b = False, np.inf, 0.0, 0.0
    for dl in (-1, 1):
        cl = lane + dl
        if cl < 0 or cl >= nlanes:
            continue
        ccell = net.link_cell0[link] + cl
        if mandatory:
            if abs(cl - goal) >= abs(lane - goal):
                continue
        elif has_next and net.conn[ccell, nl] < 0:
            continue
        h, g, vv, bb = lead_vehicle(net, fl, i, ccell, off, LOOKAHEAD)
        ach = lane_speed(vdes, h, g, vv)
        if ach > best_ach:
            best, best_ach = cl, ach
            t_has, t_gap, t_v, t_b = h, g, vv, bb
    if best < 0:
        return
    ccell = net.link_cell0[link] + best
    scale = urgency_scale(net.link_len[link] - off) if mandatory else 1.0
    j, gf = follower(net, fl, i, ccell, off, off - F[i, F_LEN])
    has_f = j >= 0
    vf = 0.0
    sf = 0.0
    baf = 0.0
    bmf = 1.0
    if has_f:
        pf = net.par[I[j, I_KIND]]
        vf = F[j, F_V]
        sf = pf[P_STANDSTILL]
        baf = pf[P_BACCEPT]
        bmf = pf[P_BMAX]
    verdict = lane_change_core(
        v, own_ach, best_ach, mandatory, scale, desired_gap(net, fl, i, v), p[P_BMAX], net.dt,
        t_has, t_gap, t_v, t_b, has_f, gf, vf, sf, baf, bmf,
    )
    if verdict == CHANGE:
        fl.target[i] = best
        fl.a_new[i] = accel_in(net, fl, i, ccell, off)
    elif verdict == BLOCKED_FOLLOWER and has_f and gf >= scale * sf and net.par[I[j, I_KIND], P_COOP] > 0.0:
        # holding back only helps when the follower is already far enough behind us;
        # a follower that is too close has to pass and the gap behind it is taken instead
        fl.yield_next[j] = i + 1


@njit(cache=True)
def apply_changes(net, fl):
    """Phase 4: apply intents in ascending id, re-checking against earlier changers."""
    F, I = fl.F, fl.I
    n = fl.ctr[C_PRESENT]
    m = 0
    for k in range(n):
        if fl.target[fl.present[k]] >= 0:
            m += 1
    if m == 0:
        return 0
    ids = np.empty(m, dtype=np.int64)
    m = 0
    for k in range(n):
        i = fl.present[k]
        if fl.target[i] >= 0:
            ids[m] = i
            m += 1
    ids.sort()
    applied = np.empty(m, dtype=np.int64)
    na = 0
    for x in range(m):
        i = ids[x]
        link = I[i, I_LINK]
        tl = fl.target[i]
        ok = True
        bi = net.par[I[i, I_KIND], P_BMAX]
        tcell = net.link_cell0[link] + tl
        for y in range(na):
            j = applied[y]
            jl = I[j, I_LINK]
            jcell = net.link_cell0[jl] + I[j, I_LANE]
            # earlier changers in the target lane or one link up/downstream of it
            if jcell == tcell:
                ahead = F[j, F_OFF] >= F[i, F_OFF]
                dj, di = F[j, F_OFF], F[i, F_OFF]
            elif net.conn[tcell, jl] == I[j, I_LANE]:
                ahead = True
                dj, di = net.link_len[link] + F[j, F_OFF], F[i, F_OFF]
            elif net.conn[jcell, link] == tl:
                ahead = False
                dj, di = F[j, F_OFF], net.link_len[jl] + F[i, F_OFF]
            else:
                continue
            bj = net.par[I[j, I_KIND], P_BMAX]
            if ahead:
                gap = dj - F[j, F_LEN] - di
                if gap < 0.0 or F[i, F_V] > safe_speed(gap, F[j, F_V], bi, bj, net.dt):
                    ok = False
            else:
                gap = di - F[i, F_LEN] - dj
                if gap < 0.0 or F[j, F_V] > safe_speed(gap, F[i, F_V], bj, bi, net.dt):
                    ok = False
            if not ok:
                break
        if ok:
            I[i, I_LANE] = tl
            F[i, F_LCT] = 0.0
            applied[na] = i
            na += 1
        else:
            # fall back to the own-lane command
            fl.a_new[i] = accel_in(net, fl, i, net.link_cell0[link] + I[i, I_LANE], F[i, F_OFF])
        fl.target[i] = -1
    fl.ctr[C_CHANGES] += na
    return na


@njit(cache=True)
def recheck_leaders(net, fl):
    """After lane changes every vehicle re-checks its immediate leader."""
    F, I = fl.F, fl.I
    for k in range(fl.ctr[C_PRESENT]):
        i = fl.present[k]
        link = I[i, I_LINK]
        cell = net.link_cell0[link] + I[i, I_LANE]
        found, gap, vl, bl = lead_vehicle(net, fl, i, cell, F[i, F_OFF], LOOKAHEAD)
        if not found:
            continue
        kind = I[i, I_KIND]
        p = net.par[kind]
        amax, a_free = accel_limits(net, fl, i, link)
        a = object_accel(int(p[P_MODEL]), F[i, F_V], OBJ_VEHICLE, gap, vl, bl, F[i, F_BXT], p, amax, a_free, net.dt)
        if a < fl.a_new[i]:
            fl.a_new[i] = a


@njit(cache=True)
def integrate(net, fl, step):
    """Phases 5-7: kinematics, link transitions, stop dwell, removal."""
    F, I = fl.F, fl.I
    dt = net.dt
    n = fl.ctr[C_PRESENT]
    n_exit = 0
    for k in range(n):
        i = fl.present[k]
        p = net.par[I[i, I_KIND]]
        a = fl.a_new[i]
        if fl.yield_now[i] and a > 0.0:
            a = 0.0
        a = finalize_accel(a, F[i, F_V], p[P_BMAX], dt)
        v = F[i, F_V] + a * dt
        if v < 0.0:
            v = 0.0
        F[i, F_A] = a
        F[i, F_V] = v
        F[i, F_OFF] += v * dt
        F[i, F_DIST] += v * dt
        link = I[i, I_LINK]
        while F[i, F_OFF] > net.link_len[link]:
            path = I[i, I_PATH]
            pidx = I[i, I_PIDX]
            if pidx + 1 >= net.path_n[path]:
                I[i, I_STATUS] = EXITED
                I[i, I_EXIT] = step
                break
            nl = net.path_links[path, pidx + 1]
            tl = net.conn[net.link_cell0[link] + I[i, I_LANE], nl]
            if tl < 0:
                F[i, F_OFF] = net.link_len[link]
                F[i, F_V] = 0.0
                fl.ctr[C_WALL] += 1
                break
            F[i, F_OFF] -= net.link_len[link]
            link = nl
            I[i, I_LINK] = nl
            I[i, I_LANE] = tl
            I[i, I_PIDX] = pidx + 1
        if I[i, I_STATUS] == EXITED:
            fl.exited[n_exit] = i
            n_exit += 1
            continue
        # stop-sign dwell
        off = F[i, F_OFF]
        lane = I[i, I_LANE]
        at_line = -1
        for q in range(net.line_start[link], net.line_start[link + 1]):
            if net.line_kind[q] != LINE_STOP or q == I[i, I_CLEARED]:
                continue
            if net.line_lane[q] >= 0 and net.line_lane[q] != lane:
                continue
            if net.line_pos[q] >= off:
                at_line = q
                break
        if at_line >= 0 and net.line_pos[at_line] - off <= STOP_RADIUS and F[i, F_V] < STOP_SPEED:
            F[i, F_STOPT] += dt
            if F[i, F_STOPT] >= STOP_DWELL - DWELL_EPS:
                I[i, I_CLEARED] = at_line
                F[i, F_STOPT] = 0.0
        else:
            F[i, F_STOPT] = 0.0
        F[i, F_LCT] += dt
    if n_exit:
        m = 0
        for k in range(n):
            i = fl.present[k]
            if I[i, I_STATUS] == PRESENT:
                fl.present[m] = i
                m += 1
        fl.ctr[C_PRESENT] = m
        fl.ctr[C_EXITED] += n_exit
    return n_exit


@njit(cache=True)
def check_invariants(net, fl, step):
    F, I = fl.F, fl.I
    for k in range(fl.ctr[C_PRESENT]):
        i = fl.present[k]
        cell = net.link_cell0[I[i, I_LINK]] + I[i, I_LANE]
        found, gap, vl, bl = lead_vehicle(net, fl, i, cell, F[i, F_OFF], CHECK_RANGE)
        if found and gap < -GAP_TOL:
            # lead_vehicle leaves the object in slot 0
            fl.ctr[C_ERROR] = ERR_GAP
            fl.ctr[C_ERR_STEP] = step
            fl.ctr[C_ERR_A] = i
            fl.ctr[C_ERR_B] = fl.oi[0]
            return False
    queued = 0
    for inp in range(fl.in_head.shape[0]):
        queued += fl.arrive_ptr[inp] - fl.in_head[inp]
    if fl.ctr[C_ARRIVED] != fl.ctr[C_PRESENT] + fl.ctr[C_EXITED] + queued:
        fl.ctr[C_ERROR] = ERR_CONSERVATION
        fl.ctr[C_ERR_STEP] = step
        fl.ctr[C_ERR_A] = -1
        fl.ctr[C_ERR_B] = -1
        return False
    return True


# --- metric accumulation ------------------------------------------------------


@njit(cache=True)
def rate(coef, q, v, a):
    pa = a if a > 0.0 else 0.0
    return coef[q, 0] + coef[q, 1] * v + coef[q, 2] * v * v * v + coef[q, 3] * pa * v


@njit(cache=True)
def in_region(sc, link, off):
    if sc.full:
        return True
    pos = sc.reg_pos[link]
    if np.isnan(pos):
        return False
    return pos - sc.reg_cap[link] <= off <= pos


@njit(cache=True)
def accumulate_step(step, n, ids, lk, ln, of, vv, aa, ll, ff, cell_start, exited, n_exited,
                    link_cell0, link_lanes, link_limit, sc, dt, ac):
    """Fold one step of samples into the accumulators.

    Samples arrive sorted by (cell, offset, id) with ``cell_start`` indexing
    them. ``exited`` lists vehicles removed this step (they carry no sample).
    """
    enter_q, exit_q, spacing = sc.qc[0], sc.qc[1], sc.qc[2]
    for x in range(n_exited):
        i = exited[x]
        if ac.inprev[i]:
            ac.completed[i] = 1
        ac.inprev[i] = 0
    for k in range(n):
        i = ids[k]
        v = vv[k]
        if v < enter_q:
            ac.qflag[i] = 1
        elif v > exit_q:
            ac.qflag[i] = 0
        inside = in_region(sc, lk[k], of[k])
        if not inside:
            if ac.inprev[i]:
                ac.completed[i] = 1
            ac.inprev[i] = 0
            continue
        if not ac.seen[i]:
            ac.seen[i] = 1
            ac.armed[i] = 1
        ac.inprev[i] = 1
        ac.n_in[i] += 1
        for q in range(4):
            ac.qty[i, q] += rate(sc.coef, q, v, aa[k]) * dt / 3600.0
        ac.theo[i] += v * dt / (ff[k] * link_limit[lk[k]])
        if v < STOP_SPEED:
            ac.n_stop[i] += 1
        if ac.armed[i]:
            if v < 0.2:
                ac.stops[i] += 1
                ac.armed[i] = 0
        elif v > 1.0:
            ac.armed[i] = 1
    for qa in range(sc.q_link.shape[0]):
        link = sc.q_link[qa]
        pos = sc.q_pos[qa]
        cap = sc.q_cap[qa]
        best = 0.0
        for lane in range(link_lanes[link]):
            c = link_cell0[link] + lane
            k = cell_start[c + 1] - 1
            head = -1
            while k >= cell_start[c]:
                o = of[k]
                if o < pos - cap:
                    break
                if o <= pos and ac.qflag[ids[k]]:
                    head = k
                    break
                k -= 1
            if head < 0:
                continue
            last = head
            k = head - 1
            while k >= cell_start[c]:
                if (of[last] - ll[last]) - of[k] <= spacing and ac.qflag[ids[k]]:
                    last = k
                    k -= 1
                else:
                    break
            length = pos - (of[last] - ll[last])
            if length > best:
                best = length
        ac.qseries[step, qa] = best


@njit(cache=True)
def compact_samples(net, fl):
    F, I = fl.F, fl.I
    n = fl.ctr[C_PRESENT]
    for k in range(n):
        i = fl.present[k]
        fl.c_link[k] = I[i, I_LINK]
        fl.c_lane[k] = I[i, I_LANE]
        fl.c_off[k] = F[i, F_OFF]
        fl.c_v[k] = F[i, F_V]
        fl.c_a[k] = F[i, F_A]
        fl.c_len[k] = F[i, F_LEN]
        fl.c_fac[k] = F[i, F_FAC]
    return n


# --- driver loop ----------------------------------------------------------------


@njit(cache=True)
def run_steps(net, fl, sc, ac, s0, s1):
    """Advance from step s0 to s1 (exclusive). Returns False on an invariant violation."""
    dt = net.dt
    for step in range(s0, s1):
        update_signals(net, fl, step * dt)
        admit_arrivals(net, fl, step)
        if insert_queued(net, fl, step) > 0:
            sort_snapshot(net, fl)
        for k in range(fl.ctr[C_PRESENT]):
            decide(net, fl, fl.present[k])
        if apply_changes(net, fl) > 0:
            sort_snapshot(net, fl)
            recheck_leaders(net, fl)
        n_exit = integrate(net, fl, step)
        sort_snapshot(net, fl)
        if not check_invariants(net, fl, step):
            return False
        n = compact_samples(net, fl)
        accumulate_step(step, n, fl.present, fl.c_link, fl.c_lane, fl.c_off, fl.c_v, fl.c_a, fl.c_len, fl.c_fac,
                        fl.cell_start, fl.exited, n_exit, net.link_cell0, net.link_lanes, net.link_limit, sc, dt, ac)
        for k in range(fl.ctr[C_PRESENT]):
            i = fl.present[k]
            fl.yield_now[i] = fl.yield_next[i]
            fl.yield_next[i] = 0
        for x in range(n_exit):
            fl.yield_now[fl.exited[x]] = 0
    return True


@njit(cache=True)
def accumulate_log(step_start, ids, lk, ln, of, vv, aa, ll, ff, exit_start, exit_ids,
                   link_cell0, link_lanes, link_limit, ncell, sc, dt, ac):
    """Replay a recorded log (records sorted by step, cell, offset, id)."""
    n_steps = step_start.shape[0] - 1
    cs = np.zeros(ncell + 1, dtype=np.int64)
    for step in range(n_steps):
        a = step_start[step]
        b = step_start[step + 1]
        cs[:] = 0
        for k in range(a, b):
            cs[link_cell0[lk[k]] + ln[k] + 1] += 1
        for c in range(ncell):
            cs[c + 1] += cs[c]
        ea = exit_start[step]
        eb = exit_start[step + 1]
        accumulate_step(step, b - a, ids[a:b], lk[a:b], ln[a:b], of[a:b], vv[a:b], aa[a:b], ll[a:b], ff[a:b],
                        cs, exit_ids[ea:eb], eb - ea, link_cell0, link_lanes, link_limit, sc, dt, ac)
