"""Penetration-rate sweeps: run the replication grid, average over seeds, report trends.

A sweep is scenarios x durations x penetration grid x seeds. Every cell of a
(scenario, duration) block uses the same seed list, so the only thing that
changes between penetration cells is the fleet composition (common random
numbers). Raw results are sorted by cell before anything is written, which
makes the output independent of worker count and completion order.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .engine import SimConfig, Simulation, SimulationError
from .metrics import (
    RESULT_COLUMNS, NodeEvaluationResult, format_penetration, format_value, per_vehicle, percent_benefit, result_row,
)
from .net import Network, load_scenario

DEFAULT_GRID = (0.0, 0.20, 0.35, 0.50, 0.65, 0.80, 1.0)
DEFAULT_SEEDS = tuple(range(1, 11))
DEFAULT_DURATIONS = (500.0, 3600.0)
NODE_SCOPE_MAX_S = 500.0

AGGREGATE_COLUMNS = (
    "route", "duration_s", "scope", "penetration_pct", "veh_count_mean", "fuel_per_veh_mean",
    "pct_fuel_benefit", "pct_mobility_change", "avg_queue_m_mean", "max_queue_m_mean", "avg_delay_s_mean",
    "avg_stopped_delay_s_mean", "co_g_per_veh", "nox_g_per_veh", "voc_g_per_veh", "total_stops_mean",
)

# metric name -> (result field, True when larger is better)
TREND_METRICS = {
    "fuel_per_veh": ("fuel_per_veh_gal", False),
    "veh_count": ("vehicle_count", True),
    "avg_queue_m": ("avg_queue_m", False),
    "max_queue_m": ("max_queue_m", False),
    "avg_delay_s": ("avg_delay_s", False),
    "avg_stopped_delay_s": ("avg_stopped_delay_s", False),
    "co_g_per_veh": ("co_g_per_veh", False),
    "nox_g_per_veh": ("nox_g_per_veh", False),
    "voc_g_per_veh": ("voc_g_per_veh", False),
    "total_stops": ("total_stops", False),
}
VERDICTS = ("improving", "degrading", "flat", "non-monotone-improving")


class SweepError(RuntimeError):
    """A replication failed; ``cell`` names it."""

    def __init__(self, message: str, cell: "Cell"):
        super().__init__(message)
        self.cell = cell


def default_scope(duration: float) -> str:
    return "node" if duration <= NODE_SCOPE_MAX_S else "full"


@dataclass(frozen=True)
class SweepSpec:
    scenarios: tuple[str, ...] = ("route19",)
    penetrations: tuple[float, ...] = DEFAULT_GRID
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    durations: tuple[float, ...] = DEFAULT_DURATIONS
    scopes: dict = field(default_factory=dict)  # duration -> "node" | "full"; missing: default_scope
    dt: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(str(s) for s in self.scenarios))
        object.__setattr__(self, "penetrations", tuple(float(p) for p in self.penetrations))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "durations", tuple(float(d) for d in self.durations))
        object.__setattr__(self, "scopes", {float(k): str(v) for k, v in dict(self.scopes).items()})
        g = self.penetrations
        if not self.scenarios:
            raise ValueError("at least one scenario is required")
        if not g or any(not 0.0 <= p <= 1.0 for p in g):
            raise ValueError("penetration grid values must lie in [0, 1]")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError("penetration grid must be strictly increasing")
        if 0.0 not in g:
            raise ValueError("penetration grid must contain 0")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.durations or any(d <= 0 for d in self.durations):
            raise ValueError("durations must be positive")
        for d, s in self.scopes.items():
            if s not in ("node", "full"):
                raise ValueError(f"scope for {d:g} s must be 'node' or 'full', not {s!r}")

    def scope_for(self, duration: float) -> str:
        return self.scopes.get(float(duration), default_scope(duration))

    def cells(self) -> list["Cell"]:
        out = []
        for sc in self.scenarios:
            for d in self.durations:
                for p in self.penetrations:
                    for s in self.seeds:
                        out.append(Cell(sc, d, self.scope_for(d), p, s, self.dt))
        return out

    @property
    def n_runs(self) -> int:
        return len(self.scenarios) * len(self.durations) * len(self.penetrations) * len(self.seeds)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        known = {"scenarios", "penetrations", "seeds", "durations", "scopes", "dt"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown sweep spec fields: {', '.join(sorted(extra))}")
        kw = dict(d)
        if "scopes" in kw:
            kw["scopes"] = {float(k): v for k, v in kw["scopes"].items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scopes"] = {format_value(k): v for k, v in sorted(self.scopes.items())}
        return d


@dataclass(frozen=True, order=True)
class Cell:
    scenario: str
    duration: float
    scope: str
    penetration: float
    seed: int
    dt: float = 0.1


@dataclass(frozen=True)
class RunResult:
    cell: Cell
    route: str  # scenario name as recorded in the scenario file
    result: NodeEvaluationResult


@lru_cache(maxsize=16)
def _network(scenario: str) -> Network:
    return load_scenario(scenario)


def run_cell(cell: Cell) -> RunResult:
    net = _network(cell.scenario)
    cfg = SimConfig(duration=cell.duration, penetration=cell.penetration, seed=cell.seed, dt=cell.dt,
                    scope=cell.scope)
    out = Simulation(net, cfg).run()
    return RunResult(cell, net.name, out.evaluation)


def _describe(cell: Cell) -> str:
    return (f"{cell.scenario} duration={cell.duration:g}s scope={cell.scope} "
            f"penetration={format_penetration(cell.penetration)}% seed={cell.seed}")


def _sort_key(spec_order: dict[str, int]):
    return lambda r: (spec_order[r.cell.scenario], r.cell.duration, r.cell.penetration, r.cell.seed)


def run_sweep(spec: SweepSpec, workers: int = 1,
              progress: Callable[[int, int, RunResult], None] | None = None) -> list[RunResult]:
    """Every replication of ``spec``; output order is canonical, not completion order."""
    for sc in spec.scenarios:
        _network(sc)  # fail early on a bad scenario, before any run
    cells = spec.cells()
    results: list[RunResult] = []

    def done(r: RunResult) -> None:
        results.append(r)
        if progress is not None:
            progress(len(results), len(cells), r)

    if workers <= 1:
        for c in cells:
            try:
                done(run_cell(c))
            except (SimulationError, ValueError) as e:
                raise SweepError(f"run failed at {_describe(c)}: {e}", c) from e
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {ex.submit(run_cell, c): c for c in cells}
            for f in as_completed(futs):
                c = futs[f]
                try:
                    done(f.result())
                except (SimulationError, ValueError) as e:
                    for g in futs:
                        g.cancel()
                    raise SweepError(f"run failed at {_describe(c)}: {e}", c) from e
    order = {s: i for i, s in enumerate(spec.scenarios)}
    results.sort(key=_sort_key(order))
    return results


# --- raw results ----------------------------------------------------------------


def _block(r: RunResult) -> tuple:
    return (r.route, r.cell.duration, r.cell.scope)


def raw_rows(results: Sequence[RunResult]) -> list[dict[str, str]]:
    """One results-CSV row per run; benefit is against the same seed's 0% run."""
    base = {}
    for r in results:
        if r.cell.penetration == 0.0:
            base[_block(r) + (r.cell.seed,)] = r.result.fuel_per_veh_gal
    rows = []
    for r in results:
        b = base.get(_block(r) + (r.cell.seed,))
        pct = percent_benefit(b, r.result.fuel_per_veh_gal) if b is not None and b > 0 else None
        rows.append(result_row(r.route, r.cell.duration, r.cell.penetration, r.cell.seed, r.result, pct))
    return rows


def write_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


# --- aggregation ------------------------------------------------------------------


@dataclass(frozen=True)
class AggregateRow:
    route: str
    duration_s: float
    scope: str
    penetration: float
    n_seeds: int
    veh_count_mean: float
    fuel_per_veh_mean: float
    pct_fuel_benefit: float | None
    pct_mobility_change: float | None
    avg_queue_m_mean: float
    max_queue_m_mean: float
    avg_delay_s_mean: float
    avg_stopped_delay_s_mean: float
    co_g_per_veh: float
    nox_g_per_veh: float
    voc_g_per_veh: float
    total_stops_mean: float
    total_fuel_mean: float = 0.0
    # per-seed values of every trend metric, in seed order; not part of the CSV
    samples: dict = field(default_factory=dict, compare=False, repr=False)

    def csv_row(self) -> dict[str, str]:
        return {
            "route": self.route,
            "duration_s": _fmt_duration(self.duration_s),
            "scope": self.scope,
            "penetration_pct": format_penetration(self.penetration),
            "veh_count_mean": format_value(self.veh_count_mean),
            "fuel_per_veh_mean": format_value(self.fuel_per_veh_mean),
            "pct_fuel_benefit": format_value(self.pct_fuel_benefit),
            "pct_mobility_change": format_value(self.pct_mobility_change),
            "avg_queue_m_mean": format_value(self.avg_queue_m_mean),
            "max_queue_m_mean": format_value(self.max_queue_m_mean),
            "avg_delay_s_mean": format_value(self.avg_delay_s_mean),
            "avg_stopped_delay_s_mean": format_value(self.avg_stopped_delay_s_mean),
            "co_g_per_veh": format_value(self.co_g_per_veh),
            "nox_g_per_veh": format_value(self.nox_g_per_veh),
            "voc_g_per_veh": format_value(self.voc_g_per_veh),
            "total_stops_mean": format_value(self.total_stops_mean),
        }

    def value(self, metric: str) -> float:
        return {
            "fuel_per_veh": self.fuel_per_veh_mean,
            "veh_count": self.veh_count_mean,
            "avg_queue_m": self.avg_queue_m_mean,
            "max_queue_m": self.max_queue_m_mean,
            "avg_delay_s": self.avg_delay_s_mean,
            "avg_stopped_delay_s": self.avg_stopped_delay_s_mean,
            "co_g_per_veh": self.co_g_per_veh,
            "nox_g_per_veh": self.nox_g_per_veh,
            "voc_g_per_veh": self.voc_g_per_veh,
            "total_stops": self.total_stops_mean,
            "pct_fuel_benefit": self.pct_fuel_benefit,
        }[metric]


def _fmt_duration(d: float) -> str:
    return format_value(int(round(d))) if float(d).is_integer() else format_value(d)


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def _change(base: float, x: float) -> float | None:
    if base == x:
        return 0.0
    if not base > 0:
        return None
    return 100.0 * (x - base) / base


def aggregate(results: Iterable[RunResult]) -> list[AggregateRow]:
    """Seed means per (route, duration, scope, penetration), with benefits against the 0% cell."""
    results = sorted(results, key=lambda r: (_block(r), r.cell.penetration, r.cell.seed))
    cells: dict[tuple, list[RunResult]] = {}
    for r in results:
        cells.setdefault(_block(r) + (r.cell.penetration,), []).append(r)
    seeds_of: dict[tuple, set] = {}
    for key, rs in cells.items():
        seeds = [r.cell.seed for r in rs]
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"duplicate seeds in cell {key}")
        seeds_of.setdefault(key[:3], set()).update(seeds)
    rows = []
    baseline: dict[tuple, AggregateRow] = {}
    for key in sorted(cells, key=lambda k: (k[0], k[1], k[2], k[3])):
        rs = cells[key]
        want = seeds_of[key[:3]]
        if {r.cell.seed for r in rs} != want:
            missing = sorted(want - {r.cell.seed for r in rs})
            raise ValueError(f"cell {key} is missing seeds {missing}")
        ev = [r.result for r in rs]
        samples = {m: tuple(float(getattr(e, f)) for e in ev) for m, (f, _) in TREND_METRICS.items()}
        row = AggregateRow(
            route=key[0], duration_s=key[1], scope=key[2], penetration=key[3], n_seeds=len(rs),
            veh_count_mean=_mean(samples["veh_count"]),
            fuel_per_veh_mean=_mean(samples["fuel_per_veh"]),
            pct_fuel_benefit=None, pct_mobility_change=None,
            avg_queue_m_mean=_mean(samples["avg_queue_m"]),
            max_queue_m_mean=_mean(samples["max_queue_m"]),
            avg_delay_s_mean=_mean(samples["avg_delay_s"]),
            avg_stopped_delay_s_mean=_mean(samples["avg_stopped_delay_s"]),
            co_g_per_veh=_mean(samples["co_g_per_veh"]),
            nox_g_per_veh=_mean(samples["nox_g_per_veh"]),
            voc_g_per_veh=_mean(samples["voc_g_per_veh"]),
            total_stops_mean=_mean(samples["total_stops"]),
            total_fuel_mean=_mean([e.total_fuel_gal for e in ev]),
            samples=samples,
        )
        rows.append(row)
        if key[3] == 0.0:
            baseline[key[:3]] = row
    out = []
    for row in rows:
        b = baseline.get((row.route, row.duration_s, row.scope))
        if b is None:
            out.append(row)
            continue
        pct = percent_benefit(b.fuel_per_veh_mean, row.fuel_per_veh_mean) if b.fuel_per_veh_mean > 0 else None
        if row is b:
            pct = 0.0
        out.append(_replace(row, pct_fuel_benefit=pct, pct_mobility_change=_change(b.veh_count_mean, row.veh_count_mean)))
    return out


def _replace(row: AggregateRow, **kw) -> AggregateRow:
    d = {f: getattr(row, f) for f in row.__dataclass_fields__}
    d.update(kw)
    return AggregateRow(**d)


def aggregate_csv(rows: Sequence[AggregateRow]) -> str:
    return write_csv((r.csv_row() for r in rows), AGGREGATE_COLUMNS)


def _num(text: str) -> float | None:
    return None if text == "" else float(text)


def read_aggregate(text: str) -> list[AggregateRow]:
    """Parse an aggregate CSV (per-seed samples are not stored, so they come back empty)."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != AGGREGATE_COLUMNS:
        raise ValueError(f"aggregate CSV header must be {','.join(AGGREGATE_COLUMNS)}")
    rows = []
    for n, rec in enumerate(reader, start=2):
        try:
            rows.append(AggregateRow(
                route=rec["route"], duration_s=float(rec["duration_s"]), scope=rec["scope"],
                penetration=float(rec["penetration_pct"]) / 100.0, n_seeds=0,
                veh_count_mean=float(rec["veh_count_mean"]), fuel_per_veh_mean=float(rec["fuel_per_veh_mean"]),
                pct_fuel_benefit=_num(rec["pct_fuel_benefit"]), pct_mobility_change=_num(rec["pct_mobility_change"]),
                avg_queue_m_mean=float(rec["avg_queue_m_mean"]), max_queue_m_mean=float(rec["max_queue_m_mean"]),
                avg_delay_s_mean=float(rec["avg_delay_s_mean"]),
                avg_stopped_delay_s_mean=float(rec["avg_stopped_delay_s_mean"]),
                co_g_per_veh=float(rec["co_g_per_veh"]), nox_g_per_veh=float(rec["nox_g_per_veh"]),
                voc_g_per_veh=float(rec["voc_g_per_veh"]), total_stops_mean=float(rec["total_stops_mean"]),
            ))
        except (TypeError, ValueError) as e:
            raise ValueError(f"aggregate CSV line {n}: {e}") from e
    return rows


def read_raw_samples(text: str) -> dict[tuple, dict[str, tuple]]:
    """Per-seed values keyed by (route, duration, scope, penetration) from a results CSV."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != RESULT_COLUMNS:
        raise ValueError(f"results CSV header must be {','.join(RESULT_COLUMNS)}")
    col = {"fuel_per_veh": "fuel_per_veh_gal", "veh_count": "veh_count", "avg_queue_m": "avg_queue_m",
           "max_queue_m": "max_queue_m", "avg_delay_s": "avg_delay_s", "avg_stopped_delay_s": "avg_stopped_delay_s",
           "total_stops": "total_stops"}
    recs = sorted(reader, key=lambda r: int(r["seed"]))
    out: dict[tuple, dict[str, list]] = {}
    for rec in recs:
        key = (rec["route"], float(rec["duration_s"]), rec["scope"], float(rec["penetration_pct"]) / 100.0)
        d = out.setdefault(key, {m: [] for m in col})
        for m, c in col.items():
            d[m].append(float(rec[c]))
        n = int(rec["veh_count"])
        for q in ("co", "nox", "voc"):
            d.setdefault(f"{q}_g_per_veh", []).append(per_vehicle(float(rec[f"{q}_g"]), n))
    return {k: {m: tuple(v) for m, v in d.items()} for k, d in out.items()}


# --- trends -------------------------------------------------------------------------


@dataclass(frozen=True)
class Trend:
    route: str
    duration_s: float
    scope: str
    metric: str
    rho: float  # Spearman rank correlation of the seed means with penetration
    endpoint_change_pct: float | None  # 100% cell against 0% cell
    welch_p: float | None  # two-sided, across seeds; None without per-seed data
    verdict: str


def classify(values: Sequence[float], larger_is_better: bool, welch_p: float | None = None,
             alpha: float = 0.05) -> tuple[float, str]:
    """(rho, verdict) for seed means ordered by penetration.

    The endpoint decides direction; a direction with a non-significant Welch
    test (when per-seed data exist) is flat. Improvement with every step
    moving the good way is ``improving``; with any setback it is
    ``non-monotone-improving``.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 3:
        raise ValueError("trend needs at least 3 grid points")
    if np.all(v == v[0]):
        return 0.0, "flat"
    rho = float(stats.spearmanr(np.arange(v.size), v).statistic)
    good = v if larger_is_better else -v
    d = good[-1] - good[0]
    if d == 0 or (welch_p is not None and not welch_p < alpha):
        return rho, "flat"
    if d < 0:
        return rho, "degrading"
    if np.all(np.diff(good) > 0):
        return rho, "improving"
    return rho, "non-monotone-improving"


def welch(a: Sequence[float], b: Sequence[float]) -> float | None:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or b.size < 2:
        return None
    if a.std() == 0 and b.std() == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # nearly identical samples
        return float(stats.ttest_ind(b, a, equal_var=False).pvalue)


def trend_report(rows: Sequence[AggregateRow], alpha: float = 0.05,
                 metrics: Sequence[str] | None = None) -> list[Trend]:
    """One verdict per metric for every (route, duration, scope) block of ``rows``."""
    blocks: dict[tuple, list[AggregateRow]] = {}
    for r in rows:
        blocks.setdefault((r.route, r.duration_s, r.scope), []).append(r)
    out = []
    for key in sorted(blocks):
        rs = sorted(blocks[key], key=lambda r: r.penetration)
        if len(rs) < 3:
            raise ValueError(f"{key[0]} {key[1]:g} s: trend needs at least 3 grid points, got {len(rs)}")
        for m in metrics or TREND_METRICS:
            better_up = TREND_METRICS[m][1]
            vals = [r.value(m) for r in rs]
            lo, hi = rs[0].samples.get(m), rs[-1].samples.get(m)
            p = welch(lo, hi) if lo and hi else None
            rho, verdict = classify(vals, better_up, p, alpha)
            out.append(Trend(key[0], key[1], key[2], m, rho, _change(vals[0], vals[-1]), p, verdict))
    return out


def benefit_trend(benefits: Sequence[float]) -> str:
    """Verdict for a % fuel benefit series (larger is better), e.g. a printed table column."""
    return classify(benefits, True)[1]


# --- files ----------------------------------------------------------------------------


def default_workers() -> int:
    env = os.environ.get("MIXFLOW_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def sweep_meta(spec: SweepSpec, workers: int, started: str, finished: str, elapsed_s: float) -> str:
    """Sidecar metadata; the only sweep output allowed to vary between runs."""
    from . import __version__

    return json.dumps({
        "version": __version__,
        "spec": spec.to_dict(),
        "runs": spec.n_runs,
        "workers": workers,
        "started": started,
        "finished": finished,
        "elapsed_s": round(elapsed_s, 3),
        "conventions": {
            "vehicle_count": "vehicles with at least one sample inside the scope",
            "avg_delay_s": "completed vehicles only; vehicles still in the network at the horizon are excluded",
            "pct_fuel_benefit": "raw rows: against the same seed's 0% run; aggregate rows: against the 0% seed mean",
            "seeds": "common random numbers: every penetration cell uses the same seed list",
        },
    }, indent=1) + "\n"
