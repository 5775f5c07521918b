"""Command line: ingest, run, sweep, report.

Exit codes: 0 ok, 2 input could not be parsed, 3 input failed validation,
4 a simulation aborted.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from .engine import SimConfig, Simulation, SimulationError
from .experiment import (
    SweepError, SweepSpec, aggregate, aggregate_csv, default_workers, raw_rows, read_aggregate, read_raw_samples,
    run_sweep, sweep_meta, trend_report, write_csv,
)
from .metrics import RESULT_COLUMNS, format_penetration, result_row
from .net import ScenarioError, dumps, load_scenario

EXIT_OK, EXIT_PARSE, EXIT_INVALID, EXIT_SIM = 0, 2, 3, 4

log = logging.getLogger("mixflow")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _scenario(name: str):
    try:
        return load_scenario(name)
    except FileNotFoundError as e:
        raise CliError(str(e), EXIT_PARSE) from e
    except ScenarioError as e:
        code = EXIT_PARSE if isinstance(e.__cause__, json.JSONDecodeError) else EXIT_INVALID
        raise CliError(f"scenario {name}: {e}", code) from e


# --- ingest ----------------------------------------------------------------------


def cmd_ingest(args) -> int:
    from .osm_ingest import IngestDefaults, IngestError, OsmParseError, build_document, parse_osm, report
    from .net import load_network

    try:
        corridor = [int(x) for x in args.corridor.replace(",", " ").split()]
    except ValueError as e:
        raise CliError(f"--corridor must be way ids: {e}", EXIT_PARSE) from e
    try:
        defaults = IngestDefaults.load(args.defaults) if args.defaults else IngestDefaults()
    except json.JSONDecodeError as e:
        raise CliError(f"defaults {args.defaults}: {e}", EXIT_PARSE) from e
    except (OSError, ValueError, TypeError) as e:
        raise CliError(f"defaults {args.defaults}: {e}", EXIT_INVALID) from e
    try:
        g = parse_osm(Path(args.osm))
    except OSError as e:
        raise CliError(f"cannot read {args.osm}: {e}", EXIT_PARSE) from e
    except OsmParseError as e:
        raise CliError(str(e), EXIT_PARSE) from e
    name = args.name or Path(args.out).stem
    try:
        doc = build_document(g, defaults, corridor, name=name, input_rate=args.rate)
        net = load_network(doc)
    except (IngestError, ScenarioError) as e:
        raise CliError(str(e), EXIT_INVALID) from e
    Path(args.out).write_text(dumps(net) + "\n", "utf-8")
    for line in report(net):
        print(line)
    return EXIT_OK


# --- run --------------------------------------------------------------------------


def cmd_run(args) -> int:
    net = _scenario(args.scenario)
    try:
        cfg = SimConfig(duration=args.duration, penetration=args.penetration, seed=args.seed, dt=args.dt,
                        scope=args.scope, node=args.node)
    except ValueError as e:
        raise CliError(str(e), EXIT_INVALID) from e
    sim = Simulation(net, cfg, record=bool(args.dump_trajectories))
    try:
        out = sim.run()
    except SimulationError as e:
        raise CliError(f"simulation aborted at step {e.step} (t={e.step * cfg.dt:.1f} s), "
                       f"vehicles {list(e.vehicles)}: {e}", EXIT_SIM) from e
    # no baseline in a single run: the benefit is only defined for the 0% case itself
    pct = 0.0 if cfg.penetration == 0.0 else None
    row = result_row(net.name, cfg.duration, cfg.penetration, cfg.seed, out.evaluation, pct)
    text = write_csv([row], RESULT_COLUMNS)
    if args.out:
        Path(args.out).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    if args.dump_trajectories:
        out.log.to_csv(args.dump_trajectories)
    log.info("spawned %d, exited %d, present %d, entry-queued %d", out.spawned, out.exited, out.present,
             out.queued)
    return EXIT_OK


# --- sweep --------------------------------------------------------------------------


def load_spec(path: str | None, scenarios: list[str] | None) -> SweepSpec:
    d = {}
    if path:
        try:
            d = json.loads(Path(path).read_text("utf-8"))
        except OSError as e:
            raise CliError(f"cannot read {path}: {e}", EXIT_PARSE) from e
        except json.JSONDecodeError as e:
            raise CliError(f"spec {path}: {e}", EXIT_PARSE) from e
        if not isinstance(d, dict):
            raise CliError(f"spec {path}: expected a JSON object", EXIT_INVALID)
    if scenarios:
        d["scenarios"] = scenarios
    try:
        return SweepSpec.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError(f"spec: {e}", EXIT_INVALID) from e


def cmd_sweep(args) -> int:
    spec = load_spec(args.spec, args.scenario)
    for sc in spec.scenarios:
        _scenario(sc)
    workers = args.workers if args.workers is not None else default_workers()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()

    def progress(k, n, r):
        if not args.quiet:
            c = r.cell
            print(f"[{k}/{n}] {c.scenario} {c.duration:g}s {format_penetration(c.penetration)}% seed {c.seed}",
                  file=sys.stderr, flush=True)

    try:
        results = run_sweep(spec, workers=workers, progress=progress)
    except SweepError as e:
        raise CliError(str(e), EXIT_SIM) from e
    rows = aggregate(results)
    (out / "results.csv").write_text(write_csv(raw_rows(results), RESULT_COLUMNS), "utf-8")
    (out / "aggregate.csv").write_text(aggregate_csv(rows), "utf-8")
    (out / "trends.txt").write_text("\n".join(trend_lines(rows)) + "\n", "utf-8")
    if not args.no_charts:
        from .plotting import write_charts

        write_charts(rows, out / "charts")
    finished = datetime.now(timezone.utc).isoformat(timespec="seconds")
    (out / "sweep_meta.json").write_text(sweep_meta(spec, workers, started, finished, time.perf_counter() - t0),
                                         "utf-8")
    print(f"{len(results)} runs -> {out}")
    return EXIT_OK


# --- report ---------------------------------------------------------------------------


def _pen_label(p: float) -> str:
    return "No AV" if p == 0 else f"{format_penetration(p)}% AV"


def _f(x, fmt: str) -> str:
    return "" if x is None else format(x, fmt)


def format_tables(rows) -> list[str]:
    lines = []
    blocks: dict[tuple, list] = {}
    for r in rows:
        blocks.setdefault((r.route, r.duration_s, r.scope), []).append(r)
    for (route, dur, scope), rs in sorted(blocks.items()):
        lines.append(f"{route}, {scope} results, {dur:g} seconds")
        head = ("AV Penetration Rate", "Number of Vehicles", "Fuel per Vehicle (gal)", "% Fuel Economy wrt no AV",
                "% Mobility", "Avg Queue (m)", "Max Queue (m)", "Avg Delay (s)", "Stopped Delay (s)", "Stops")
        lines.append(" | ".join(head))
        for r in sorted(rs, key=lambda r: r.penetration):
            lines.append(" | ".join((
                _pen_label(r.penetration), f"{r.veh_count_mean:.1f}", f"{r.fuel_per_veh_mean:.5f}",
                _f(r.pct_fuel_benefit, ".3f"), _f(r.pct_mobility_change, ".3f"), f"{r.avg_queue_m_mean:.2f}",
                f"{r.max_queue_m_mean:.2f}", f"{r.avg_delay_s_mean:.2f}", f"{r.avg_stopped_delay_s_mean:.2f}",
                f"{r.total_stops_mean:.1f}",
            )))
        lines.append("")
    return lines


def format_trends(trends) -> list[str]:
    out = []
    for t in trends:
        p = "" if t.welch_p is None else f", Welch p={t.welch_p:.3g}"
        ch = "n/a" if t.endpoint_change_pct is None else f"{t.endpoint_change_pct:+.2f}%"
        out.append(f"{t.route} {t.duration_s:g}s {t.scope} {t.metric}: {t.verdict} "
                   f"(rho={t.rho:+.3f}, 100% vs 0%: {ch}{p})")
    return out


def trend_lines(rows) -> list[str]:
    """Trend verdicts for every block with enough grid points; a note for the others."""
    sizes: dict[tuple, int] = {}
    for r in rows:
        key = (r.route, r.duration_s, r.scope)
        sizes[key] = sizes.get(key, 0) + 1
    short = sorted(k for k, n in sizes.items() if n < 3)
    lines = format_trends(trend_report([r for r in rows if sizes[(r.route, r.duration_s, r.scope)] >= 3]))
    for route, dur, scope in short:
        lines.append(f"{route} {dur:g}s {scope}: no trend verdicts, fewer than 3 penetration rates")
    return lines


def cmd_report(args) -> int:
    path = Path(args.aggregate)
    try:
        rows = read_aggregate(path.read_text("utf-8"))
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_PARSE) from e
    except (ValueError, KeyError) as e:
        raise CliError(f"{path}: {e}", EXIT_INVALID) from e
    raw = Path(args.raw) if args.raw else path.with_name("results.csv")
    if raw.exists():
        try:
            samples = read_raw_samples(raw.read_text("utf-8"))
        except (ValueError, KeyError) as e:
            raise CliError(f"{raw}: {e}", EXIT_INVALID) from e
        rows = [_with_samples(r, samples) for r in rows]
    for line in format_tables(rows):
        print(line)
    for line in trend_lines(rows):
        print(line)
    return EXIT_OK


def _with_samples(row, samples):
    from dataclasses import replace

    s = samples.get((row.route, row.duration_s, row.scope, row.penetration))
    return replace(row, samples=s) if s else row


# --- entry -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixflow", description="Mixed human/AV traffic simulation and sweeps.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a scenario from an OpenStreetMap extract")
    p.add_argument("--osm", required=True, help="OSM XML file")
    p.add_argument("--corridor", required=True, help="ordered way ids, comma separated")
    p.add_argument("--out", required=True, help="scenario JSON to write")
    p.add_argument("--defaults", help="JSON with lanes/speeds/units overrides")
    p.add_argument("--name", help="scenario name (default: output file stem)")
    p.add_argument("--rate", type=float, default=600.0, help="placeholder input volume, veh/h")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("run", help="one replication, one results row")
    p.add_argument("--scenario", required=True, help="bundled name (route19, route15, us33, cosi) or JSON path")
    p.add_argument("--penetration", type=float, required=True, help="AV share in [0, 1]")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--duration", type=float, required=True, help="seconds")
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--scope", choices=("node", "full"), help="default: node up to 500 s, full beyond")
    p.add_argument("--node", help="evaluation node id (default: the first)")
    p.add_argument("--out", help="results CSV (default: stdout)")
    p.add_argument("--dump-trajectories", metavar="PATH", help="also write per-step vehicle samples")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="penetration x seed x duration grid")
    p.add_argument("--spec", help="sweep spec JSON (default: the standard 140-run grid)")
    p.add_argument("--scenario", action="append", help="override the spec's scenarios (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, help="parallel runs (default: $MIXFLOW_WORKERS or CPU count)")
    p.add_argument("--no-charts", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-run progress lines")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="tables and trend verdicts from an aggregate CSV")
    p.add_argument("--aggregate", required=True)
    p.add_argument("--raw", help="results CSV for Welch tests (default: results.csv next to the aggregate)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
