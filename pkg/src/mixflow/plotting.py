"""SVG charts of aggregated sweep results, one family per metric.

Each chart embeds the plotted values as JSON in the SVG ``<desc>`` element,
written with exactly the text of the aggregate CSV, so a chart can be
checked against the table it came from.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import AggregateRow  # noqa: E402

# family -> (title, [(CSV column, label)], y label, secondary series or None)
CHARTS = {
    "fuel_mobility": ("Fuel economy benefit and number of vehicles", [("pct_fuel_benefit", "% fuel economy benefit")],
                      "% fuel economy wrt no AV", ("veh_count_mean", "number of vehicles")),
    "avg_queue": ("Average queue length", [("avg_queue_m_mean", "average queue")], "queue length (m)", None),
    "max_queue": ("Maximum queue length", [("max_queue_m_mean", "maximum queue")], "queue length (m)", None),
    "delay": ("Average vehicle delay", [("avg_delay_s_mean", "delay")], "delay (s)", None),
    "stopped_delay": ("Average stopped delay", [("avg_stopped_delay_s_mean", "stopped delay")], "stopped delay (s)",
                      None),
    "emissions": ("Emissions per vehicle", [("co_g_per_veh", "CO"), ("nox_g_per_veh", "NOx"),
                                            ("voc_g_per_veh", "VOC")], "grams per vehicle", None),
    "stops": ("Number of stops", [("total_stops_mean", "stops")], "stops", None),
}


@dataclass(frozen=True)
class ChartSpec:
    family: str
    title: str
    x: tuple[str, ...]  # penetration % as written in the CSV
    series: dict  # CSV column -> tuple of CSV text values
    labels: dict
    y_label: str
    secondary: str | None
    path: Path

    def __post_init__(self):
        for col, vals in self.series.items():
            if len(vals) != len(self.x):
                raise ValueError(f"series {col} has {len(vals)} points for a grid of {len(self.x)}")


def chart_specs(rows: Sequence[AggregateRow], out_dir: Path) -> list[ChartSpec]:
    blocks: dict[tuple, list[AggregateRow]] = {}
    for r in rows:
        blocks.setdefault((r.route, r.duration_s, r.scope), []).append(r)
    specs = []
    for (route, dur, scope), rs in sorted(blocks.items()):
        rs = sorted(rs, key=lambda r: r.penetration)
        recs = [r.csv_row() for r in rs]
        x = tuple(rec["penetration_pct"] for rec in recs)
        stem = f"{route}_{recs[0]['duration_s']}s"
        for fam, (title, cols, ylab, sec) in CHARTS.items():
            series = {c: tuple(rec[c] for rec in recs) for c, _ in cols}
            labels = {c: lab for c, lab in cols}
            if sec is not None:
                series[sec[0]] = tuple(rec[sec[0]] for rec in recs)
                labels[sec[0]] = sec[1]
            specs.append(ChartSpec(
                family=fam,
                title=f"{title}: {route}, {recs[0]['duration_s']} s ({scope})",
                x=x, series=series, labels=labels, y_label=ylab,
                secondary=sec[0] if sec else None,
                path=out_dir / f"{stem}_{fam}.svg",
            ))
    return specs


def _vals(texts: Sequence[str]) -> list[float]:
    return [float("nan") if t == "" else float(t) for t in texts]


def render(spec: ChartSpec) -> str:
    xs = [float(v) for v in spec.x]
    with plt.rc_context({"svg.hashsalt": "mixflow", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        primary = [c for c in spec.series if c != spec.secondary]
        if spec.secondary is not None:
            width = min(8.0, 0.6 * min(b - a for a, b in zip(xs, xs[1:]))) if len(xs) > 1 else 8.0
            ax.bar(xs, _vals(spec.series[primary[0]]), width=width, color="#4c72b0", label=spec.labels[primary[0]])
            ax2 = ax.twinx()
            ax2.plot(xs, _vals(spec.series[spec.secondary]), "o-", color="#c44e52", label=spec.labels[spec.secondary])
            ax2.set_ylabel(spec.labels[spec.secondary])
            h1, l1 = ax.get_legend_handles_labels()
            h2, l2 = ax2.get_legend_handles_labels()
            ax.legend(h1 + h2, l1 + l2, loc="upper left", fontsize=8)
        else:
            for c in primary:
                ax.plot(xs, _vals(spec.series[c]), "o-", label=spec.labels[c])
            if len(primary) > 1:
                ax.legend(fontsize=8)
        ax.set_xlabel("L4-L5 AV penetration rate (%)")
        ax.set_ylabel(spec.y_label)
        ax.set_xticks(xs)
        ax.set_title(spec.title, fontsize=10)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "mixflow"})
        plt.close(fig)
    return embed_data(buf.getvalue(), spec)


def chart_data(spec: ChartSpec) -> dict:
    return {"family": spec.family, "x_penetration_pct": list(spec.x),
            "series": {c: list(v) for c, v in spec.series.items()}}


def embed_data(svg: str, spec: ChartSpec) -> str:
    payload = escape(json.dumps(chart_data(spec), sort_keys=True))
    i = svg.index(">", svg.index("<svg")) + 1
    return svg[:i] + f"\n <desc id=\"mixflow-data\">{payload}</desc>" + svg[i:]


def read_embedded(svg_text: str) -> dict:
    """The JSON payload written by :func:`embed_data`."""
    from xml.etree import ElementTree as ET

    root = ET.fromstring(svg_text)
    for el in root.iter():
        if el.tag.endswith("desc") and el.get("id") == "mixflow-data":
            return json.loads(el.text)
    raise ValueError("no embedded chart data")


def write_charts(rows: Sequence[AggregateRow], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for spec in chart_specs(rows, out_dir):
        spec.path.write_text(render(spec), "utf-8")
        paths.append(spec.path)
    return paths
