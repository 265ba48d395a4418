"""Aggregate run outputs and draw standalone SVG line charts.

Every chart embeds its plotted series in an XML comment, so a figure can be
audited without rerunning anything.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from . import io

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
RUN_COLUMNS = ["run", "step", "dg_loss", "penalty", "total"]
SWEEP_COLUMNS = ["sweep", "gamma", "val_acc", "val_ce", "final_total", "selected",
                 "target_acc", "target_ce"]


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
               xlabel: str, ylabel: str, width: int = 640, height: int = 400) -> str:
    """SVG text for one or more (x, y) polylines sharing a pair of linear axes."""
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)]
    if not pts:
        raise ValueError("nothing to plot")
    xs_all, ys_all = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    sx = lambda x: left + (x - x0) / (x1 - x0) * pw  # noqa: E731
    sy = lambda y: top + ph - (y - y0) / (y1 - y0) * ph  # noqa: E731

    data_lines = [f"series {name}: " + " ".join(f"{io.fmt(x)},{io.fmt(y)}" for x, y in zip(xs, ys))
                  for name, (xs, ys) in series.items()]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           "<!-- data",
           *[line.replace("--", "- -") for line in data_lines],
           "-->",
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 15}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 5}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
        out.append(f'<line x1="{left}" y1="{sy(t):.1f}" x2="{left + pw}" y2="{sy(t):.1f}" '
                   'stroke="#ddd"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(15,{top + ph / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    for k, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = top + 15 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def embedded_data(svg_text: str) -> dict[str, list[tuple[float, float]]]:
    """Recover the series written into a chart's data comment."""
    body = svg_text.split("<!-- data", 1)[1].split("-->", 1)[0]
    series = {}
    for line in body.strip().splitlines():
        name, _, pairs = line.partition(": ")
        series[name.removeprefix("series ")] = [tuple(map(float, p.split(","))) for p in pairs.split()]
    return series


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _label(path: Path, root: Path) -> str:
    rel = path.parent.relative_to(root).as_posix()
    return rel if rel != "." else "root"


def gamma_axis(gammas: Sequence[float]) -> list[float]:
    """log10(gamma), with gamma = 0 placed one decade left of the smallest positive value."""
    positive = [g for g in gammas if g > 0]
    floor = math.log10(min(positive)) - 1 if positive else 0.0
    return [math.log10(g) if g > 0 else floor for g in gammas]


def build_report(results_dir, out_dir=None) -> dict:
    """Collect every run.csv and sweep.csv under ``results_dir`` into one table each and chart them."""
    root = Path(results_dir)
    if not root.is_dir():
        raise FileNotFoundError(str(root))
    out = Path(out_dir) if out_dir else root / "report"
    runs = sorted(p for p in root.rglob("run.csv") if out not in p.parents)
    sweeps = sorted(p for p in root.rglob("sweep.csv") if out not in p.parents)

    run_rows, charts = [], []
    loss_series: dict[str, tuple[list, list]] = {}
    for p in runs:
        name = _label(p, root)
        rows = _read_rows(p)
        for r in rows:
            run_rows.append({"run": name, **{k: r[k] for k in RUN_COLUMNS[1:]}})
        steps = [float(r["step"]) for r in rows]
        if steps:
            loss_series[f"{name} loss"] = (steps, [float(r["dg_loss"]) for r in rows])
            loss_series[f"{name} penalty"] = (steps, [float(r["penalty"]) for r in rows])
    out.mkdir(parents=True, exist_ok=True)
    if run_rows:
        io.write_csv(run_rows, out / "runs.csv", RUN_COLUMNS)
    if loss_series:
        (out / "loss_penalty.svg").write_text(
            line_chart(loss_series, "training objective", "step", "value"))
        charts.append("loss_penalty.svg")

    sweep_rows: list[dict] = []
    acc_series: dict[str, tuple[list, list]] = {}
    for p in sweeps:
        name = _label(p, root)
        rows = _read_rows(p)
        for r in rows:
            sweep_rows.append({"sweep": name, **{k: r.get(k, "") for k in SWEEP_COLUMNS[1:]}})
        gammas = [float(r["gamma"]) for r in rows]
        xs = gamma_axis(gammas)
        acc_series[f"{name} val"] = (xs, [float(r["val_acc"]) for r in rows])
        if rows and rows[0].get("target_acc"):
            acc_series[f"{name} target"] = (xs, [float(r["target_acc"]) for r in rows])
    if sweep_rows:
        io.write_csv(sweep_rows, out / "sweeps.csv", SWEEP_COLUMNS)
    if acc_series:
        (out / "accuracy_vs_gamma.svg").write_text(
            line_chart(acc_series, "accuracy against gamma", "log10 gamma (0 at left end)",
                       "accuracy"))
        charts.append("accuracy_vs_gamma.svg")
    summary = {"runs": len(runs), "sweeps": len(sweeps), "run_rows": len(run_rows),
               "sweep_rows": len(sweep_rows), "charts": charts}
    io.write_json(summary, out / "report.json")
    return summary
