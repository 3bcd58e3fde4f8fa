"""Training curves and top-down trajectory plots as CSV + hand-written SVG.

Output depends only on the input logs (fixed number formatting, no
timestamps), so identical logs give byte-identical files.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .trainer import STATS_COLUMNS, stats_to_csv
from .world import TrajectoryLog, WorldMap

CURVE_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
PX_PER_M = 50.0


def _n(v: float) -> str:
    return f"{v:.2f}"


def qc_color(q: float) -> str:
    """Blue (safe) to red (unsafe); grey when no prediction was made."""
    if not math.isfinite(q):
        return "#808080"
    q = min(max(q, 0.0), 1.0)
    r = int(round(255 * q))
    b = int(round(255 * (1 - q)))
    return f"#{r:02x}40{b:02x}"


def training_svg(rows: Sequence[dict], columns: Sequence[str] = ("success_rate", "mean_reward"),
                 width: int = 640, height: int = 320) -> str:
    """One panel per column, x = environment steps."""
    margin = 40
    panel_h = (height - margin) / max(len(columns), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    xs = np.array([r.get("env_steps", i) for i, r in enumerate(rows)], dtype=float)
    for k, col in enumerate(columns):
        top = margin / 2 + k * panel_h
        h = panel_h - margin / 2
        parts.append(f'<rect x="{margin}" y="{_n(top)}" width="{width - 2 * margin}" height="{_n(h)}" '
                     f'fill="none" stroke="black"/>')
        parts.append(f'<text x="{margin + 4}" y="{_n(top + 14)}" font-size="12">{escape(col)}</text>')
        ys = np.array([r.get(col, math.nan) for r in rows], dtype=float)
        ok = np.isfinite(ys)
        if ok.sum() == 0:
            continue
        x0, x1 = xs.min(), max(xs.max(), xs.min() + 1)
        y0, y1 = ys[ok].min(), ys[ok].max()
        if y1 - y0 < 1e-12:
            y0, y1 = y0 - 0.5, y1 + 0.5
        pts = []
        for x, y in zip(xs[ok], ys[ok]):
            px = margin + (x - x0) / (x1 - x0) * (width - 2 * margin)
            py = top + h - (y - y0) / (y1 - y0) * h
            pts.append(f"{_n(px)},{_n(py)}")
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                     f'stroke="{CURVE_COLORS[k % len(CURVE_COLORS)]}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - margin - 4}" y="{_n(top + 14)}" font-size="10" '
                     f'text-anchor="end">[{y0:.3g}, {y1:.3g}]</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def trajectory_svg(world: WorldMap, log: TrajectoryLog, start: Sequence[float] | None = None,
                   goal: Sequence[float] | None = None) -> str:
    """Top-down view: obstacles, start (blue square), goal (red circle), one marker per step."""
    xmin, ymin, xmax, ymax = world.bounds
    w = (xmax - xmin) * PX_PER_M
    h = (ymax - ymin) * PX_PER_M

    def sx(x):
        return _n((x - xmin) * PX_PER_M)

    def sy(y):
        return _n((ymax - y) * PX_PER_M)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_n(w)}" height="{_n(h)}" '
             f'viewBox="0 0 {_n(w)} {_n(h)}">',
             f'<rect width="{_n(w)}" height="{_n(h)}" fill="white" stroke="black"/>']
    for cx, cy, r in world.circles:
        parts.append(f'<circle class="obstacle" cx="{sx(cx)}" cy="{sy(cy)}" r="{_n(r * PX_PER_M)}" fill="black"/>')
    for x0, y0, x1, y1 in world.boxes:
        parts.append(f'<rect class="obstacle" x="{sx(x0)}" y="{sy(y1)}" width="{_n((x1 - x0) * PX_PER_M)}" '
                     f'height="{_n((y1 - y0) * PX_PER_M)}" fill="black"/>')
    if log.rows:
        pts = " ".join(f"{sx(r[1])},{sy(r[2])}" for r in log.rows)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#bbbbbb" stroke-width="1"/>')
    for r in log.rows:
        parts.append(f'<circle class="waypoint" cx="{sx(r[1])}" cy="{sy(r[2])}" r="2.5" '
                     f'fill="{qc_color(r[8])}"/>')
    if start is not None:
        parts.append(f'<rect class="start" x="{_n(float(sx(start[0])) - 6)}" y="{_n(float(sy(start[1])) - 6)}" '
                     f'width="12" height="12" fill="#1f3fbf"/>')
    if goal is not None:
        parts.append(f'<circle class="goal" cx="{sx(goal[0])}" cy="{sy(goal[1])}" r="7" fill="#d62728"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plots(out_dir: str | Path, stats: Sequence[dict] | None = None,
               trajectories: Sequence[tuple] = ()) -> list[Path]:
    """Write ``training.csv``/``training.svg`` and ``trajectory_<i>.csv``/``.svg`` files.

    ``trajectories`` holds ``(world, log, start, goal)`` tuples.  Returns the
    written paths in order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if stats is not None:
        (out / "training.csv").write_text(stats_to_csv(list(stats)))
        (out / "training.svg").write_text(training_svg(list(stats)))
        written += [out / "training.csv", out / "training.svg"]
    for i, (world, log, start, goal) in enumerate(trajectories):
        csv_path = out / f"trajectory_{i:03d}.csv"
        svg_path = out / f"trajectory_{i:03d}.svg"
        csv_path.write_text(log.to_csv())
        svg_path.write_text(trajectory_svg(world, log, start, goal))
        written += [csv_path, svg_path]
    return written


def read_stats_csv(text: str) -> list[dict]:
    lines = text.strip().splitlines()
    if not lines or tuple(lines[0].split(",")) != STATS_COLUMNS:
        raise ValueError("not a training statistics CSV")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {}
        for c, v in zip(STATS_COLUMNS, vals):
            row[c] = int(v) if c in ("update", "env_steps", "episodes") else float(v)
        rows.append(row)
    return rows
