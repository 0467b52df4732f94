"""Result emission: a diff-friendly CSV and standalone SVG line charts
(no plotting dependency, no external assets)."""
from __future__ import annotations

import csv
from xml.sax.saxutils import escape

import numpy as np

from .evaluation import ResultRow

__all__ = ["CSV_HEADER", "emit_csv", "read_csv", "emit_svg"]

CSV_HEADER = (
    "method", "phi_dim", "k_train", "seed", "split",
    "iteration", "metric", "value", "ci95",
)

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def emit_csv(rows, path) -> None:
    """Write rows in a fixed column order; refuses an empty row set."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([
                row.method, row.phi_dim, row.k_train, row.seed, row.split,
                row.iteration, row.metric, repr(row.value), repr(row.ci95),
            ])


def read_csv(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header in {path}")
        for record in reader:
            rows.append(ResultRow(
                method=record["method"],
                phi_dim=int(record["phi_dim"]),
                k_train=int(record["k_train"]),
                seed=int(record["seed"]),
                split=record["split"],
                iteration=int(record["iteration"]),
                metric=record["metric"],
                value=float(record["value"]),
                ci95=float(record["ci95"]),
            ))
    return rows


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = np.linspace(lo, hi, n)
    return [float(v) for v in raw]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def emit_svg(rows, path, x_field="k_train", series_field="method",
             title="", x_label=None, y_label="value") -> None:
    """One polyline per series of (x_field, value) points, with axes and
    tick labels. The file is self-contained XML."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to plot")
    width, height = 640, 420
    ml, mr, mt, mb = 64, 150, 40, 48
    plot_w, plot_h = width - ml - mr, height - mt - mb

    series: dict = {}
    for row in rows:
        key = str(getattr(row, series_field))
        series.setdefault(key, []).append(
            (float(getattr(row, x_field)), float(row.value))
        )
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.06 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y):
        return mt + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml}" y="24" font-family="sans-serif" font-size="15">'
        f"{escape(title)}</text>",
    ]
    axis = f'stroke="#333" stroke-width="1"'
    parts.append(
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" '
        f'y2="{mt + plot_h}" {axis}/>'
    )
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" {axis}/>')
    for tx in _ticks(x_lo, x_hi):
        parts.append(
            f'<line x1="{px(tx):.1f}" y1="{mt + plot_h}" x2="{px(tx):.1f}" '
            f'y2="{mt + plot_h + 5}" {axis}/>'
        )
        parts.append(
            f'<text x="{px(tx):.1f}" y="{mt + plot_h + 20}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{_fmt(tx)}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        parts.append(
            f'<line x1="{ml - 5}" y1="{py(ty):.1f}" x2="{ml}" '
            f'y2="{py(ty):.1f}" {axis}/>'
        )
        parts.append(
            f'<text x="{ml - 8}" y="{py(ty) + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{_fmt(ty)}</text>'
        )
    parts.append(
        f'<text x="{ml + plot_w / 2:.0f}" y="{height - 10}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(x_label or x_field)}</text>'
    )
    parts.append(
        f'<text x="18" y="{mt + plot_h / 2:.0f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 18 {mt + plot_h / 2:.0f})">{escape(y_label)}</text>'
    )
    for i, (name, pts) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = sorted(pts)
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="2"/>'
        )
        for x, y in pts:
            parts.append(
                f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>'
            )
        ly = mt + 16 + 18 * i
        parts.append(
            f'<line x1="{ml + plot_w + 12}" y1="{ly - 4}" x2="{ml + plot_w + 34}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{ml + plot_w + 40}" y="{ly}" font-family="sans-serif" '
            f'font-size="12">{escape(name)}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
