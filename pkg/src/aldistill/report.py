"""Self-contained SVG line plots from CSV columns."""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=170, top=40, bottom=55)


def read_columns(csv_path):
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _ticks(lo, hi, n=5):
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi, np.linspace(lo, hi, n)


def line_plot_svg(series, x_label, y_label, title=""):
    """``series`` is a list of ``(name, xs, ys)``; returns the SVG document text."""
    if not series or not any(len(xs) for _, xs, _ in series):
        raise ValueError("no data to plot")
    allx = np.concatenate([np.asarray(xs, float) for _, xs, _ in series])
    ally = np.concatenate([np.asarray(ys, float) for _, _, ys in series])
    finite = np.isfinite(ally)
    x0, x1, xt = _ticks(float(allx.min()), float(allx.max()))
    y0, y1, yt = _ticks(float(ally[finite].min()) if finite.any() else 0.0,
                        float(ally[finite].max()) if finite.any() else 1.0)
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    bx, by = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line class="axis" x1="{bx}" y1="{by}" x2="{bx + pw}" y2="{by}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{bx}" y1="{MARGIN["top"]}" x2="{bx}" y2="{by}" stroke="black"/>')
    for t in xt:
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{by}" x2="{x:.2f}" y2="{by + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{by + 18}" text-anchor="middle">{t:.4g}</text>')
    for t in yt:
        y = py(t)
        out.append(f'<line x1="{bx - 5}" y1="{y:.2f}" x2="{bx}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<line x1="{bx}" y1="{y:.2f}" x2="{bx + pw}" y2="{y:.2f}" stroke="#dddddd"/>')
        out.append(f'<text x="{bx - 8}" y="{y + 4:.2f}" text-anchor="end">{t:.4g}</text>')
    out.append(f'<text x="{bx + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.2f})">{escape(y_label)}</text>')

    for k, (name, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = [(float(x), float(y)) for x, y in zip(xs, ys) if np.isfinite(float(y))]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}">'
                   f'<title>{escape(name)}</title></polyline>')
        ly = MARGIN["top"] + 10 + 16 * k
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<rect x="{lx}" y="{ly - 6}" width="14" height="3" fill="{color}"/>')
        out.append(f'<text x="{lx + 20}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_line_plot(csv_path, x_col, y_cols, path, group_col=None, title="", y_label=None):
    """One polyline per y column (per group, when ``group_col`` is given)."""
    rows = read_columns(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: no data rows")
    header = rows[0].keys()
    if isinstance(y_cols, str):
        y_cols = [y_cols]
    for col in [x_col, *y_cols] + ([group_col] if group_col else []):
        if col not in header:
            raise KeyError(f"{csv_path}: unknown column {col!r}")
    groups = {}
    for row in rows:
        groups.setdefault(row[group_col] if group_col else "", []).append(row)
    series = []
    for g, grows in groups.items():
        for col in y_cols:
            name = f"{g}:{col}" if group_col and len(y_cols) > 1 else (g or col)
            series.append((name, [float(r[x_col]) for r in grows], [float(r[col]) for r in grows]))
    svg = line_plot_svg(series, x_col, y_label or ", ".join(y_cols), title)
    Path(path).write_text(svg)
    return Path(path)
