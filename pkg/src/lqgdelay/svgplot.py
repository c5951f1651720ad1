"""Minimal log-log SVG writer: axes, points, optional fitted lines."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
W, H, PAD = 560, 400, 60


def _ticks(lo: float, hi: float) -> list[float]:
    return [10.0 ** e for e in range(math.floor(lo), math.ceil(hi) + 1)]


def loglog_svg(series: dict, fits: dict | None = None, title: str = "", xlabel: str = "N") -> str:
    """``series``: name -> (xs, ys); ``fits``: name -> (slope, intercept) of log y on log x."""
    fits = fits or {}
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if x > 0 and y > 0]
    if not pts:
        raise ValueError("nothing positive to plot")
    lx = [math.log10(x) for x, _ in pts]
    ly = [math.log10(y) for _, y in pts]
    x0, x1 = min(lx) - 0.1, max(lx) + 0.1
    y0, y1 = min(ly) - 0.2, max(ly) + 0.2
    sx = lambda v: PAD + (math.log10(v) - x0) / (x1 - x0) * (W - 2 * PAD)
    sy = lambda v: H - PAD - (math.log10(v) - y0) / (y1 - y0) * (H - 2 * PAD)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">{escape(xlabel)}</text>']
    for t in _ticks(y0, y1):
        if y0 <= math.log10(t) <= y1:
            out.append(f'<text x="{PAD - 5}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:g}</text>')
    for xs, _ in series.values():
        for x in xs:
            out.append(f'<text x="{sx(x):.1f}" y="{H - PAD + 15}" text-anchor="middle">{x:g}</text>')
        break
    for j, (name, (xs, ys)) in enumerate(series.items()):
        col = COLORS[j % len(COLORS)]
        for x, y in zip(xs, ys):
            if x > 0 and y > 0:
                out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3.5" fill="{col}"/>')
        if name in fits and all(map(math.isfinite, fits[name])):
            b, a = fits[name]
            xa, xb = min(xs), max(xs)
            ya, yb = math.exp(a) * xa ** b, math.exp(a) * xb ** b
            out.append(f'<line x1="{sx(xa):.1f}" y1="{sy(ya):.1f}" x2="{sx(xb):.1f}" y2="{sy(yb):.1f}" '
                       f'stroke="{col}" stroke-dasharray="4 3"/>')
            label = f"{name} (slope {b:.2f})"
        else:
            label = name
        out.append(f'<text x="{W - PAD - 5}" y="{PAD + 14 * j}" text-anchor="end" fill="{col}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
