"""Minimal dependency-free SVG line plots."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=55)
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _ticks(lo: float, hi: float, k: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (k - 1) for i in range(k)]


def line_plot(series, hlines=(), xlabel="", ylabel="", title="", logx=False, logy=False) -> str:
    """Render ``series`` of ``(label, xs, ys[, err])`` as an SVG document string.

    ``err`` (optional) draws symmetric error bars; ``hlines`` is a list of
    ``(label, y)`` reference lines.
    """
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    ty = (lambda v: math.log10(v)) if logy else (lambda v: v)
    xs_all = [tx(x) for s in series for x in s[1]]
    ys_all = [ty(y) for s in series for y in s[2]]
    for s in series:
        if len(s) > 3 and s[3] is not None:
            ys_all += [ty(y + e) for y, e in zip(s[2], s[3])]
            ys_all += [ty(y - e) for y, e in zip(s[2], s[3]) if not logy or y - e > 0]
    ys_all += [ty(v) for _, v in hlines]
    xs_all = [v for v in xs_all if math.isfinite(v)] or [0.0, 1.0]
    ys_all = [v for v in ys_all if math.isfinite(v)] or [0.0, 1.0]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    pad = 0.08 * (y1 - y0 or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle">{escape(title)}</text>')
    for v in _ticks(x0, x1):
        lab = _fmt(10**v if logx else v)
        out.append(f'<line x1="{px(v):.1f}" y1="{MARGIN["top"] + ph}" x2="{px(v):.1f}" '
                   f'y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(v):.1f}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">{lab}</text>')
    for v in _ticks(y0, y1):
        lab = _fmt(10**v if logy else v)
        out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{py(v):.1f}" x2="{MARGIN["left"]}" '
                   f'y2="{py(v):.1f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{py(v) + 4:.1f}" text-anchor="end">{lab}</text>')
    if xlabel:
        out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 12}" '
                   f'text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')

    legend_y = MARGIN["top"] + 10
    for i, (label, v) in enumerate(hlines):
        y = py(ty(v))
        out.append(f'<line x1="{MARGIN["left"]}" y1="{y:.1f}" x2="{MARGIN["left"] + pw}" y2="{y:.1f}" '
                   f'stroke="gray" stroke-dasharray="{4 + 3 * i},3"/>')
        out.append(f'<text x="{MARGIN["left"] + pw + 6}" y="{y + 4:.1f}" fill="gray">'
                   f'{escape(label)} = {_fmt(v)}</text>')
    for i, s in enumerate(series):
        label, xs, ys = s[0], s[1], s[2]
        err = s[3] if len(s) > 3 else None
        color = COLORS[i % len(COLORS)]
        pts = [(px(tx(x)), py(ty(y))) for x, y in zip(xs, ys) if math.isfinite(ty(y))]
        if pts:
            out.append('<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>'.format(
                color, " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)))
        for x, y, (a, b) in zip(xs, ys, pts):
            out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{color}"/>')
        if err is not None:
            for x, y, e in zip(xs, ys, err):
                lo = y - e
                if logy and lo <= 0:
                    continue
                out.append(f'<line x1="{px(tx(x)):.1f}" y1="{py(ty(lo)):.1f}" x2="{px(tx(x)):.1f}" '
                           f'y2="{py(ty(y + e)):.1f}" stroke="{color}"/>')
        out.append(f'<text x="{MARGIN["left"] + 8}" y="{legend_y + 16 * i:.1f}" fill="{color}">'
                   f'{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
