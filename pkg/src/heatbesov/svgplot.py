"""Tiny deterministic SVG scatter plots; no plotting dependencies."""

from __future__ import annotations

import math

_W, _H = 480, 360
_ML, _MR, _MT, _MB = 60, 20, 30, 45


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def loglog_scatter(points, path: str, title: str, xlabel: str, ylabel: str,
                   guides=()) -> None:
    """Scatter of positive (x, y) pairs on log-log axes.

    ``guides`` are constants c, each drawn as the line y = c x.
    """
    pts = [(float(x), float(y)) for x, y in points if x > 0 and y > 0]
    if not pts:
        pts = [(1.0, 1.0)]
    lx = [math.log10(x) for x, _ in pts]
    ly = [math.log10(y) for _, y in pts]
    lo = min(min(lx), min(ly)) - 0.2
    hi = max(max(lx), max(ly)) + 0.2
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    pw = _W - _ML - _MR
    ph = _H - _MT - _MB

    def sx(v):
        return _ML + (v - lo) / span * pw

    def sy(v):
        return _MT + ph - (v - lo) / span * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W/2:.0f}" y="18" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{title}</text>',
    ]
    # axes box
    parts.append(
        f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" '
        f'stroke="black" stroke-width="1"/>'
    )
    # decade ticks
    for d in range(math.floor(lo), math.ceil(hi) + 1):
        if lo <= d <= hi:
            parts.append(
                f'<line x1="{_fmt(sx(d))}" y1="{_MT + ph}" x2="{_fmt(sx(d))}" '
                f'y2="{_MT + ph + 5}" stroke="black"/>'
            )
            parts.append(
                f'<text x="{_fmt(sx(d))}" y="{_MT + ph + 18}" text-anchor="middle" '
                f'font-size="10" font-family="sans-serif">1e{d}</text>'
            )
            parts.append(
                f'<line x1="{_ML - 5}" y1="{_fmt(sy(d))}" x2="{_ML}" '
                f'y2="{_fmt(sy(d))}" stroke="black"/>'
            )
            parts.append(
                f'<text x="{_ML - 8}" y="{_fmt(sy(d) + 3)}" text-anchor="end" '
                f'font-size="10" font-family="sans-serif">1e{d}</text>'
            )
    # guide lines y = c x
    for c in guides:
        if c <= 0:
            continue
        lc = math.log10(c)
        a, b = lo, hi
        parts.append(
            f'<line x1="{_fmt(sx(a))}" y1="{_fmt(sy(a + lc))}" '
            f'x2="{_fmt(sx(b))}" y2="{_fmt(sy(b + lc))}" '
            f'stroke="#888888" stroke-width="0.8" stroke-dasharray="4,3"/>'
        )
    for vx, vy in zip(lx, ly):
        parts.append(
            f'<circle cx="{_fmt(sx(vx))}" cy="{_fmt(sy(vy))}" r="3" '
            f'fill="#1f6fb2" fill-opacity="0.8"/>'
        )
    parts.append(
        f'<text x="{_ML + pw / 2:.0f}" y="{_H - 8}" text-anchor="middle" '
        f'font-size="11" font-family="sans-serif">{xlabel}</text>'
    )
    parts.append(
        f'<text x="14" y="{_MT + ph / 2:.0f}" text-anchor="middle" font-size="11" '
        f'font-family="sans-serif" transform="rotate(-90 14 {_MT + ph / 2:.0f})">'
        f"{ylabel}</text>"
    )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
