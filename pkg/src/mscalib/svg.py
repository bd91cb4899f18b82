"""Minimal SVG calibration plots: axes, diagonal, curve or scatter, rug ticks."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

SIZE = 360
MARGIN = 40


def _xy(x, y):
    inner = SIZE - 2 * MARGIN
    return MARGIN + x * inner, SIZE - MARGIN - y * inner


def calibration_svg(predicted, observed, title: str = "", scatter: bool = False,
                    reference=None, max_points: int = 4000) -> str:
    """Render one calibration plot on the unit square.

    Observed values outside [0, 1] (pseudo-value curves) are clipped for display.
    """
    x = np.clip(np.asarray(predicted, dtype=float), 0, 1)
    y = np.clip(np.asarray(observed, dtype=float), 0, 1)
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    if reference is not None:
        reference = np.clip(np.asarray(reference, dtype=float)[order], 0, 1)
    step = max(1, x.size // max_points)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
           f'viewBox="0 0 {SIZE} {SIZE}">',
           f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>']
    x0, y0 = _xy(0, 0)
    x1, y1 = _xy(1, 1)
    out.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="black"/>')
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        px, _ = _xy(v, 0)
        _, py = _xy(0, v)
        out.append(f'<text x="{px:.1f}" y="{y0 + 14}" font-size="10" text-anchor="middle">{v:g}</text>')
        out.append(f'<text x="{x0 - 4}" y="{py + 3:.1f}" font-size="10" text-anchor="end">{v:g}</text>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="grey" stroke-dasharray="4 3"/>')
    if reference is not None:
        pts = " ".join("{:.2f},{:.2f}".format(*_xy(a, b)) for a, b in zip(x[::step], reference[::step]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="darkorange" stroke-width="1.5"/>')
    if scatter:
        for a, b in zip(x[::step], y[::step]):
            px, py = _xy(a, b)
            out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="1" fill="steelblue" fill-opacity="0.4"/>')
    else:
        pts = " ".join("{:.2f},{:.2f}".format(*_xy(a, b)) for a, b in zip(x[::step], y[::step]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>')
    for a in x[::step]:
        px, _ = _xy(a, 0)
        out.append(f'<line x1="{px:.2f}" y1="{y0}" x2="{px:.2f}" y2="{y0 - 5}" stroke="black" stroke-opacity="0.2"/>')
    out.append(f'<text x="{SIZE / 2}" y="16" font-size="12" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<text x="{SIZE / 2}" y="{SIZE - 6}" font-size="11" text-anchor="middle">predicted</text>')
    out.append(f'<text x="12" y="{SIZE / 2}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 12 {SIZE / 2})">observed</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
