"""Minimal log-scale line plots written as standalone SVG."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")


def render_log_plot(curves, title="", xlabel="iteration", ylabel="error", width=640, height=420) -> str:
    """SVG text for ``curves = [(label, ks, values, marker_last)]`` on a log y-axis.

    Non-positive or non-finite values are skipped.  ``marker_last`` draws a
    cross at the final point (used for diverged runs).
    """
    curves = list(curves)
    if not curves:
        raise ValueError("nothing to plot")
    pts = []
    for label, ks, vals, mark in curves:
        p = [(float(k), float(v)) for k, v in zip(ks, vals) if math.isfinite(v) and v > 0]
        pts.append((str(label), p, bool(mark)))
    allp = [q for _, p, _ in pts for q in p]
    if not allp:
        raise ValueError("no positive finite values to plot")
    x0, x1 = min(q[0] for q in allp), max(q[0] for q in allp)
    lo = math.floor(math.log10(min(q[1] for q in allp)))
    hi = math.ceil(math.log10(max(q[1] for q in allp)))
    if hi == lo:
        hi += 1
    if x1 == x0:
        x1 = x0 + 1
    L, R, T, B = 70, 150, 40, 50
    pw, ph = width - L - R, height - T - B

    def sx(x):
        return L + pw * (x - x0) / (x1 - x0)

    def sy(v):
        return T + ph * (hi - math.log10(v)) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{L + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    step = max(1, (hi - lo) // 8)
    for e in range(lo, hi + 1, step):
        y = sy(10.0**e)
        out.append(f'<line x1="{L}" y1="{y:.1f}" x2="{L + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{L - 6}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
    xstep = max(1, int(math.ceil((x1 - x0) / 10)))
    for k in range(int(math.ceil(x0)), int(x1) + 1, xstep):
        x = sx(k)
        out.append(f'<text x="{x:.1f}" y="{T + ph + 16}" text-anchor="middle">{k}</text>')
    out.append(f'<text x="{L + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {T + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, p, mark) in enumerate(pts):
        color = PALETTE[i % len(PALETTE)]
        if p:
            path = " ".join(f"{sx(x):.1f},{sy(v):.1f}" for x, v in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
            if mark:
                cx, cy = sx(p[-1][0]), sy(p[-1][1])
                out.append(f'<path d="M{cx - 5:.1f},{cy - 5:.1f} L{cx + 5:.1f},{cy + 5:.1f} '
                           f'M{cx - 5:.1f},{cy + 5:.1f} L{cx + 5:.1f},{cy - 5:.1f}" stroke="{color}" stroke-width="2"/>')
        ly = T + 14 + 18 * i
        out.append(f'<line x1="{L + pw + 10}" y1="{ly - 4}" x2="{L + pw + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{L + pw + 34}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
