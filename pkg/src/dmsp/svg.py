"""Minimal static SVG charts: bar chart, scatter plot and heat map.

Output is plain text with fixed float formatting, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 480, 360
MARGIN = 48
PALETTE = ("#4878a8", "#e57a5a", "#5a9e5a", "#8b6bb8", "#d69a2e", "#666666")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _doc(body: list[str], title: str, width: int = WIDTH, height: int = HEIGHT) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    parts = [head, f"<title>{escape(title)}</title>",
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" '
             f'font-size="14">{escape(title)}</text>']
    parts += body
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _span(values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def _axes(xlabel: str, ylabel: str, xr, yr) -> list[str]:
    x0, x1, y0, y1 = MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN
    out = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
           f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
           f'font-family="sans-serif" font-size="11">{escape(xlabel)}</text>',
           f'<text x="14" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
           f'font-size="11" transform="rotate(-90 14 {(y0 + y1) / 2:.1f})">{escape(ylabel)}</text>']
    for v, x in ((xr[0], x0), (xr[1], x1)):
        out.append(f'<text x="{x}" y="{y0 + 14}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="9">{v:.3g}</text>')
    for v, y in ((yr[0], y0), (yr[1], y1)):
        out.append(f'<text x="{x0 - 4}" y="{y + 3}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="9">{v:.3g}</text>')
    return out


def bar_chart(labels, values, title: str = "", ylabel: str = "") -> str:
    values = np.asarray(values, dtype=float)
    top = max(float(values.max()), 1e-12) if values.size else 1.0
    plot_w = WIDTH - 2 * MARGIN
    plot_h = HEIGHT - 2 * MARGIN
    slot = plot_w / max(len(values), 1)
    body = _axes("", ylabel, (0, len(values)), (0.0, top))
    for i, (lab, v) in enumerate(zip(labels, values)):
        h = plot_h * max(v, 0.0) / top
        x = MARGIN + i * slot + slot * 0.15
        y = HEIGHT - MARGIN - h
        body.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(slot * 0.7)}" height="{_f(h)}" '
                    f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        body.append(f'<text x="{_f(x + slot * 0.35)}" y="{_f(y - 4)}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="10">{v:.3f}</text>')
        body.append(f'<text x="{_f(x + slot * 0.35)}" y="{HEIGHT - MARGIN + 26}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="10">{escape(str(lab))}</text>')
    return _doc(body, title)


def scatter(x, y, title: str = "", xlabel: str = "", ylabel: str = "", diagonal: bool = False,
            groups=None) -> str:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if diagonal:
        xr = yr = _span(np.concatenate([x, y]))
    else:
        xr, yr = _span(x), _span(y)
    sx = (WIDTH - 2 * MARGIN) / (xr[1] - xr[0])
    sy = (HEIGHT - 2 * MARGIN) / (yr[1] - yr[0])
    body = _axes(xlabel, ylabel, xr, yr)
    if diagonal:
        body.append(f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{MARGIN}" '
                    f'stroke="#999999" stroke-dasharray="4 3"/>')
    groups = np.zeros(len(x), dtype=int) if groups is None else np.asarray(groups, dtype=int)
    for xi, yi, g in zip(x, y, groups):
        px = MARGIN + (xi - xr[0]) * sx
        py = HEIGHT - MARGIN - (yi - yr[0]) * sy
        body.append(f'<circle cx="{_f(px)}" cy="{_f(py)}" r="2" fill="{PALETTE[g % len(PALETTE)]}" '
                    f'fill-opacity="0.7"/>')
    return _doc(body, title)


def _color(t: float) -> str:
    # Blue to red through white.
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        u = t * 2
        r, g, b = int(40 + 215 * u), int(80 + 175 * u), 255
    else:
        u = (t - 0.5) * 2
        r, g, b = 255, int(255 - 175 * u), int(255 - 215 * u)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(grid, title: str = "", extent=None) -> str:
    """``grid[ix, iy]`` drawn with x to the right and y upward."""
    grid = np.asarray(grid, dtype=float)
    nx, ny = grid.shape
    lo, hi = _span(grid)
    cw = (WIDTH - 2 * MARGIN) / nx
    ch = (HEIGHT - 2 * MARGIN) / ny
    ext = extent or (0.0, float(nx - 1), 0.0, float(ny - 1))
    body = _axes("x", "y", ext[:2], ext[2:])
    for ix in range(nx):
        for iy in range(ny):
            c = _color((grid[ix, iy] - lo) / (hi - lo))
            px = MARGIN + ix * cw
            py = HEIGHT - MARGIN - (iy + 1) * ch
            body.append(f'<rect x="{_f(px)}" y="{_f(py)}" width="{_f(cw + 0.3)}" height="{_f(ch + 0.3)}" '
                        f'fill="{c}"/>')
    body.append(f'<text x="{WIDTH - MARGIN}" y="{MARGIN - 6}" text-anchor="end" font-family="sans-serif" '
                f'font-size="9">range {lo:.3g} .. {hi:.3g}</text>')
    return _doc(body, title)
