"""Minimal self-contained SVG renderings: line charts with optional bands and heatmaps."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

__all__ = ["heatmap_svg", "line_chart_svg"]

PALETTE = ("#1f77b4", "#2ca02c", "#17becf", "#d62728", "#9467bd", "#ff7f0e", "#8c564b", "#7f7f7f")
W, H, PAD = 640, 400, 50


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def line_chart_svg(
    x: Sequence[float],
    series: dict,
    title: str = "",
    bands: Optional[dict] = None,
    vlines: Sequence[float] = (),
    shade: Optional[tuple] = None,
    xlabel: str = "",
    ylabel: str = "",
) -> str:
    """Polyline chart. ``bands[name] = (lower, upper)`` draws a translucent band;
    ``shade=(x0, x1)`` shades a vertical interval; ``vlines`` are dashed markers."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    extra = [np.asarray(b, dtype=float) for pair in (bands or {}).values() for b in pair]
    finite = np.concatenate([a[np.isfinite(a)] for a in ys + extra] or [np.zeros(1)])
    if finite.size == 0:
        finite = np.zeros(1)
    y0, y1 = float(finite.min()), float(finite.max())
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5
    x0, x1 = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 0.5, x1 + 0.5
    sx = lambda v: PAD + (v - x0) / (x1 - x0) * (W - 2 * PAD)  # noqa: E731
    sy = lambda v: H - PAD - (v - y0) / (y1 - y0) * (H - 2 * PAD)  # noqa: E731
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{PAD}" y="{H - PAD + 15}" font-size="10">{_fmt(x0)}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 15}" font-size="10" text-anchor="end">{_fmt(x1)}</text>',
        f'<text x="{PAD - 5}" y="{H - PAD}" font-size="10" text-anchor="end">{y0:.4g}</text>',
        f'<text x="{PAD - 5}" y="{PAD + 4}" font-size="10" text-anchor="end">{y1:.4g}</text>',
        f'<text x="{W / 2}" y="{H - 10}" font-size="11" text-anchor="middle">{_esc(xlabel)}</text>',
        f'<text x="12" y="{H / 2}" font-size="11" transform="rotate(-90 12 {H / 2})" text-anchor="middle">{_esc(ylabel)}</text>',
    ]
    if shade is not None:
        a, b = sx(shade[0]), sx(shade[1])
        out.append(f'<rect x="{_fmt(a)}" y="{PAD}" width="{_fmt(max(b - a, 1.0))}" height="{H - 2 * PAD}" fill="#cccccc" fill-opacity="0.5"/>')
    names = list(series)
    for k, name in enumerate(names):
        col = PALETTE[k % len(PALETTE)]
        if bands and name in bands:
            lo, hi = (np.asarray(b, dtype=float) for b in bands[name])
            pts = [(sx(a), sy(b)) for a, b in zip(x, hi)] + [(sx(a), sy(b)) for a, b in zip(x[::-1], lo[::-1])]
            out.append(f'<polygon points="{" ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in pts)}" fill="{col}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x, ys[k]) if np.isfinite(b))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        out.append(f'<text x="{W - PAD + 4}" y="{PAD + 14 * k}" font-size="10" fill="{col}">{_esc(str(name))}</text>')
    for v in vlines:
        out.append(f'<line x1="{_fmt(sx(v))}" y1="{PAD}" x2="{_fmt(sx(v))}" y2="{H - PAD}" stroke="red" stroke-dasharray="4,3"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap_svg(matrix, row_labels: Sequence[str], col_labels: Sequence[str], title: str = "") -> str:
    """Rect-cell heatmap on a blue-white-red scale symmetric around zero, with values printed."""
    M = np.asarray(matrix, dtype=float)
    n, m = M.shape
    cell = 60
    left, top = 110, 40
    width, height = left + cell * m + 20, top + cell * n + 20
    finite = np.abs(M[np.isfinite(M)])
    vmax = float(finite.max()) if finite.size and finite.max() > 0 else 1.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
    ]
    for j, lab in enumerate(col_labels):
        out.append(f'<text x="{left + cell * j + cell / 2}" y="{top - 5}" font-size="10" text-anchor="middle">{_esc(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        out.append(f'<text x="{left - 5}" y="{top + cell * i + cell / 2 + 4}" font-size="10" text-anchor="end">{_esc(str(lab))}</text>')
        for j in range(m):
            v = M[i, j]
            t = 0.0 if not np.isfinite(v) else v / vmax
            r, g, b = (255, int(255 * (1 - t)), int(255 * (1 - t))) if t > 0 else (int(255 * (1 + t)), int(255 * (1 + t)), 255)
            out.append(f'<rect x="{left + cell * j}" y="{top + cell * i}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})" stroke="white"/>')
            out.append(f'<text x="{left + cell * j + cell / 2}" y="{top + cell * i + cell / 2 + 4}" font-size="10" text-anchor="middle">{v:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
