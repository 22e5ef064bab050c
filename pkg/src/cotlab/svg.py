"""Dependency-free SVG line charts for loss curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

PALETTE = ("#d62728", "#e6b800", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b")


@dataclass
class PlotSeries:
    label: str
    x: list[float]
    y: list[float]
    markers: list[float] = field(default_factory=list)  # vertical dashed lines at these x values

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have equal lengths")


def emit_svg(
    series: list[PlotSeries], xlabel: str = "epoch", ylabel: str = "loss", title: str = "", log_y: bool = False,
    width: int = 640, height: int = 400, floor: float = 1e-6,
) -> str:
    """Self-contained SVG document with one polyline per series."""
    if not series:
        raise ValueError("need at least one series")
    left, right, top, bottom = 64, 150, 30, 48
    pw, ph = width - left - right, height - top - bottom

    def ty(v: float) -> float:
        return math.log10(max(v, floor)) if log_y else v

    xs = [v for s in series for v in s.x] + [v for s in series for v in s.markers]
    ys = [ty(v) for s in series for v in s.y if math.isfinite(v)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(v: float) -> float:
        return left + (v - x0) / (x1 - x0) * pw

    def py(v: float) -> float:
        return top + (1.0 - (ty(v) - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        label_y = f"{10 ** fy:.3g}" if log_y else f"{fy:.3g}"
        yy = top + (1 - i / 4) * ph
        out.append(f'<text x="{px(fx):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="11">{fx:.4g}</text>')
        out.append(f'<text x="{left - 6}" y="{yy + 4:.1f}" text-anchor="end" font-size="11">{label_y}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}{" (log)" if log_y else ""}</text>'
    )
    for idx, s in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(s.x, s.y) if math.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        for mx in s.markers:
            out.append(
                f'<line x1="{px(mx):.2f}" y1="{top}" x2="{px(mx):.2f}" y2="{top + ph}" stroke="{color}" '
                'stroke-dasharray="4,3" stroke-width="1"/>'
            )
        ly = top + 14 + 18 * idx
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}" font-size="11">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
