"""Minimal deterministic SVG line charts.

Byte-identical output for identical input: fixed palette, fixed "%.6g"
number formatting, no timestamps or generated ids. Intended for quick-look
diagnostics (loss history, estimator convergence, pair correlations), not
publication typography.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from html import escape

import numpy as np

PALETTE = ("#1f6fb2", "#d9541e", "#2e8540", "#8b4ecf", "#a0790a", "#c2303c")

_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64.0, 16.0, 34.0, 46.0


class SvgError(ValueError):
    """Raised for unplottable input (empty series, non-finite bounds)."""


@dataclass(frozen=True)
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str = ""
    dashed: bool = False


def _fmt(v: float) -> str:
    out = f"{v:.6g}"
    return "0" if out == "-0" else out


def _nice_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


def line_chart(
    series: list[Series],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    log_x: bool = False,
    y_reference: float | None = None,
    width: float = 720.0,
    height: float = 440.0,
) -> str:
    """Render series as one SVG document string."""
    if not series:
        raise SvgError("at least one series required")
    xs, ys = [], []
    for s in series:
        x = np.asarray(s.x, dtype=np.float64)
        y = np.asarray(s.y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1 or x.size == 0:
            raise SvgError("each series needs matching non-empty x and y vectors")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise SvgError("series contain non-finite values")
        if log_x and np.any(x <= 0.0):
            raise SvgError("log-x charts need strictly positive x")
        xs.append(np.log10(x) if log_x else x)
        ys.append(y)
    x_lo = min(float(x.min()) for x in xs)
    x_hi = max(float(x.max()) for x in xs)
    y_lo = min(float(y.min()) for y in ys)
    y_hi = max(float(y.max()) for y in ys)
    if y_reference is not None:
        y_lo = min(y_lo, y_reference)
        y_hi = max(y_hi, y_reference)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.04 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    plot_w = width - _MARGIN_L - _MARGIN_R
    plot_h = height - _MARGIN_T - _MARGIN_B

    def px(v: float) -> float:
        return _MARGIN_L + plot_w * (v - x_lo) / (x_hi - x_lo)

    def py(v: float) -> float:
        return _MARGIN_T + plot_h * (1.0 - (v - y_lo) / (y_hi - y_lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" '
        f'height="{_fmt(height)}" viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
        f'<rect width="{_fmt(width)}" height="{_fmt(height)}" fill="#ffffff"/>',
    ]
    font = 'font-family="Helvetica,Arial,sans-serif"'
    if title:
        out.append(
            f'<text x="{_fmt(width / 2)}" y="20" {font} font-size="14" '
            f'text-anchor="middle">{escape(title)}</text>'
        )

    if log_x:
        lo_dec, hi_dec = math.floor(x_lo), math.ceil(x_hi)
        x_ticks = [t for t in range(lo_dec, hi_dec + 1) if x_lo - 1e-9 <= t <= x_hi + 1e-9]
        x_tick_text = [f"1e{t}" for t in x_ticks]
    else:
        x_ticks = _nice_ticks(x_lo, x_hi)
        x_tick_text = [_fmt(t) for t in x_ticks]
    y_ticks = _nice_ticks(y_lo, y_hi)

    for t in y_ticks:
        yy = _fmt(py(t))
        out.append(
            f'<line x1="{_fmt(_MARGIN_L)}" y1="{yy}" x2="{_fmt(width - _MARGIN_R)}" '
            f'y2="{yy}" stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{_fmt(_MARGIN_L - 6)}" y="{yy}" {font} font-size="11" '
            f'text-anchor="end" dominant-baseline="middle">{_fmt(t)}</text>'
        )
    for t, label in zip(x_ticks, x_tick_text):
        xx = _fmt(px(t))
        out.append(
            f'<line x1="{xx}" y1="{_fmt(_MARGIN_T)}" x2="{xx}" '
            f'y2="{_fmt(height - _MARGIN_B)}" stroke="#eeeeee" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{xx}" y="{_fmt(height - _MARGIN_B + 16)}" {font} '
            f'font-size="11" text-anchor="middle">{label}</text>'
        )
    out.append(
        f'<rect x="{_fmt(_MARGIN_L)}" y="{_fmt(_MARGIN_T)}" width="{_fmt(plot_w)}" '
        f'height="{_fmt(plot_h)}" fill="none" stroke="#333333" stroke-width="1"/>'
    )
    if x_label:
        out.append(
            f'<text x="{_fmt(_MARGIN_L + plot_w / 2)}" y="{_fmt(height - 10)}" {font} '
            f'font-size="12" text-anchor="middle">{escape(x_label)}</text>'
        )
    if y_label:
        cx, cy = _fmt(16.0), _fmt(_MARGIN_T + plot_h / 2)
        out.append(
            f'<text x="{cx}" y="{cy}" {font} font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 {cx} {cy})">{escape(y_label)}</text>'
        )
    if y_reference is not None:
        yy = _fmt(py(y_reference))
        out.append(
            f'<line x1="{_fmt(_MARGIN_L)}" y1="{yy}" x2="{_fmt(width - _MARGIN_R)}" '
            f'y2="{yy}" stroke="#555555" stroke-width="1" stroke-dasharray="2,4"/>'
        )

    for idx, (s, x, y) in enumerate(zip(series, xs, ys)):
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x, y))
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"{dash}/>'
        )
    legend_y = _MARGIN_T + 8.0
    for idx, s in enumerate(series):
        if not s.label:
            continue
        color = PALETTE[idx % len(PALETTE)]
        ly = _fmt(legend_y)
        out.append(
            f'<line x1="{_fmt(width - _MARGIN_R - 120)}" y1="{ly}" '
            f'x2="{_fmt(width - _MARGIN_R - 96)}" y2="{ly}" stroke="{color}" '
            f'stroke-width="2"/>'
        )
        out.append(
            f'<text x="{_fmt(width - _MARGIN_R - 90)}" y="{ly}" {font} font-size="11" '
            f'dominant-baseline="middle">{escape(s.label)}</text>'
        )
        legend_y += 16.0
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path: str, *args, **kwargs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(line_chart(*args, **kwargs))
