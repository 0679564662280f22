"""Standalone SVG plots: time series with criteria reference lines, and per-contingency bars."""
from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


@dataclass(frozen=True)
class PlotStyle:
    title: str = ""
    xlabel: str = "time (s)"
    ylabel: str = ""
    width: int = 720
    height: int = 400
    margin: tuple = (50, 150, 45, 60)  # top, right, bottom, left
    refs: tuple = ()  # (value, label) horizontal reference lines
    ylim: tuple | None = None


@dataclass(frozen=True)
class Axes:
    """Affine map from data coordinates to SVG pixels."""

    x0: float
    x1: float
    y0: float
    y1: float
    left: float
    right: float
    top: float
    bottom: float

    def px(self, x):
        return self.left + (np.asarray(x, float) - self.x0) / (self.x1 - self.x0) * (self.right - self.left)

    def py(self, y):
        return self.bottom - (np.asarray(y, float) - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top)

    def data_y(self, py):
        return self.y0 + (self.bottom - np.asarray(py, float)) / (self.bottom - self.top) * (self.y1 - self.y0)


def _span(lo, hi):
    if hi - lo < 1e-12:
        pad = max(abs(hi), 1.0) * 0.05
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _ticks(lo, hi, n=5):
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    first = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(first, hi + 1e-9 * step, step)]


def _fmt(v):
    return f"{v:.6g}"


def timeseries_axes(time, series, style: PlotStyle = PlotStyle()):
    time = np.asarray(time, float)
    values = [np.asarray(v, float) for v in series.values()]
    ys = np.concatenate(values + [np.array([r[0] for r in style.refs], float)])
    ys = ys[np.isfinite(ys)]
    y0, y1 = style.ylim if style.ylim else _span(float(ys.min()), float(ys.max()))
    x0, x1 = (float(time[0]), float(time[-1])) if time[-1] > time[0] else _span(float(time[0]), float(time[0]))
    top, right, bottom, left = style.margin
    return Axes(x0, x1, y0, y1, left, style.width - right, top, style.height - bottom)


def _frame(ax: Axes, style: PlotStyle, xticks, yticks):
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{style.width}" height="{style.height}" '
        f'viewBox="0 0 {style.width} {style.height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{style.width}" height="{style.height}" fill="white"/>',
        f'<rect x="{_fmt(ax.left)}" y="{_fmt(ax.top)}" width="{_fmt(ax.right - ax.left)}" '
        f'height="{_fmt(ax.bottom - ax.top)}" fill="none" stroke="black"/>',
    ]
    for t in xticks:
        x = float(ax.px(t))
        out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(ax.bottom)}" x2="{_fmt(x)}" y2="{_fmt(ax.bottom + 4)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{_fmt(ax.bottom + 16)}" text-anchor="middle">{_fmt(t)}</text>')
    for v in yticks:
        y = float(ax.py(v))
        out.append(f'<line x1="{_fmt(ax.left - 4)}" y1="{_fmt(y)}" x2="{_fmt(ax.left)}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(ax.left - 6)}" y="{_fmt(y + 4)}" text-anchor="end">{_fmt(v)}</text>')
    if style.title:
        out.append(f'<text x="{_fmt((ax.left + ax.right) / 2)}" y="{_fmt(ax.top - 18)}" '
                   f'text-anchor="middle" font-size="14">{escape(style.title)}</text>')
    if style.xlabel:
        out.append(f'<text x="{_fmt((ax.left + ax.right) / 2)}" y="{_fmt(style.height - 8)}" '
                   f'text-anchor="middle">{escape(style.xlabel)}</text>')
    if style.ylabel:
        cy = (ax.top + ax.bottom) / 2
        out.append(f'<text x="14" y="{_fmt(cy)}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {_fmt(cy)})">{escape(style.ylabel)}</text>')
    return out


def emit_svg_timeseries(time, series, style: PlotStyle = PlotStyle()):
    """One polyline per channel in ``series`` (name -> values) over ``time``.

    Reference lines in ``style.refs`` are drawn dashed across the full time axis.
    """
    if not series or len(time) == 0:
        raise ValueError("nothing to plot")
    ax = timeseries_axes(time, series, style)
    out = _frame(ax, style, _ticks(ax.x0, ax.x1), _ticks(ax.y0, ax.y1))
    for value, label in style.refs:
        y = float(ax.py(value))
        out.append(f'<line class="ref" x1="{_fmt(ax.left)}" y1="{_fmt(y)}" x2="{_fmt(ax.right)}" '
                   f'y2="{_fmt(y)}" stroke="#555" stroke-dasharray="6 4"/>')
        out.append(f'<text x="{_fmt(ax.right + 4)}" y="{_fmt(y + 4)}" fill="#555">{escape(label)}</text>')
    xs = ax.px(time)
    for k, (name, values) in enumerate(series.items()):
        ys = ax.py(values)
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys) if np.isfinite(y))
        color = PALETTE[k % len(PALETTE)]
        out.append(f'<polyline data-channel="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.2" points="{pts}"/>')
        ly = ax.top + 16 * (k + len(style.refs) + 1)
        out.append(f'<line x1="{_fmt(ax.right + 4)}" y1="{_fmt(ly)}" x2="{_fmt(ax.right + 22)}" '
                   f'y2="{_fmt(ly)}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{_fmt(ax.right + 26)}" y="{_fmt(ly + 4)}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class BarStyle:
    title: str = ""
    ylabel: str = "violations"
    width: int = 720
    height: int = 400
    margin: tuple = (50, 150, 90, 60)
    groups: tuple = field(default_factory=tuple)  # series order; default is sorted keys


def emit_svg_bars(labels, values, style: BarStyle = BarStyle()):
    """Grouped bar chart: ``values`` maps series name -> one number per label."""
    labels = list(labels)
    names = list(style.groups) or sorted(values)
    top, right, bottom, left = style.margin
    vmax = max([float(v) for n in names for v in values[n]] + [0.0])
    y1 = vmax * 1.1 if vmax > 0 else 1.0
    x1 = max(len(labels), 1)
    ax = Axes(0.0, float(x1), 0.0, y1, left, style.width - right, top, style.height - bottom)
    ps = PlotStyle(title=style.title, xlabel="", ylabel=style.ylabel, width=style.width,
                   height=style.height, margin=style.margin)
    out = _frame(ax, ps, [], _ticks(0.0, y1))
    slot = (ax.right - ax.left) / x1
    bar = 0.8 * slot / max(len(names), 1)
    for i, lab in enumerate(labels):
        cx = ax.left + (i + 0.5) * slot
        out.append(f'<text x="{_fmt(cx)}" y="{_fmt(ax.bottom + 12)}" text-anchor="end" '
                   f'transform="rotate(-40 {_fmt(cx)} {_fmt(ax.bottom + 12)})">{escape(str(lab))}</text>')
        for j, name in enumerate(names):
            v = float(values[name][i])
            x = ax.left + i * slot + 0.1 * slot + j * bar
            y = float(ax.py(v))
            out.append(f'<rect data-series="{escape(name)}" x="{_fmt(x)}" y="{_fmt(y)}" '
                       f'width="{_fmt(bar)}" height="{_fmt(ax.bottom - y)}" '
                       f'fill="{PALETTE[j % len(PALETTE)]}"/>')
    for j, name in enumerate(names):
        ly = ax.top + 16 * (j + 1)
        out.append(f'<rect x="{_fmt(ax.right + 4)}" y="{_fmt(ly - 8)}" width="12" height="10" '
                   f'fill="{PALETTE[j % len(PALETTE)]}"/>')
        out.append(f'<text class="legend" x="{_fmt(ax.right + 20)}" y="{_fmt(ly + 1)}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
