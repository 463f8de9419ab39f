"""Minimal hand-emitted SVG line charts: one polyline per series, plus axes.

At this scale a plotting dependency buys nothing — a chart is a header, two
axis lines, a handful of tick labels, and one ``<polyline>`` per series.
``line_chart`` returns the SVG text; callers decide where it lives on disk.
"""

from __future__ import annotations

import numpy as np

FORMAT_VERSION = "motionflow-svg v1"

# Color-blind-safe-ish default cycle; wraps for charts with many series.
_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd",
    "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
)

_MARGIN = {"left": 58, "right": 14, "top": 30, "bottom": 42}


def _escape(text: str) -> str:
    return (
        str(text)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _normalize(series):
    """Accept ``{name: ys}`` or ``{name: (xs, ys)}``; return ``{name: (xs, ys)}`` float arrays."""
    out = {}
    for name, value in series.items():
        if isinstance(value, tuple) and len(value) == 2:
            xs = np.asarray(value[0], dtype=np.float64)
            ys = np.asarray(value[1], dtype=np.float64)
        else:
            ys = np.asarray(value, dtype=np.float64)
            xs = np.arange(ys.shape[0], dtype=np.float64)
        if xs.ndim != 1 or ys.ndim != 1 or xs.shape != ys.shape:
            raise ValueError(f"series {name!r} needs matching 1-D x and y arrays")
        out[str(name)] = (xs, ys)
    return out


def _finite_runs(xs, ys):
    """Split a series into maximal runs of finite points (non-finite values break the line)."""
    ok = np.isfinite(xs) & np.isfinite(ys)
    runs, start = [], None
    for i, good in enumerate(ok):
        if good and start is None:
            start = i
        elif not good and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(ok)))
    return runs


def _ticks(lo: float, hi: float, n: int = 5):
    return np.linspace(lo, hi, n)


def line_chart(series, title: str = "", x_label: str = "", y_label: str = "",
               width: int = 640, height: int = 400, log_y: bool = False) -> str:
    """Render named series as an SVG line chart and return the SVG text.

    ``series`` maps a name to either a 1-D array of y values (x = index) or an
    ``(xs, ys)`` pair. Non-finite points break the polyline rather than being
    drawn. With ``log_y`` the y axis is log10-scaled (non-positive values are
    treated as missing).
    """
    if not series:
        raise ValueError("line chart needs at least one series")
    data = _normalize(series)

    if log_y:
        data = {
            name: (xs, np.where(ys > 0, np.log10(np.where(ys > 0, ys, 1.0)), np.nan))
            for name, (xs, ys) in data.items()
        }

    finite_x = np.concatenate([xs[np.isfinite(xs) & np.isfinite(ys)] for xs, ys in data.values()])
    finite_y = np.concatenate([ys[np.isfinite(xs) & np.isfinite(ys)] for xs, ys in data.values()])
    if finite_x.size == 0:
        raise ValueError("line chart needs at least one finite point")

    x0, x1 = float(finite_x.min()), float(finite_x.max())
    y0, y1 = float(finite_y.min()), float(finite_y.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        pad = max(0.5, abs(y0) * 0.1)
        y0, y1 = y0 - pad, y1 + pad

    ml, mr = _MARGIN["left"], _MARGIN["right"]
    mt, mb = _MARGIN["top"], _MARGIN["bottom"]
    plot_w, plot_h = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * plot_w

    def py(y):
        return mt + plot_h - (y - y0) / (y1 - y0) * plot_h

    lines = [
        f"<!-- {FORMAT_VERSION} -->",
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" data-format="{FORMAT_VERSION}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]

    # gridlines + tick labels
    for ty in _ticks(y0, y1):
        y = py(ty)
        label = f"{ty:.4g}" if not log_y else f"1e{ty:.3g}"
        lines.append(
            f'<line x1="{ml}" y1="{y:.2f}" x2="{ml + plot_w}" y2="{y:.2f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        lines.append(
            f'<text x="{ml - 6}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-family="monospace" font-size="11">{_escape(label)}</text>'
        )
    for tx in _ticks(x0, x1):
        x = px(tx)
        lines.append(
            f'<text x="{x:.2f}" y="{mt + plot_h + 16}" text-anchor="middle" '
            f'font-family="monospace" font-size="11">{_escape(f"{tx:.4g}")}</text>'
        )

    # axes
    lines.append(
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black" stroke-width="1.5"/>'
    )
    lines.append(
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" y2="{mt + plot_h}" '
        f'stroke="black" stroke-width="1.5"/>'
    )

    # series polylines (one per finite run)
    for idx, (name, (xs, ys)) in enumerate(data.items()):
        color = _PALETTE[idx % len(_PALETTE)]
        for start, stop in _finite_runs(xs, ys):
            pts = " ".join(f"{px(xs[i]):.2f},{py(ys[i]):.2f}" for i in range(start, stop))
            if stop - start == 1:
                i = start
                lines.append(
                    f'<circle cx="{px(xs[i]):.2f}" cy="{py(ys[i]):.2f}" r="2.5" fill="{color}"/>'
                )
            else:
                lines.append(
                    f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
                )

    # legend, top-right inside the plot area
    for idx, name in enumerate(data):
        color = _PALETTE[idx % len(_PALETTE)]
        y = mt + 14 + idx * 15
        x_text = ml + plot_w - 8
        lines.append(
            f'<line x1="{x_text - 22 - 8 * len(name)}" y1="{y - 4}" '
            f'x2="{x_text - 8 - 8 * len(name)}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>'
        )
        lines.append(
            f'<text x="{x_text}" y="{y}" text-anchor="end" font-family="monospace" '
            f'font-size="11" fill="{color}">{_escape(name)}</text>'
        )

    if title:
        lines.append(
            f'<text x="{width / 2:.0f}" y="{mt - 10}" text-anchor="middle" '
            f'font-family="monospace" font-size="13" font-weight="bold">{_escape(title)}</text>'
        )
    if x_label:
        lines.append(
            f'<text x="{ml + plot_w / 2:.0f}" y="{height - 8}" text-anchor="middle" '
            f'font-family="monospace" font-size="11">{_escape(x_label)}</text>'
        )
    if y_label:
        lines.append(
            f'<text x="14" y="{mt + plot_h / 2:.0f}" text-anchor="middle" '
            f'font-family="monospace" font-size="11" '
            f'transform="rotate(-90 14 {mt + plot_h / 2:.0f})">{_escape(y_label)}</text>'
        )

    lines.append("</svg>")
    return "\n".join(lines) + "\n"
