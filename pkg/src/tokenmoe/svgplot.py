"""Static SVG charts: IQM bars with interval whiskers, optional learning curves.

Output is plain text assembled in a fixed order with fixed number formatting,
so the same inputs always give the same bytes.
"""

from __future__ import annotations

from html import escape
from typing import Mapping, Sequence

from tokenmoe.evalstats import ReportRow

WIDTH = 640
BAR_PANEL_HEIGHT = 320
CURVE_PANEL_HEIGHT = 260
MARGIN_LEFT = 60
MARGIN_RIGHT = 20
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
           "#ccb974", "#64b5cd")


def _n(x: float) -> str:
    return f"{x:.2f}"


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi - lo < 1e-9:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return (lo - pad if lo < 0 else lo), hi + pad


def _bar_panel(rows: Sequence[ReportRow], metric: str, top: float) -> list[str]:
    chosen = [r for r in rows if r.metric == metric]
    lo, hi = _nice_range(min(min(r.ci_low, r.value) for r in chosen),
                         max(max(r.ci_high, r.value) for r in chosen))
    plot_top, plot_bottom = top + 30, top + BAR_PANEL_HEIGHT - 60
    inner = WIDTH - MARGIN_LEFT - MARGIN_RIGHT

    def y(v: float) -> float:
        return plot_bottom - (v - lo) / (hi - lo) * (plot_bottom - plot_top)

    out = [f'<text x="{WIDTH / 2:.0f}" y="{top + 18}" text-anchor="middle" font-size="14">'
           f'{escape(metric.upper())} (95% CI)</text>',
           f'<line class="axis" x1="{MARGIN_LEFT}" y1="{_n(y(0.0))}" x2="{WIDTH - MARGIN_RIGHT}" '
           f'y2="{_n(y(0.0))}" stroke="#000"/>']
    for tick in (lo, 0.0, hi):
        out.append(f'<text x="{MARGIN_LEFT - 6}" y="{_n(y(tick) + 4)}" text-anchor="end" font-size="10">'
                   f'{tick:.2f}</text>')
    slot = inner / max(len(chosen), 1)
    for i, r in enumerate(chosen):
        cx = MARGIN_LEFT + slot * (i + 0.5)
        bw = slot * 0.6
        y0, y1 = sorted((y(0.0), y(r.value)))
        colour = PALETTE[i % len(PALETTE)]
        out.append(f'<rect class="bar" data-arch="{escape(r.arch)}" x="{_n(cx - bw / 2)}" y="{_n(y0)}" '
                   f'width="{_n(bw)}" height="{_n(y1 - y0)}" fill="{colour}"/>')
        ylo, yhi = y(r.ci_low), y(r.ci_high)
        out.append(f'<g class="whisker" data-arch="{escape(r.arch)}" stroke="#000">'
                   f'<line x1="{_n(cx)}" y1="{_n(ylo)}" x2="{_n(cx)}" y2="{_n(yhi)}"/>'
                   f'<line x1="{_n(cx - 6)}" y1="{_n(ylo)}" x2="{_n(cx + 6)}" y2="{_n(ylo)}"/>'
                   f'<line x1="{_n(cx - 6)}" y1="{_n(yhi)}" x2="{_n(cx + 6)}" y2="{_n(yhi)}"/></g>')
        out.append(f'<text x="{_n(cx)}" y="{plot_bottom + 16}" text-anchor="middle" font-size="10" '
                   f'transform="rotate(20 {_n(cx)} {plot_bottom + 16})">{escape(r.arch)}</text>')
    return out


def _curve_panel(curves: Mapping[str, Sequence[tuple[int, float]]], top: float) -> list[str]:
    pts = [p for c in curves.values() for p in c]
    if not pts:
        return []
    xmax = max(p[0] for p in pts) or 1
    lo, hi = _nice_range(min(p[1] for p in pts), max(p[1] for p in pts))
    plot_top, plot_bottom = top + 30, top + CURVE_PANEL_HEIGHT - 30
    inner = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    out = [f'<text x="{WIDTH / 2:.0f}" y="{top + 18}" text-anchor="middle" font-size="14">'
           f'evaluation return vs env steps</text>',
           f'<line class="axis" x1="{MARGIN_LEFT}" y1="{plot_bottom}" x2="{WIDTH - MARGIN_RIGHT}" '
           f'y2="{plot_bottom}" stroke="#000"/>']
    for i, (arch, curve) in enumerate(curves.items()):
        coords = " ".join(
            f"{_n(MARGIN_LEFT + s / xmax * inner)},{_n(plot_bottom - (v - lo) / (hi - lo) * (plot_bottom - plot_top))}"
            for s, v in curve)
        colour = PALETTE[i % len(PALETTE)]
        out.append(f'<polyline class="curve" data-arch="{escape(arch)}" fill="none" stroke="{colour}" '
                   f'points="{coords}"/>')
        out.append(f'<text x="{WIDTH - MARGIN_RIGHT - 4}" y="{plot_top + 12 * (i + 1)}" text-anchor="end" '
                   f'font-size="10" fill="{colour}">{escape(arch)}</text>')
    return out


def render_report_svg(rows: Sequence[ReportRow], metric: str = "iqm",
                      curves: Mapping[str, Sequence[tuple[int, float]]] | None = None) -> str:
    """One bar and whisker per architecture for ``metric``; learning curves below if given."""
    if not any(r.metric == metric for r in rows):
        raise ValueError(f"report has no rows for metric {metric!r}")
    body = _bar_panel(rows, metric, 0.0)
    height = BAR_PANEL_HEIGHT
    if curves:
        body += _curve_panel(curves, height)
        height += CURVE_PANEL_HEIGHT
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
            f'viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">')
    return "\n".join([head, f'<rect width="{WIDTH}" height="{height}" fill="#fff"/>', *body, "</svg>"]) + "\n"
