"""Small self-contained SVG plots: scatter, line curves, (t, r) heatmaps, histograms."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

W, H = 480, 360
PAD_L, PAD_R, PAD_T, PAD_B = 56, 16, 28, 44
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class _Axes:
    def __init__(self, xlim: tuple[float, float], ylim: tuple[float, float], logx: bool = False):
        self.logx = logx
        x0, x1 = (math.log10(v) for v in xlim) if logx else xlim
        if x1 <= x0:
            x1 = x0 + 1.0
        y0, y1 = ylim
        if y1 <= y0:
            y1 = y0 + 1.0
        self.x0, self.x1, self.y0, self.y1 = x0, x1, y0, y1

    def px(self, x: float) -> float:
        if self.logx:
            x = math.log10(max(x, 1e-300))
        return PAD_L + (x - self.x0) / (self.x1 - self.x0) * (W - PAD_L - PAD_R)

    def py(self, y: float) -> float:
        return H - PAD_B - (y - self.y0) / (self.y1 - self.y0) * (H - PAD_T - PAD_B)


def _frame(ax: _Axes, title: str, xlabel: str, ylabel: str) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{PAD_L}" y="{PAD_T}" width="{W - PAD_L - PAD_R}" height="{H - PAD_T - PAD_B}" '
        'fill="none" stroke="#444"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{(PAD_L + W - PAD_R) / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{(PAD_T + H - PAD_B) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(PAD_T + H - PAD_B) / 2})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        fx = ax.x0 + (ax.x1 - ax.x0) * i / 4
        fy = ax.y0 + (ax.y1 - ax.y0) * i / 4
        xv = 10**fx if ax.logx else fx
        x = PAD_L + (W - PAD_L - PAD_R) * i / 4
        y = ax.py(fy)
        parts.append(f'<text x="{x:.1f}" y="{H - PAD_B + 14}" text-anchor="middle">{_tick(xv)}</text>')
        parts.append(f'<text x="{PAD_L - 4}" y="{y + 4:.1f}" text-anchor="end">{_tick(fy)}</text>')
    return parts


def _tick(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def _write(path: str | Path, parts: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts + ["</svg>"]) + "\n")
    return path


def _limits(*arrays: np.ndarray, margin: float = 0.05) -> tuple[float, float]:
    vals = np.concatenate([np.ravel(a) for a in arrays])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo or 1.0
    return lo - margin * span, hi + margin * span


def scatter_svg(path: str | Path, samples: np.ndarray, reference: np.ndarray | None = None,
                title: str = "samples") -> Path:
    """Reference points in grey under generated points in blue."""
    arrays = [samples] if reference is None else [samples, reference]
    ax = _Axes(_limits(*[a[:, 0] for a in arrays]), _limits(*[a[:, 1] for a in arrays]))
    parts = _frame(ax, title, "x0", "x1")
    for pts, color in ((reference, "#999999"), (samples, PALETTE[0])):
        if pts is None:
            continue
        for x, y in pts:
            if np.isfinite(x) and np.isfinite(y):
                parts.append(f'<circle cx="{ax.px(x):.1f}" cy="{ax.py(y):.1f}" r="1.2" fill="{color}" '
                             'fill-opacity="0.5"/>')
    return _write(path, parts)


def line_svg(path: str | Path, series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
             xlabel: str, ylabel: str, logx: bool = False) -> Path:
    xs = [np.asarray(s[0], float) for s in series.values()]
    ys = [np.asarray(s[1], float) for s in series.values()]
    if logx:
        pos = np.concatenate(xs)
        pos = pos[pos > 0]
        xlim = (float(pos.min()), float(pos.max())) if pos.size else (1.0, 10.0)
    else:
        xlim = _limits(*xs, margin=0.0)
    ax = _Axes(xlim, _limits(*ys))
    ax.logx = logx
    if logx:
        ax.x0, ax.x1 = math.log10(xlim[0]), math.log10(max(xlim[1], xlim[0] * 10))
    parts = _frame(ax, title, xlabel, ylabel)
    for i, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = [(ax.px(a), ax.py(b)) for a, b in zip(x, y) if np.isfinite(b) and (a > 0 or not logx)]
        if pts:
            d = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            parts.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            parts += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{color}"/>' for a, b in pts]
        parts.append(f'<text x="{W - PAD_R - 6}" y="{PAD_T + 14 + 14 * i}" text-anchor="end" '
                     f'fill="{color}">{escape(name)}</text>')
    return _write(path, parts)


def budget_curve_svg(path: str | Path, points: Iterable) -> Path:
    """Energy distance against cumulative forward evaluations, one line per method."""
    series: dict[str, tuple[list[float], list[float]]] = {}
    for p in points:
        xs, ys = series.setdefault(p.method, ([], []))
        xs.append(float(p.forward_evals))
        ys.append(float(p.energy_distance))
    if not series:
        series["(none)"] = ([1.0], [0.0])
    return line_svg(path, series, "one-step quality vs. compute", "cumulative forward evaluations",
                    "energy distance", logx=True)


def _color(v: float, lo: float, hi: float) -> str:
    f = 0.0 if hi <= lo else min(max((v - lo) / (hi - lo), 0.0), 1.0)
    # white -> dark red ramp
    r = 255 - int(100 * f)
    g = b = 255 - int(235 * f)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(path: str | Path, hm, which: str = "mean") -> Path:
    """Lower-triangular (t, r) grid; empty cells are left blank."""
    grid = hm.mean if which == "mean" else hm.std
    n = grid.shape[0]
    finite = grid[np.isfinite(grid)]
    lo, hi = (float(np.min(finite)), float(np.percentile(finite, 99))) if finite.size else (0.0, 1.0)
    ax = _Axes((0.0, 1.0), (0.0, 1.0))
    parts = _frame(ax, f"per-cell {which} loss over (t, r)", "r", "t")
    cw = (W - PAD_L - PAD_R) / n
    ch = (H - PAD_T - PAD_B) / n
    for i in range(n):
        for j in range(i + 1):
            v = grid[i, j]
            if not np.isfinite(v):
                continue
            parts.append(f'<rect x="{PAD_L + j * cw:.1f}" y="{ax.py(hm.edges[i + 1]):.1f}" width="{cw:.1f}" '
                         f'height="{ch:.1f}" fill="{_color(v, lo, hi)}"><title>t={hm.edges[i]:.2f} '
                         f'r={hm.edges[j]:.2f}: {v:.4g}</title></rect>')
    parts.append(f'<text x="{W - PAD_R - 6}" y="{PAD_T + 14}" text-anchor="end">range {lo:.3g} .. {hi:.3g}</text>')
    return _write(path, parts)


def histogram_svg(path: str | Path, hist) -> Path:
    """Bars are coupling counts per distance bin, shaded by mean angular error."""
    edges, counts, err = hist.edges, hist.counts, hist.mean_error
    ax = _Axes((float(edges[0]), float(edges[-1])), (0.0, float(max(counts.max(), 1)) * 1.05))
    parts = _frame(ax, "coupling distance vs. one-step angular error", "|x - z|", "count")
    finite = err[np.isfinite(err)]
    lo, hi = (0.0, float(finite.max())) if finite.size else (0.0, 1.0)
    for i, c in enumerate(counts):
        x0, x1 = ax.px(edges[i]), ax.px(edges[i + 1])
        y = ax.py(c)
        fill = _color(err[i], lo, hi) if np.isfinite(err[i]) else "#eeeeee"
        parts.append(f'<rect x="{x0:.1f}" y="{y:.1f}" width="{max(x1 - x0 - 1, 0.5):.1f}" '
                     f'height="{ax.py(0) - y:.1f}" fill="{fill}" stroke="#666" stroke-width="0.5"/>')
    xp = ax.px(hist.p90_distance)
    parts.append(f'<line x1="{xp:.1f}" y1="{PAD_T}" x2="{xp:.1f}" y2="{H - PAD_B}" stroke="{PALETTE[0]}" '
                 'stroke-dasharray="4 3"/>')
    parts.append(f'<text x="{xp + 3:.1f}" y="{PAD_T + 12}" fill="{PALETTE[0]}">p90</text>')
    return _write(path, parts)
