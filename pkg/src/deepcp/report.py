"""SVG charts and text tables from sweep summaries and trajectories.

The SVG is written by hand (no plotting library). All randomness (the small
horizontal jitter of scatter points) comes from a seeded generator, so the
same inputs give byte-identical files.
"""

from __future__ import annotations

import math
from collections import defaultdict
from html import escape
from typing import Optional, Sequence

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=55)


class ReportError(ValueError):
    pass


def _num(x) -> float:
    try:
        return float(x)
    except (TypeError, ValueError):
        return float("nan")


def usable_rows(rows: Sequence[dict]) -> list[dict]:
    """Rows that finished (not diverged or errored) with finite losses."""
    out = []
    for r in rows:
        if r.get("status") not in ("converged", "max_epochs"):
            continue
        if not np.isfinite(_num(r.get("final_test_loss"))):
            continue
        out.append(r)
    return out


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / count))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= count:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _color(t: float) -> str:
    """Blue (t=0) through yellow to red (t=1)."""
    t = min(max(t, 0.0), 1.0)
    stops = [(0.0, (49, 54, 149)), (0.5, (254, 224, 144)), (1.0, (165, 0, 38))]
    for (t0, c0), (t1, c1) in zip(stops, stops[1:]):
        if t <= t1:
            u = (t - t0) / (t1 - t0)
            return "#%02x%02x%02x" % tuple(round(a + u * (b - a)) for a, b in zip(c0, c1))
    return "#a50026"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        ]
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
        self.xlabel, self.ylabel = xlabel, ylabel

    def axes(self, xlim, ylim, xticks, yticks, ylog=False, yfmt="{:g}"):
        self.xlim, self.ylim, self.ylog = xlim, ylim, ylog
        p = self.parts
        p.append(f'<rect x="{self.x0}" y="{self.y1}" width="{self.x1 - self.x0}" '
                 f'height="{self.y0 - self.y1}" fill="none" stroke="black"/>')
        for t in xticks:
            x = self.sx(t)
            p.append(f'<line x1="{x:.1f}" y1="{self.y0}" x2="{x:.1f}" y2="{self.y0 + 5}" stroke="black"/>')
            p.append(f'<text x="{x:.1f}" y="{self.y0 + 18}" text-anchor="middle">{t:g}</text>')
        for t in yticks:
            y = self.sy(t)
            p.append(f'<line x1="{self.x0 - 5}" y1="{y:.1f}" x2="{self.x0}" y2="{y:.1f}" stroke="black"/>')
            p.append(f'<text x="{self.x0 - 8}" y="{y + 4:.1f}" text-anchor="end">{yfmt.format(t)}</text>')
        p.append(f'<text x="{(self.x0 + self.x1) / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">'
                 f'{escape(self.xlabel)}</text>')
        p.append(f'<text transform="translate(18,{(self.y0 + self.y1) / 2:.1f}) rotate(-90)" '
                 f'text-anchor="middle">{escape(self.ylabel)}</text>')

    def sx(self, v):
        lo, hi = self.xlim
        return self.x0 + (v - lo) / (hi - lo) * (self.x1 - self.x0)

    def sy(self, v):
        lo, hi = self.ylim
        if self.ylog:
            v, lo, hi = math.log10(v), math.log10(lo), math.log10(hi)
        return self.y0 - (v - lo) / (hi - lo) * (self.y0 - self.y1)

    def colorbar(self, lo: float, hi: float, label: str, log: bool):
        x, top, h = self.x1 + 30, self.y1 + 20, self.y0 - self.y1 - 40
        p = self.parts
        p.append('<defs><linearGradient id="cbar" x1="0" y1="1" x2="0" y2="0">'
                 + "".join(f'<stop offset="{t:.2f}" stop-color="{_color(t)}"/>' for t in np.linspace(0, 1, 11))
                 + "</linearGradient></defs>")
        p.append(f'<rect x="{x}" y="{top}" width="16" height="{h}" fill="url(#cbar)" stroke="black"/>')
        p.append(f'<text x="{x + 22}" y="{top + 4}">{hi:.3g}</text>')
        p.append(f'<text x="{x + 22}" y="{top + h + 4}">{lo:.3g}</text>')
        scale = " (log)" if log else ""
        p.append(f'<text x="{x - 4}" y="{top - 8}">{escape(label)}{scale}</text>')

    def svg(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def scatter_svg(x: Sequence[float], y: Sequence[float], title: str, xlabel: str, ylabel: str,
                color: Optional[Sequence[float]] = None, color_label: str = "", jitter: float = 0.15,
                seed: int = 0, ylog: bool = False, log_color: bool = True) -> str:
    """Scatter with seeded horizontal jitter; the color scale spans the data's own min and max."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.size == 0:
        raise ReportError("nothing to plot: no usable rows")
    rng = np.random.default_rng(seed)
    xj = x + rng.uniform(-jitter, jitter, size=x.size)
    c = _Canvas(title, xlabel, ylabel)
    xlim = (float(x.min()) - 0.5, float(x.max()) + 0.5)
    if ylog:
        pos = y[y > 0]
        if pos.size == 0:
            raise ReportError("log scale needs positive values")
        lo, hi = 10 ** math.floor(math.log10(pos.min())), 10 ** math.ceil(math.log10(pos.max()))
        hi = hi if hi > lo else lo * 10
        yt = [10.0 ** e for e in range(int(round(math.log10(lo))), int(round(math.log10(hi))) + 1)]
        c.axes(xlim, (lo, hi), sorted(set(x.tolist())), yt, ylog=True, yfmt="{:.0e}")
    else:
        lo, hi = float(min(y.min(), 0)), float(y.max())
        hi = hi + 1 if hi <= lo else hi + 0.05 * (hi - lo)
        c.axes(xlim, (lo, hi), sorted(set(x.tolist())), _ticks(lo, hi))
    cols = ["#1f77b4"] * x.size
    if color is not None:
        cv = np.asarray(color, float)
        clo, chi = float(np.nanmin(cv)), float(np.nanmax(cv))
        use_log = log_color and clo > 0
        f = np.log10 if use_log else (lambda v: v)
        span = f(chi) - f(clo)
        cols = [_color((f(v) - f(clo)) / span if span > 0 else 0.5) for v in cv]
        c.colorbar(clo, chi, color_label, use_log)
    for xi, yi, col in zip(xj, y, cols):
        if ylog and yi <= 0:
            continue
        c.parts.append(f'<circle cx="{c.sx(xi):.2f}" cy="{c.sy(yi):.2f}" r="3.5" fill="{col}" '
                       f'fill-opacity="0.85" stroke="black" stroke-width="0.3"/>')
    return c.svg()


def lines_svg(xs: Sequence[float], series: dict, title: str, xlabel: str, ylabel: str) -> str:
    """One polyline per named series over a shared x axis."""
    xs = np.asarray(xs, float)
    if xs.size == 0 or not series:
        raise ReportError("nothing to plot: empty trajectory")
    vals = np.array([np.asarray(v, float) for v in series.values()])
    hi = float(np.nanmax(vals)) if np.isfinite(vals).any() else 1.0
    hi = hi * 1.05 if hi > 0 else 1.0
    c = _Canvas(title, xlabel, ylabel)
    c.axes((float(xs.min()), float(xs.max()) if xs.max() > xs.min() else float(xs.min()) + 1),
           (0.0, hi), _ticks(float(xs.min()), float(xs.max())), _ticks(0.0, hi))
    for j, (name, v) in enumerate(series.items()):
        col = _color(j / max(1, len(series) - 1))
        pts = " ".join(f"{c.sx(a):.2f},{c.sy(b):.2f}" for a, b in zip(xs, v) if np.isfinite(b))
        c.parts.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.2">'
                       f'<title>{escape(str(name))}</title></polyline>')
    return c.svg()


def depth_rank_svg(rows: Sequence[dict], seed: int = 0) -> str:
    rows = usable_rows(rows)
    return scatter_svg([_num(r["depth"]) for r in rows], [_num(r["effective_rank"]) for r in rows],
                       "Effective rank of the learned tensor by depth", "depth", "effective rank",
                       color=[_num(r["final_test_loss"]) for r in rows], color_label="test loss", seed=seed)


def depth_loss_svg(rows: Sequence[dict], seed: int = 0) -> str:
    rows = usable_rows(rows)
    return scatter_svg([_num(r["depth"]) for r in rows], [_num(r["final_test_loss"]) for r in rows],
                       "Held-out loss by depth", "depth", "test loss", seed=seed, ylog=True)


def block_norm_svg(traj: dict) -> str:
    """Deep block norms against epoch from a parsed trajectory CSV."""
    names = [k for k in traj if k.startswith("block_norm_deep_")]
    if "epoch" not in traj or not names:
        raise ReportError("trajectory file has no epoch or block_norm_deep_* columns")
    series = {n.removeprefix("block_norm_deep_"): traj[n] for n in names}
    return lines_svg(traj["epoch"], series, "Deep block norms along training", "epoch", "block norm")


def best_loss_table(summaries: dict) -> str:
    """Best held-out loss per depth with its run's effective rank in brackets.

    ``summaries`` maps a column label (e.g. an unobserved percentage) to rows.
    """
    if not summaries:
        raise ReportError("no summaries given")
    best = defaultdict(dict)
    depths = set()
    for label, rows in summaries.items():
        for r in usable_rows(rows):
            d = int(_num(r["depth"]))
            depths.add(d)
            loss = _num(r["final_test_loss"])
            if label not in best[d] or loss < best[d][label][0]:
                best[d][label] = (loss, int(_num(r["effective_rank"])))
    if not depths:
        raise ReportError("no usable rows in the summaries")
    labels = list(summaries)
    head = ["depth"] + [f"{lab}" for lab in labels]
    body = []
    for d in sorted(depths):
        cells = [str(d)]
        for lab in labels:
            cells.append(f"{best[d][lab][0]:.3e} ({best[d][lab][1]})" if lab in best[d] else "-")
        body.append(cells)
    widths = [max(len(r[j]) for r in [head] + body) for j in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [head] + body]
    note = "best held-out loss per depth and column, effective rank of that run in brackets"
    return "\n".join([note] + lines) + "\n"
