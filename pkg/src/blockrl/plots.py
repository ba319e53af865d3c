"""Self-rendered SVG line plots.

A plot is fully described by its companion CSV (``series,x,y`` rows in draw
order) plus a title and axis labels carried in the CSV header comment, so
``render_svg(parse_plot_csv(text))`` reproduces the image byte for byte.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

CURVE_KINDS = {
    "total-reward": ("total_reward", "mean total reward"),
    "accuracy-reward": ("acc_reward", "mean accuracy reward"),
    "speed-reward": ("speed_reward", "mean TPF reward"),
    "collapse-ratio": ("collapse_ratio", "collapse ratio"),
}
PLOT_KINDS = tuple(CURVE_KINDS) + ("frontier",)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 160, 40, 50


@dataclass
class PlotData:
    title: str
    xlabel: str
    ylabel: str
    series: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def add(self, name: str, x: float, y: float) -> None:
        self.series.setdefault(name, []).append((float(x), float(y)))


def plot_csv(data: PlotData) -> str:
    buf = io.StringIO()
    buf.write(f"# title={data.title}|xlabel={data.xlabel}|ylabel={data.ylabel}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "x", "y"])
    for name, pts in data.series.items():
        for x, y in pts:
            w.writerow([name, repr(x), repr(y)])
    return buf.getvalue()


def parse_plot_csv(text: str) -> PlotData:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError("plot CSV is missing its header comment")
    meta = dict(part.split("=", 1) for part in lines[0][2:].split("|"))
    data = PlotData(meta["title"], meta["xlabel"], meta["ylabel"])
    for row in csv.DictReader(lines[1:]):
        data.add(row["series"], float(row["x"]), float(row["y"]))
    return data


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def _span(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_svg(data: PlotData) -> str:
    pts = [p for s in data.series.values() for p in s]
    if not pts:
        raise ValueError("nothing to plot")
    x0, x1 = _span([p[0] for p in pts])
    y0, y1 = _span([p[1] for p in pts])
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def sx(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(data.title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.2f}" y1="{TOP + ph}" x2="{sx(t):.2f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{TOP + ph + 16}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{LEFT - 4}" y1="{sy(t):.2f}" x2="{LEFT}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{sy(t) + 4:.2f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(data.xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{escape(data.ylabel)}</text>')
    for k, (name, series) in enumerate(data.series.items()):
        color = PALETTE[k % len(PALETTE)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in series)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        if len(series) <= 20:
            for x, y in series:
                out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{color}"/>')
        ly = TOP + 14 + 16 * k
        out.append(f'<line x1="{W - RIGHT + 10}" y1="{ly}" x2="{W - RIGHT + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 36}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_plot(kind: str, runs: dict[str, list[dict]]) -> PlotData:
    """Training curve of ``kind`` for each run (rows as read from a metrics CSV)."""
    column, label = CURVE_KINDS[kind]
    data = PlotData(kind, "iteration", label)
    for name, rows in runs.items():
        for r in rows:
            data.add(name, float(r["iteration"]), float(r[column]))
    return data


def frontier_plot(models: dict[str, list[dict]]) -> PlotData:
    """Accuracy against mean TPF, one point per threshold."""
    data = PlotData("frontier", "mean TPF", "accuracy (%)")
    for name, rows in models.items():
        for r in sorted(rows, key=lambda r: float(r["threshold"])):
            data.add(name, float(r["mean_tpf"]), float(r["accuracy"]))
    return data
