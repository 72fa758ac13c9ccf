"""Minimal hand-written SVG charts: bars, lines and boxplots.

Plots are views of finished reports and never feed back into numbers.
"""

from __future__ import annotations

import math
from html import escape
from typing import Mapping, Sequence

import numpy as np

W, H = 640, 400
ML, MR, MT, MB = 70, 20, 40, 60
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]


class _Canvas:
    def __init__(self, title: str, ylabel: str, lo: float, hi: float):
        if not (math.isfinite(lo) and math.isfinite(hi)):
            lo, hi = -1.0, 1.0
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        self.lo, self.hi = lo - pad, hi + pad
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'font-family="sans-serif" font-size="12">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="16" y="{(MT + H - MB) / 2}" transform="rotate(-90 16 {(MT + H - MB) / 2})" '
            f'text-anchor="middle">{escape(ylabel)}</text>',
        ]
        self._axes()

    def y(self, v: float) -> float:
        return MT + (self.hi - v) / (self.hi - self.lo) * (H - MT - MB)

    def _axes(self):
        x0, x1 = ML, W - MR
        self.parts.append(f'<line x1="{x0}" y1="{MT}" x2="{x0}" y2="{H - MB}" stroke="black"/>')
        for t in np.linspace(self.lo, self.hi, 5):
            yy = self.y(t)
            self.parts.append(f'<line x1="{x0 - 4}" y1="{yy:.1f}" x2="{x0}" y2="{yy:.1f}" stroke="black"/>')
            self.parts.append(
                f'<text x="{x0 - 6}" y="{yy + 4:.1f}" text-anchor="end">{t:.3g}</text>'
            )
        if self.lo < 0 < self.hi:
            self.parts.append(
                f'<line x1="{x0}" y1="{self.y(0):.1f}" x2="{x1}" y2="{self.y(0):.1f}" '
                f'stroke="#999" stroke-dasharray="4 3"/>'
            )

    def xlabel(self, x: float, text: str):
        self.parts.append(
            f'<text x="{x:.1f}" y="{H - MB + 18}" text-anchor="middle">{escape(text)}</text>'
        )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _slot(k: int, n: int) -> float:
    return ML + (k + 0.5) * (W - ML - MR) / n


def _finite(vals) -> list[float]:
    return [v for v in vals if v is not None and math.isfinite(v)]


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str,
              ylabel: str = "RI") -> str:
    vals = _finite(values)
    c = _Canvas(title, ylabel, min(vals + [0.0]), max(vals + [0.0]))
    width = 0.6 * (W - ML - MR) / max(len(labels), 1)
    for k, (lab, v) in enumerate(zip(labels, values)):
        x = _slot(k, len(labels))
        c.xlabel(x, lab)
        if v is None or not math.isfinite(v):
            continue
        top, bottom = sorted((c.y(v), c.y(0)))
        c.parts.append(
            f'<rect x="{x - width / 2:.1f}" y="{top:.1f}" width="{width:.1f}" '
            f'height="{bottom - top:.1f}" fill="{PALETTE[k % len(PALETTE)]}"/>'
        )
    return c.render()


def line_chart(xs: Sequence, series: Mapping[str, Sequence[float]], title: str,
               ylabel: str = "RI", xlabel: str = "") -> str:
    vals = _finite([v for s in series.values() for v in s])
    c = _Canvas(title, ylabel, min(vals, default=0.0), max(vals, default=1.0))
    for k, x in enumerate(xs):
        c.xlabel(_slot(k, len(xs)), str(x))
    if xlabel:
        c.parts.append(f'<text x="{W / 2}" y="{H - 14}" text-anchor="middle">{escape(xlabel)}</text>')
    for j, (name, ys) in enumerate(series.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = [(_slot(k, len(xs)), c.y(v)) for k, v in enumerate(ys) if math.isfinite(v)]
        if pts:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            c.parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            for x, y in pts:
                c.parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
        c.parts.append(
            f'<text x="{W - MR - 4}" y="{MT + 14 * (j + 1)}" text-anchor="end" fill="{color}">'
            f"{escape(name)}</text>"
        )
    return c.render()


def box_chart(groups: Sequence[tuple[str, Sequence[float]]], title: str,
              ylabel: str = "marginal contribution") -> str:
    vals = _finite([v for _, g in groups for v in g])
    c = _Canvas(title, ylabel, min(vals, default=0.0), max(vals, default=1.0))
    half = 0.3 * (W - ML - MR) / max(len(groups), 1)
    for k, (lab, g) in enumerate(groups):
        x = _slot(k, len(groups))
        c.xlabel(x, lab)
        g = np.array(_finite(g))
        if g.size == 0:
            continue
        q1, med, q3 = np.percentile(g, [25, 50, 75])
        lo, hi = g.min(), g.max()
        c.parts += [
            f'<line x1="{x:.1f}" y1="{c.y(hi):.1f}" x2="{x:.1f}" y2="{c.y(lo):.1f}" stroke="black"/>',
            f'<rect x="{x - half:.1f}" y="{c.y(q3):.1f}" width="{2 * half:.1f}" '
            f'height="{max(c.y(q1) - c.y(q3), 0.5):.1f}" fill="#9ecae1" stroke="black"/>',
            f'<line x1="{x - half:.1f}" y1="{c.y(med):.1f}" x2="{x + half:.1f}" '
            f'y2="{c.y(med):.1f}" stroke="black" stroke-width="2"/>',
        ]
    return c.render()


def report_figures(report) -> dict[str, str]:
    """SVG files for an importance report: RI bars and one RI^r boxplot per rule."""
    labels = [str(r) for r in report.rules]
    figs = {"ri.svg": bar_chart(labels, report.ri, "rule importance")}
    if report.method == "exact":
        figs["fi.svg"] = bar_chart(labels, report.fi, "full importance", "FI")
        for rule, curve in zip(report.rules, report.curves):
            groups = [(str(r), vals) for r, (_, vals) in sorted(curve.items())]
            figs[f"relying_rule{rule}.svg"] = box_chart(
                groups, f"rule {rule} by number of other rules"
            )
    for ch, vals in report.per_variable.items():
        figs[f"ri_{ch}.svg"] = bar_chart(labels, vals, f"rule importance on {ch}")
    return figs
