"""Minimal single-panel SVG charts (lines, points, bars, arrows).

Output is a pure function of the inputs: no timestamps, fixed number
formatting, so files are byte-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

W, H = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 30, 45
PALETTE = ("#1b6ca8", "#d1495b", "#66a182", "#edae49", "#8d6a9f", "#2e4057", "#00798c")


def _n(v: float) -> str:
    return f"{v:.2f}"


@dataclass
class Figure:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    _items: list[str] = field(default_factory=list)
    _xs: list[float] = field(default_factory=list)
    _ys: list[float] = field(default_factory=list)
    _draw: list = field(default_factory=list)

    def _extend(self, x, y):
        self._xs += [float(v) for v in np.ravel(x) if np.isfinite(v)]
        self._ys += [float(v) for v in np.ravel(y) if np.isfinite(v)]

    def line(self, x, y, color: str = PALETTE[0]) -> Figure:
        self._extend(x, y)
        self._draw.append(("line", np.asarray(x, float), np.asarray(y, float), color))
        return self

    def points(self, x, y, colors: Sequence[str] | None = None, labels: Sequence[str] | None = None) -> Figure:
        self._extend(x, y)
        self._draw.append(("points", np.asarray(x, float), np.asarray(y, float), colors, labels))
        return self

    def arrows(self, u, v, labels: Sequence[str]) -> Figure:
        self._extend(np.r_[0.0, u], np.r_[0.0, v])
        self._draw.append(("arrows", np.asarray(u, float), np.asarray(v, float), labels))
        return self

    def bars(self, labels: Sequence[str], values: Sequence[float]) -> Figure:
        vals = np.asarray(values, float)
        self._extend([-0.5, len(vals) - 0.5], np.r_[0.0, vals])
        self._draw.append(("bars", list(labels), vals))
        return self

    def _scales(self):
        x0, x1 = (min(self._xs), max(self._xs)) if self._xs else (0.0, 1.0)
        y0, y1 = (min(self._ys), max(self._ys)) if self._ys else (0.0, 1.0)
        if x1 == x0:
            x0, x1 = x0 - 1, x1 + 1
        if y1 == y0:
            y0, y1 = y0 - 1, y1 + 1
        px = (x1 - x0) * 0.05
        py = (y1 - y0) * 0.05
        x0, x1, y0, y1 = x0 - px, x1 + px, y0 - py, y1 + py
        sx = lambda x: LEFT + (np.asarray(x) - x0) / (x1 - x0) * (W - LEFT - RIGHT)  # noqa: E731
        sy = lambda y: H - BOTTOM - (np.asarray(y) - y0) / (y1 - y0) * (H - TOP - BOTTOM)  # noqa: E731
        return (x0, x1, y0, y1), sx, sy

    def render(self) -> str:
        (x0, x1, y0, y1), sx, sy = self._scales()
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
               f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
               f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>']
        out.append(f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>')
        out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>')
        bar_mode = any(d[0] == "bars" for d in self._draw)
        for t in np.linspace(y0, y1, 5):
            y = sy(t)
            out.append(f'<line x1="{LEFT - 4}" y1="{_n(y)}" x2="{LEFT}" y2="{_n(y)}" stroke="black"/>')
            out.append(f'<text x="{LEFT - 6}" y="{_n(y + 4)}" text-anchor="end">{t:.3g}</text>')
        if not bar_mode:
            for t in np.linspace(x0, x1, 5):
                x = sx(t)
                out.append(f'<line x1="{_n(x)}" y1="{H - BOTTOM}" x2="{_n(x)}" y2="{H - BOTTOM + 4}" stroke="black"/>')
                out.append(f'<text x="{_n(x)}" y="{H - BOTTOM + 16}" text-anchor="middle">{t:.3g}</text>')
        if y0 < 0 < y1:
            out.append(f'<line x1="{LEFT}" y1="{_n(sy(0))}" x2="{W - RIGHT}" y2="{_n(sy(0))}" '
                       'stroke="#999" stroke-dasharray="3,3"/>')
        for d in self._draw:
            kind = d[0]
            if kind == "line":
                _, x, y, color = d
                pts = " ".join(f"{_n(a)},{_n(b)}" for a, b in zip(sx(x), sy(y)))
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
            elif kind == "points":
                _, x, y, colors, labels = d
                for i, (a, b) in enumerate(zip(sx(x), sy(y))):
                    c = colors[i] if colors is not None else PALETTE[0]
                    out.append(f'<circle cx="{_n(a)}" cy="{_n(b)}" r="4" fill="{c}"/>')
                    if labels is not None:
                        out.append(f'<text x="{_n(a + 5)}" y="{_n(b - 5)}">{escape(str(labels[i]))}</text>')
            elif kind == "arrows":
                _, u, v, labels = d
                ox, oy = sx(0.0), sy(0.0)
                for a, b, lab in zip(sx(u), sy(v), labels):
                    out.append(f'<line x1="{_n(ox)}" y1="{_n(oy)}" x2="{_n(a)}" y2="{_n(b)}" '
                               'stroke="#444" stroke-width="1.5"/>')
                    out.append(f'<circle cx="{_n(a)}" cy="{_n(b)}" r="2" fill="#444"/>')
                    out.append(f'<text x="{_n(a + 3)}" y="{_n(b - 3)}" fill="#444">{escape(str(lab))}</text>')
            elif kind == "bars":
                _, labels, vals = d
                base = sy(0.0)
                for i, (lab, v) in enumerate(zip(labels, vals)):
                    a, b = sx(i - 0.35), sx(i + 0.35)
                    top = sy(v)
                    y, h = min(top, base), abs(base - top)
                    out.append(f'<rect x="{_n(a)}" y="{_n(y)}" width="{_n(b - a)}" height="{_n(h)}" '
                               f'fill="{PALETTE[0]}"/>')
                    out.append(f'<text x="{_n(sx(i))}" y="{H - BOTTOM + 16}" text-anchor="middle">'
                               f'{escape(str(lab))}</text>')
        if self.title:
            out.append(f'<text x="{W / 2:.2f}" y="18" text-anchor="middle" font-size="13">{escape(self.title)}</text>')
        if self.xlabel:
            out.append(f'<text x="{(LEFT + W - RIGHT) / 2:.2f}" y="{H - 8}" text-anchor="middle">'
                       f'{escape(self.xlabel)}</text>')
        if self.ylabel:
            out.append(f'<text x="14" y="{(TOP + H - BOTTOM) / 2:.2f}" text-anchor="middle" '
                       f'transform="rotate(-90 14 {(TOP + H - BOTTOM) / 2:.2f})">{escape(self.ylabel)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.render(), encoding="utf-8")
