"""Static SVG emission for trace curves and report bar charts.

Hand-rolled rather than pulling in a plotting stack: the figures are a couple
of axes, polylines, and bars, and byte-stable output matters for replayable
artifacts. All floats are written with a fixed format so the same data always
yields the same file.
"""

import csv
import io

import numpy as np

_MARGIN_L = 64.0
_MARGIN_R = 16.0
_MARGIN_T = 34.0
_MARGIN_B = 56.0

# qualitative series palette; wraps if a figure has more lines than entries
PALETTE = ("#1f6f8b", "#c1443c", "#54882e", "#7a4f9f", "#b8860b", "#3b3b3b")


def _f(value: float) -> str:
    return format(float(value), ".4f").rstrip("0").rstrip(".")


def _esc(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


class _Canvas:
    """Accumulates SVG elements for one fixed-size drawing."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts = []

    def line(self, x1, y1, x2, y2, color="#444", width=1.0):
        self.parts.append(
            f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
            f'stroke="{color}" stroke-width="{_f(width)}"/>'
        )

    def polyline(self, xs, ys, color, width=1.5):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{_f(width)}"/>'
        )

    def rect(self, x, y, w, h, color):
        self.parts.append(
            f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" '
            f'fill="{color}"/>'
        )

    def text(self, x, y, s, size=11, anchor="middle", rotate=None, color="#222"):
        transform = ""
        if rotate is not None:
            transform = f' transform="rotate({_f(rotate)} {_f(x)} {_f(y)})"'
        self.parts.append(
            f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" '
            f'text-anchor="{anchor}" fill="{color}" '
            f'font-family="sans-serif"{transform}>{_esc(s)}</text>'
        )

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">\n'
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = np.ceil(lo / step) * step
    ticks = np.arange(start, hi + step * 0.5, step)
    return [float(t) for t in ticks]


class _Frame:
    """Maps data coordinates into the plot area and draws the axes."""

    def __init__(self, canvas: _Canvas, xlim, ylim):
        self.c = canvas
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        self.left = _MARGIN_L
        self.right = canvas.width - _MARGIN_R
        self.top = _MARGIN_T
        self.bottom = canvas.height - _MARGIN_B

    def x(self, v):
        span = self.x1 - self.x0 or 1.0
        return self.left + (v - self.x0) / span * (self.right - self.left)

    def y(self, v):
        span = self.y1 - self.y0 or 1.0
        return self.bottom - (v - self.y0) / span * (self.bottom - self.top)

    def axes(self, xlabel, ylabel, xticks=True):
        c = self.c
        c.line(self.left, self.bottom, self.right, self.bottom)
        c.line(self.left, self.bottom, self.left, self.top)
        if xticks:
            for t in _nice_ticks(self.x0, self.x1):
                px = self.x(t)
                c.line(px, self.bottom, px, self.bottom + 4)
                c.text(px, self.bottom + 16, _f(t), size=9)
        for t in _nice_ticks(self.y0, self.y1):
            py = self.y(t)
            c.line(self.left - 4, py, self.left, py)
            c.text(self.left - 7, py + 3, _f(t), size=9, anchor="end")
        c.text((self.left + self.right) / 2, self.c.height - 10, xlabel, size=11)
        c.text(16, (self.top + self.bottom) / 2, ylabel, size=11,
               rotate=-90.0)


def line_chart(series, title: str, xlabel: str, ylabel: str,
               width: int = 560, height: int = 360) -> str:
    """Polyline figure; series is a list of (label, xs, ys) triples."""
    series = [(label, np.asarray(xs, float), np.asarray(ys, float))
              for label, xs, ys in series]
    if not series or any(xs.size == 0 or xs.size != ys.size
                         for _, xs, ys in series):
        raise ValueError("each series needs matching, non-empty xs and ys")
    all_x = np.concatenate([xs for _, xs, _ in series])
    all_y = np.concatenate([ys for _, _, ys in series])
    canvas = _Canvas(width, height)
    frame = _Frame(canvas, (float(all_x.min()), float(all_x.max())),
                   (min(0.0, float(all_y.min())), float(all_y.max()) * 1.05))
    frame.axes(xlabel, ylabel)
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        canvas.polyline([frame.x(v) for v in xs], [frame.y(v) for v in ys],
                        color)
        canvas.text(frame.right - 4, frame.top + 14 * (k + 1), label, size=10,
                    anchor="end", color=color)
    canvas.text(width / 2, 18, title, size=13)
    return canvas.render()


def bar_chart(labels, values, title: str, ylabel: str,
              width: int = 640, height: int = 380) -> str:
    """Vertical bars with slanted labels; negative bars hang below zero."""
    values = np.asarray(values, dtype=np.float64)
    labels = list(labels)
    if len(labels) != values.size or values.size == 0:
        raise ValueError("labels and values must align and be non-empty")
    canvas = _Canvas(width, height)
    lo = min(0.0, float(values.min()) * 1.05)
    hi = max(0.0, float(values.max()) * 1.05) or 1.0
    frame = _Frame(canvas, (0.0, float(values.size)), (lo, hi))
    frame.axes("", ylabel, xticks=False)
    zero = frame.y(0.0)
    slot = (frame.right - frame.left) / values.size
    bar_w = slot * 0.7
    for k, (label, v) in enumerate(zip(labels, values)):
        px = frame.left + slot * k + (slot - bar_w) / 2
        py = frame.y(v)
        canvas.rect(px, min(py, zero), bar_w, abs(py - zero) or 0.5,
                    PALETTE[0] if v >= 0 else PALETTE[1])
        canvas.text(px + bar_w / 2, frame.bottom + 12, label, size=9,
                    anchor="end", rotate=-35.0)
    canvas.line(frame.left, zero, frame.right, zero, color="#888", width=0.8)
    canvas.text(width / 2, 18, title, size=13)
    return canvas.render()


# --------------------------------------------------------------------------
# Figure builders


def trace_figure(trace_csv: str, title: str = "attack trace") -> str:
    """Peak activation against perturbation budget from a trace CSV."""
    reader = csv.reader(io.StringIO(trace_csv))
    header = next(reader, None)
    if not header or header[0] != "iteration" or "rmse" not in header:
        raise ValueError("not an attack trace CSV")
    rows = [list(map(float, row)) for row in reader]
    if not rows:
        raise ValueError("trace has no iterations")
    data = np.array(rows)
    rmse_col = header.index("rmse")
    series = []
    for col in range(1, rmse_col):
        label = header[col].removeprefix("peak_")
        series.append((label, data[:, rmse_col], data[:, col]))
    return line_chart(series, title, "perturbation rmse", "peak activation")


def report_figure(report, label: str, title: str) -> str:
    """Per-column percent increases of one report row as bars."""
    return bar_chart(report.columns, report.percent_increase(label), title,
                     "shape error increase (%)")
