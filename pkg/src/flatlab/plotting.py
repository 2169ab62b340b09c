"""Dependency-free SVG line charts for trajectory CSVs."""

from __future__ import annotations

import csv
import math
import re
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class PlotError(ValueError):
    pass


def read_columns(path, columns, x="epoch"):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PlotError(f"{path} is empty") from None
        missing = [c for c in (x, *columns) if c not in header]
        if missing:
            raise PlotError(f"columns {missing} not in {path}")
        idx = {c: header.index(c) for c in (x, *columns)}
        data = {c: [] for c in idx}
        for k, line in enumerate(reader, start=2):
            if len(line) != len(header):
                raise PlotError(f"{path}:{k}: expected {len(header)} fields")
            try:
                for c, i in idx.items():
                    data[c].append(float(line[i]))
            except ValueError as exc:
                raise PlotError(f"{path}:{k}: {exc}") from None
    return data


def _transform(v, log):
    if log:
        return math.log10(v) if v > 0 else None
    return v if math.isfinite(v) else None


def _range(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def svg_chart(xs, series: dict, title="", log_y=False) -> str:
    ty = {k: [_transform(v, log_y) for v in vs] for k, vs in series.items()}
    x0, x1 = _range(xs)
    y0, y1 = _range([v for vs in ty.values() for v in vs])
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def px(x):
        return MARGIN + (x - x0) / (x1 - x0) * pw

    def py(y):
        return HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" data-xmin="{x0:.17g}" data-xmax="{x1:.17g}" '
           f'data-ymin="{y0:.17g}" data-ymax="{y1:.17g}" data-logy="{int(log_y)}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="14">'
           f'{escape(title)}</text>']
    for t in range(5):
        fy = y0 + (y1 - y0) * t / 4
        lab = f"1e{fy:.2g}" if log_y else f"{fy:.3g}"
        out.append(f'<text x="{MARGIN - 6}" y="{py(fy):.2f}" text-anchor="end" font-size="10">{lab}</text>')
        fx = x0 + (x1 - x0) * t / 4
        out.append(f'<text x="{px(fx):.2f}" y="{HEIGHT - MARGIN + 14}" text-anchor="middle" '
                   f'font-size="10">{fx:.4g}</text>')
    for k, (name, vs) in enumerate(ty.items()):
        color = COLORS[k % len(COLORS)]
        run = []
        segments = []
        for x, v in zip(xs, vs):
            if v is None:
                if run:
                    segments.append(run)
                run = []
            else:
                run.append(f"{px(x):.6f},{py(v):.6f}")
        if run:
            segments.append(run)
        for seg in segments:
            out.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" '
                       f'stroke-width="1.5" points="{" ".join(seg)}"/>')
        out.append(f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * (k + 1)}" font-size="10" '
                   f'fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(csv_path, columns, out_path, log_y=False, title=None, x="epoch"):
    """Write an SVG chart of ``columns`` against ``x`` from a trajectory CSV."""
    data = read_columns(csv_path, columns, x)
    svg = svg_chart(data[x], {c: data[c] for c in columns},
                    title if title is not None else ", ".join(columns), log_y)
    with open(out_path, "w") as fh:
        fh.write(svg)
    return out_path


def parse_polylines(svg_text):
    """Recover (series, [(x, y), ...]) in data coordinates from an emitted chart."""
    head = re.search(r'data-xmin="([^"]+)" data-xmax="([^"]+)" data-ymin="([^"]+)" '
                     r'data-ymax="([^"]+)" data-logy="(\d)"', svg_text)
    if head is None:
        raise PlotError("not a flatlab chart")
    x0, x1, y0, y1 = map(float, head.groups()[:4])
    log_y = head.group(5) == "1"
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
    result = []
    for name, pts in re.findall(r'<polyline data-series="([^"]*)"[^>]*points="([^"]*)"', svg_text):
        vals = []
        for p in pts.split():
            sx, sy = map(float, p.split(","))
            x = x0 + (sx - MARGIN) / pw * (x1 - x0)
            y = y0 + (HEIGHT - MARGIN - sy) / ph * (y1 - y0)
            vals.append((x, 10 ** y if log_y else y))
        result.append((name, vals))
    return result
