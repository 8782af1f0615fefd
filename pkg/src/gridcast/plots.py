"""Artifact emitters: grayscale frame images and SVG line charts.

Kept dependency-free on purpose: PGM is a three-line header plus raw bytes,
and a line chart is a couple dozen SVG elements. Both formats open in
standard viewers and diff cleanly in version control.
"""

from __future__ import annotations

import math

import numpy as np

from gridcast.tensor import GridcastError, ShapeError

__all__ = ["write_pgm", "read_pgm", "svg_line_chart"]


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-d array as binary PGM; floats map [0, 1] onto [0, 255]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"image must be 2-d, got {image.shape}")
    if image.dtype == np.uint8:
        pixels = image
    else:
        pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by write_pgm back into uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise GridcastError(f"{path}: not a binary PGM file")
    try:
        w, h = (int(tok) for tok in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise GridcastError(f"{path}: bad PGM header") from exc
    if maxval != 255 or len(parts[3]) < w * h:
        raise GridcastError(f"{path}: unsupported or truncated PGM")
    return np.frombuffer(parts[3][:w * h], dtype=np.uint8).reshape(h, w)


_COLORS = ("#1f6fb2", "#d1495b", "#3f9b5f", "#8a5cb8", "#c88a1f", "#4a4a4a")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def svg_line_chart(series: dict[str, tuple], title: str = "",
                   x_label: str = "", y_label: str = "",
                   width: int = 640, height: int = 420) -> str:
    """Render named (xs, ys) series as an SVG string.

    Non-finite y values split the polyline, so NaN gaps stay visible as
    gaps instead of being interpolated over.
    """
    if not series:
        raise GridcastError("no series to plot")
    ml, mr, mt, mb = 62, 16, 34, 46
    pw, ph = width - ml - mr, height - mt - mb
    xs_all, ys_all = [], []
    for xs, ys in series.values():
        xs_all += [float(x) for x in xs]
        ys_all += [float(y) for y in ys if math.isfinite(float(y))]
    if not xs_all:
        raise GridcastError("series have no points")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo = min(ys_all) if ys_all else 0.0
    y_hi = max(ys_all) if ys_all else 1.0
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi += 0.5
        y_lo -= 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo -= pad
    y_hi += pad

    def px(x: float) -> float:
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y: float) -> float:
        return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             '<g font-family="sans-serif" font-size="12">']
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="20" '
                     f'text-anchor="middle" font-size="14">{title}</text>')
    # axes box and grid lines
    parts.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
                 'fill="none" stroke="#444"/>')
    for tx in _ticks(x_lo, x_hi):
        x = px(tx)
        parts.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" '
                     f'y2="{mt + ph + 4}" stroke="#444"/>')
        parts.append(f'<text x="{x:.1f}" y="{mt + ph + 17}" '
                     f'text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        y = py(ty)
        parts.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" '
                     f'y2="{y:.1f}" stroke="#444"/>')
        parts.append(f'<text x="{ml - 7}" y="{y + 4:.1f}" '
                     f'text-anchor="end">{_fmt(ty)}</text>')
        parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" '
                     f'y2="{y:.1f}" stroke="#eee"/>')
    if x_label:
        parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" '
                     f'text-anchor="middle">{x_label}</text>')
    if y_label:
        parts.append(f'<text x="16" y="{mt + ph / 2:.1f}" '
                     f'text-anchor="middle" transform="rotate(-90 16 '
                     f'{mt + ph / 2:.1f})">{y_label}</text>')
    # data series with NaN-separated segments
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        segment: list[str] = []
        segments: list[list[str]] = []
        for x, y in zip(xs, ys):
            y = float(y)
            if math.isfinite(y):
                segment.append(f"{px(float(x)):.1f},{py(y):.1f}")
            elif segment:
                segments.append(segment)
                segment = []
        if segment:
            segments.append(segment)
        for seg in segments:
            if len(seg) == 1:
                cx, cy = seg[0].split(",")
                parts.append(f'<circle cx="{cx}" cy="{cy}" r="2.5" '
                             f'fill="{color}"/>')
            else:
                parts.append(f'<polyline points="{" ".join(seg)}" '
                             f'fill="none" stroke="{color}" '
                             'stroke-width="1.8"/>')
        ly = mt + 16 + 16 * i
        parts.append(f'<line x1="{ml + pw - 120}" y1="{ly - 4}" '
                     f'x2="{ml + pw - 96}" y2="{ly - 4}" stroke="{color}" '
                     'stroke-width="1.8"/>')
        parts.append(f'<text x="{ml + pw - 90}" y="{ly}">{name}</text>')
    parts.append("</g></svg>")
    return "\n".join(parts) + "\n"
