"""Deterministic, dependency-free plot emission: 16-bit PGM image grids
and hand-rolled SVG curves/scatters. Byte-identical output for identical
inputs, so plots participate in reproducibility checks."""

from __future__ import annotations

import json

import numpy as np

_W, _H = 640, 480
_ML, _MR, _MT, _MB = 60, 20, 30, 45


def write_pgm(path: str, image: np.ndarray, gamma_stretch: float = 1.0) -> None:
    """Write a 16-bit P5 PGM with min-max scaling; the scaling constants
    land in a JSON sidecar next to the image."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo if hi > lo else 1.0
    norm = ((img - lo) / span) ** gamma_stretch
    data = np.round(norm * 65535).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
    with open(path + ".json", "w") as fh:
        json.dump({"min": lo, "max": hi, "gamma_stretch": gamma_stretch}, fh, sort_keys=True)
        fh.write("\n")


def tile_images(images: np.ndarray, n_cols: int = 4, pad: int = 2) -> np.ndarray:
    """Arrange a stack of equally sized images into one grid image."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    n_cols = min(n_cols, n)
    n_rows = (n + n_cols - 1) // n_cols
    canvas = np.zeros((n_rows * (h + pad) - pad, n_cols * (w + pad) - pad))
    for k in range(n):
        r, c = divmod(k, n_cols)
        canvas[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = images[k]
    return canvas


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _axes_svg(x_lo, x_hi, y_lo, y_hi, x_label, y_label, title) -> list[str]:
    parts = [
        f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" height="{_H - _MT - _MB}" '
        'fill="none" stroke="black"/>'
    ]
    for k in range(5):
        fx = _ML + (_W - _ML - _MR) * k / 4
        fy = _H - _MB + 0.0
        xv = x_lo + (x_hi - x_lo) * k / 4
        parts.append(
            f'<text x="{_fmt(fx)}" y="{_fmt(fy + 16)}" font-size="11" text-anchor="middle">{_fmt(xv)}</text>'
        )
        gy = _H - _MB - (_H - _MT - _MB) * k / 4
        yv = y_lo + (y_hi - y_lo) * k / 4
        parts.append(
            f'<text x="{_fmt(_ML - 6)}" y="{_fmt(gy + 4)}" font-size="11" text-anchor="end">{_fmt(yv)}</text>'
        )
    parts.append(
        f'<text x="{_W // 2}" y="{_H - 8}" font-size="13" text-anchor="middle">{x_label}</text>'
    )
    parts.append(
        f'<text x="14" y="{_H // 2}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 14 {_H // 2})">{y_label}</text>'
    )
    parts.append(f'<text x="{_W // 2}" y="18" font-size="14" text-anchor="middle">{title}</text>')
    return parts


def _to_px(x, y, x_lo, x_hi, y_lo, y_hi):
    sx = (_W - _ML - _MR) / (x_hi - x_lo if x_hi > x_lo else 1.0)
    sy = (_H - _MT - _MB) / (y_hi - y_lo if y_hi > y_lo else 1.0)
    return _ML + (x - x_lo) * sx, _H - _MB - (y - y_lo) * sy


_COLORS = ("steelblue", "firebrick", "seagreen", "darkorange", "purple")


def write_svg_curves(
    path: str,
    series: list[tuple[str, np.ndarray, np.ndarray]],
    x_label: str = "",
    y_label: str = "",
    title: str = "",
    y_range: tuple[float, float] | None = None,
    hlines: tuple[float, ...] = (),
) -> None:
    """Polyline chart of (label, x, y) series."""
    xs = np.concatenate([np.asarray(s[1], dtype=float) for s in series])
    ys = np.concatenate([np.asarray(s[2], dtype=float) for s in series])
    x_lo, x_hi = float(xs.min()), float(xs.max())
    if y_range is not None:
        y_lo, y_hi = y_range
    else:
        y_lo, y_hi = float(ys.min()), float(ys.max())
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    parts += _axes_svg(x_lo, x_hi, y_lo, y_hi, x_label, y_label, title)
    for y0 in hlines:
        px0, py = _to_px(x_lo, y0, x_lo, x_hi, y_lo, y_hi)
        px1, _ = _to_px(x_hi, y0, x_lo, x_hi, y_lo, y_hi)
        parts.append(
            f'<line x1="{_fmt(px0)}" y1="{_fmt(py)}" x2="{_fmt(px1)}" y2="{_fmt(py)}" '
            'stroke="gray" stroke-dasharray="4 3"/>'
        )
    for k, (label, sx, sy) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(
            f"{_fmt(px)},{_fmt(py)}"
            for px, py in (
                _to_px(float(a), float(b), x_lo, x_hi, y_lo, y_hi) for a, b in zip(sx, sy)
            )
        )
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{_W - _MR - 10}" y="{_MT + 18 + 16 * k}" font-size="12" '
            f'text-anchor="end" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def write_svg_scatter(
    path: str,
    x: np.ndarray,
    y: np.ndarray,
    x_label: str = "",
    y_label: str = "",
    title: str = "",
    fit_slope: float | None = None,
) -> None:
    """Scatter plot with an optional through-origin fit line."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x_lo, x_hi = 0.0, float(x.max()) * 1.05
    y_lo, y_hi = 0.0, float(y.max()) * 1.05
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    parts += _axes_svg(x_lo, x_hi, y_lo, y_hi, x_label, y_label, title)
    if fit_slope is not None:
        px0, py0 = _to_px(x_lo, fit_slope * x_lo, x_lo, x_hi, y_lo, y_hi)
        px1, py1 = _to_px(x_hi, fit_slope * x_hi, x_lo, x_hi, y_lo, y_hi)
        parts.append(
            f'<line x1="{_fmt(px0)}" y1="{_fmt(py0)}" x2="{_fmt(px1)}" y2="{_fmt(py1)}" '
            'stroke="firebrick" stroke-width="1.5"/>'
        )
    for a, b in zip(x, y):
        px, py = _to_px(float(a), float(b), x_lo, x_hi, y_lo, y_hi)
        parts.append(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="2" fill="steelblue" fill-opacity="0.6"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
