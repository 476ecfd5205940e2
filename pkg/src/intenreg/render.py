"""Self-contained raster figures: matrix heatmaps and labelled bar charts."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw, ImageFont

__all__ = ["NAN_COLOR", "MID_COLOR", "colorize", "render_heatmap", "render_barchart"]

NAN_COLOR = (255, 0, 255)
MID_COLOR = (247, 247, 247)

# blue -> near white -> red
_DIVERGING = np.array([
    (33, 102, 172),
    (146, 197, 222),
    MID_COLOR,
    (244, 165, 130),
    (178, 24, 43),
], dtype=np.float64)

# viridis anchors
_SEQUENTIAL = np.array([
    (68, 1, 84),
    (59, 82, 139),
    (33, 145, 140),
    (94, 201, 98),
    (253, 231, 37),
], dtype=np.float64)


def _ramp(anchors, t):
    t = np.clip(t, 0.0, 1.0) * (len(anchors) - 1)
    i = np.minimum(np.floor(t).astype(int), len(anchors) - 2)
    f = (t - i)[..., None]
    return anchors[i] * (1.0 - f) + anchors[i + 1] * f


def colorize(values, diverging):
    """Map a matrix to RGB uint8. Deltas use a symmetric range about 0,
    DICE values the fixed range [0, 1]."""
    v = np.asarray(values, dtype=np.float64)
    nan = np.isnan(v)
    if diverging:
        finite = np.abs(v[~nan])
        lim = finite.max() if finite.size and finite.max() > 0 else 1.0
        t = 0.5 + 0.5 * np.where(nan, 0.0, v) / lim
        rgb = _ramp(_DIVERGING, t)
        rgb[np.where(nan, False, v == 0.0)] = MID_COLOR
    else:
        rgb = _ramp(_SEQUENTIAL, np.where(nan, 0.0, v))
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[nan] = NAN_COLOR
    return rgb


def render_heatmap(matrix, out_png, diverging=None, cell=None):
    """Write an n x n heatmap, each entry drawn as a square block of pixels.

    ``matrix`` may be a raw array or any object with a ``values`` attribute.
    When ``diverging`` is None, delta matrices (objects with a
    ``minuend_tag``) get the diverging map and everything else the
    sequential one.
    """
    values = np.asarray(getattr(matrix, "values", matrix), dtype=np.float64)
    if diverging is None:
        diverging = hasattr(matrix, "minuend_tag")
    n_r, n_c = values.shape
    if cell is None:
        cell = max(4, 384 // max(n_r, n_c))
    rgb = colorize(values, diverging)
    big = rgb.repeat(cell, axis=0).repeat(cell, axis=1)
    Image.fromarray(big, mode="RGB").save(out_png, format="PNG")
    return cell


def render_barchart(rows, out_png, title="", ylabel="", width=640, height=400):
    """Bar chart of ``(label, value)`` rows with axes and labels baked in."""
    rows = list(rows)
    font = ImageFont.load_default()
    img = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    left, right, top, bottom = 70, 20, 40, 70
    x0, x1, y0, y1 = left, width - right, top, height - bottom
    vals = [v for _, v in rows if np.isfinite(v)]
    lo = min(0.0, min(vals)) if vals else 0.0
    hi = max(0.0, max(vals)) if vals else 1.0
    if hi == lo:
        hi = lo + 1.0

    def ypix(v):
        return y1 - (v - lo) / (hi - lo) * (y1 - y0)

    draw.line([(x0, y0), (x0, y1)], fill=(0, 0, 0))
    zero = ypix(0.0)
    draw.line([(x0, zero), (x1, zero)], fill=(0, 0, 0))
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        yy = ypix(v)
        draw.line([(x0 - 4, yy), (x0, yy)], fill=(0, 0, 0))
        draw.text((4, yy - 6), f"{v:.3g}", fill=(0, 0, 0), font=font)
    if title:
        draw.text((x0, 10), title, fill=(0, 0, 0), font=font)
    if ylabel:
        draw.text((4, y0 - 30), ylabel, fill=(0, 0, 0), font=font)
    if rows:
        slot = (x1 - x0) / len(rows)
        for i, (label, v) in enumerate(rows):
            bx0 = x0 + i * slot + slot * 0.15
            bx1 = x0 + (i + 1) * slot - slot * 0.15
            if np.isfinite(v):
                ya, yb = sorted((ypix(v), zero))
                draw.rectangle([bx0, ya, bx1, yb], fill=(70, 110, 180), outline=(0, 0, 0))
            else:
                draw.rectangle([bx0, y0, bx1, y1], outline=NAN_COLOR)
            draw.text((bx0, y1 + 8 + 14 * (i % 2)), str(label), fill=(0, 0, 0), font=font)
    img.save(out_png, format="PNG")
