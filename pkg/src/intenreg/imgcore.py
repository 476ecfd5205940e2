"""Raster primitives: bilinear warping and its adjoint, label resampling,
moment-based affine pre-alignment and grayscale image I/O.

Conventions used throughout the package:

* an image is a ``(H, W)`` float64 array, nominally in ``[0, 1]``;
* a displacement field is a ``(2, H, W)`` float64 array holding the row and
  column offsets. It maps output coordinates to source sampling locations,
  ``out(x) = src(x + u(x))``;
* a segmentation is a ``(H, W)`` integer array, label 0 is background.

Out-of-range sampling coordinates are clamped to the image border.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError, ParseError, ValidationError

__all__ = [
    "AffineParams",
    "as_image",
    "as_field",
    "as_labels",
    "zero_field",
    "warp",
    "warp_backward",
    "warp_labels",
    "affine_prealign",
    "apply_affine",
    "affine_to_field",
    "invert_affine",
    "read_image",
    "write_image",
    "read_labels",
    "write_labels",
]


# --------------------------------------------------------------------------
# validation helpers


def as_image(data, name="image"):
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError(f"{name} contains non-finite values")
    return img


def as_field(data, shape=None, name="field"):
    field = np.asarray(data, dtype=np.float64)
    if field.ndim != 3 or field.shape[0] != 2:
        raise DimensionError(f"{name} must have shape (2, H, W), got {field.shape}")
    if shape is not None and field.shape[1:] != tuple(shape):
        raise DimensionError(f"{name} grid {field.shape[1:]} does not match image {tuple(shape)}")
    if not np.all(np.isfinite(field)):
        raise ValidationError(f"{name} contains non-finite values")
    return field


def as_labels(data, name="labels"):
    lab = np.asarray(data)
    if lab.ndim != 2 or lab.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2D array, got shape {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(np.mod(lab, 1) == 0):
            raise ValidationError(f"{name} must hold integer label ids")
        lab = lab.astype(np.int64)
    if lab.min() < 0:
        raise ValidationError(f"{name} must be non-negative")
    return lab


def _check_same(a_shape, b_shape, what):
    if tuple(a_shape) != tuple(b_shape):
        raise DimensionError(f"{what}: shape {tuple(a_shape)} != {tuple(b_shape)}")


def zero_field(shape):
    return np.zeros((2,) + tuple(shape), dtype=np.float64)


# --------------------------------------------------------------------------
# bilinear sampling


@dataclass
class _Sampler:
    """Precomputed corner indices and weights for one sampling grid."""

    r0: np.ndarray
    r1: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    fr: np.ndarray
    fc: np.ndarray
    inside_r: np.ndarray
    inside_c: np.ndarray


def _sampler(shape, field):
    h, w = shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    y = rr + field[0]
    x = cc + field[1]
    yc = np.clip(y, 0.0, h - 1.0)
    xc = np.clip(x, 0.0, w - 1.0)
    r0 = np.clip(np.floor(yc).astype(np.intp), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(xc).astype(np.intp), 0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    return _Sampler(
        r0=r0, r1=r1, c0=c0, c1=c1,
        fr=yc - r0, fc=xc - c0,
        # derivative is zero along an axis whose coordinate was clamped
        inside_r=(y >= 0.0) & (y <= h - 1.0) & (h > 1),
        inside_c=(x >= 0.0) & (x <= w - 1.0) & (w > 1),
    )


def warp(source, field):
    """Resample ``source`` at ``x + field(x)`` with bilinear interpolation."""
    src = as_image(source, "source")
    fld = as_field(field, src.shape)
    s = _sampler(src.shape, fld)
    v00 = src[s.r0, s.c0]
    v01 = src[s.r0, s.c1]
    v10 = src[s.r1, s.c0]
    v11 = src[s.r1, s.c1]
    return ((1.0 - s.fr) * ((1.0 - s.fc) * v00 + s.fc * v01)
            + s.fr * ((1.0 - s.fc) * v10 + s.fc * v11))


def warp_backward(source, field, upstream):
    """Pull ``d loss / d warped`` back to ``d loss / d field``.

    Returns a ``(2, H, W)`` array. Along an axis where the sampling
    coordinate was clamped the derivative is zero.
    """
    src = as_image(source, "source")
    fld = as_field(field, src.shape)
    up = as_image(upstream, "upstream")
    _check_same(src.shape, up.shape, "warp_backward upstream")
    s = _sampler(src.shape, fld)
    v00 = src[s.r0, s.c0]
    v01 = src[s.r0, s.c1]
    v10 = src[s.r1, s.c0]
    v11 = src[s.r1, s.c1]
    d_row = (1.0 - s.fc) * (v10 - v00) + s.fc * (v11 - v01)
    d_col = (1.0 - s.fr) * (v01 - v00) + s.fr * (v11 - v10)
    grad = np.empty_like(fld)
    grad[0] = np.where(s.inside_r, up * d_row, 0.0)
    grad[1] = np.where(s.inside_c, up * d_col, 0.0)
    return grad


def warp_labels(seg, field):
    """Nearest-neighbour resampling of a label map (no mixing of label ids)."""
    lab = as_labels(seg, "seg")
    fld = as_field(field, lab.shape)
    h, w = lab.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    y = np.clip(rr + fld[0], 0.0, h - 1.0)
    x = np.clip(cc + fld[1], 0.0, w - 1.0)
    # round half up; clamped coordinates keep indices in range
    ri = np.minimum(np.floor(y + 0.5).astype(np.intp), h - 1)
    ci = np.minimum(np.floor(x + 0.5).astype(np.intp), w - 1)
    return lab[ri, ci]


# --------------------------------------------------------------------------
# affine pre-alignment


@dataclass(frozen=True)
class AffineParams:
    """Similarity transform about the image centre.

    The transform maps output coordinates ``p`` to sampling coordinates
    ``scale * R(rotation) @ (p - centre) + centre + translation``, where
    ``centre`` is the geometric centre of the grid, matching the field
    convention of :func:`warp`.
    """

    translation: tuple = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        vals = (*self.translation, self.rotation, self.scale)
        if len(self.translation) != 2 or not all(math.isfinite(float(v)) for v in vals):
            raise ValidationError(f"affine parameters must be finite: {self}")
        if self.scale <= 0:
            raise ValidationError(f"affine scale must be positive, got {self.scale}")


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _moments(img):
    total = img.sum()
    if not total > 0:
        raise DegenerateInputError("image has zero total intensity")
    h, w = img.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cr = (img * rr).sum() / total
    ccol = (img * cc).sum() / total
    dr, dc = rr - cr, cc - ccol
    mrr = (img * dr * dr).sum() / total
    mcc = (img * dc * dc).sum() / total
    mrc = (img * dr * dc).sum() / total
    return np.array([cr, ccol]), mrr, mcc, mrc


def _orientation(mrr, mcc, mrc):
    """Principal axis angle in the (row, col) plane, or None if isotropic."""
    spread = math.hypot(mrr - mcc, 2.0 * mrc)
    if spread <= 1e-6 * (mrr + mcc):
        return None
    return 0.5 * math.atan2(2.0 * mrc, mrr - mcc)


def affine_prealign(target, source):
    """Estimate the similarity transform bringing ``source`` onto ``target``.

    Translation comes from intensity centroids, scale from the ratio of
    intensity-weighted RMS radii and rotation from the principal axes of the
    second central moments. ``apply_affine(source, result)`` is the aligned
    source.
    """
    tgt = as_image(target, "target")
    src = as_image(source, "source")
    _check_same(tgt.shape, src.shape, "affine_prealign")
    ct, trr, tcc, trc = _moments(tgt)
    cs, srr, scc, src_ = _moments(src)
    scale = math.sqrt((srr + scc) / (trr + tcc)) if trr + tcc > 0 else 1.0
    if not scale > 0:
        scale = 1.0
    th_t = _orientation(trr, tcc, trc)
    th_s = _orientation(srr, scc, src_)
    rotation = 0.0
    if th_t is not None and th_s is not None:
        rotation = th_s - th_t
        # axes are undirected: fold into (-pi/2, pi/2]
        rotation = (rotation + math.pi / 2) % math.pi - math.pi / 2
        if abs(rotation) < 1e-12:
            rotation = 0.0
    centre = (np.array(tgt.shape, dtype=np.float64) - 1.0) / 2.0
    # map target centroid onto source centroid
    t = cs - centre - scale * _rot(rotation) @ (ct - centre)
    t[np.abs(t) < 1e-12] = 0.0
    return AffineParams(translation=(float(t[0]), float(t[1])), rotation=float(rotation), scale=float(scale))


def affine_to_field(shape, params):
    """Displacement field equivalent to ``params`` on a grid of ``shape``."""
    h, w = shape
    centre = (np.array([h, w], dtype=np.float64) - 1.0) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    a = params.scale * _rot(params.rotation)
    pr, pc = rr - centre[0], cc - centre[1]
    yr = a[0, 0] * pr + a[0, 1] * pc + centre[0] + params.translation[0]
    yc = a[1, 0] * pr + a[1, 1] * pc + centre[1] + params.translation[1]
    return np.stack([yr - rr, yc - cc])


def apply_affine(image, params):
    """Resample ``image`` under ``params`` (bilinear, border clamped)."""
    if not isinstance(params, AffineParams):
        params = AffineParams(*params)
    img = as_image(image)
    if params == AffineParams():
        return img.copy()
    return warp(img, affine_to_field(img.shape, params))


def invert_affine(params):
    """Parameters of the inverse transform (same centre convention)."""
    inv_scale = 1.0 / params.scale
    t = -inv_scale * _rot(-params.rotation) @ np.asarray(params.translation, dtype=np.float64)
    return AffineParams(translation=(float(t[0]), float(t[1])), rotation=-params.rotation, scale=inv_scale)


# --------------------------------------------------------------------------
# file I/O

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _parse_pgm(buf, path):
    """Decode a binary P5 PGM. Returns (raw integer array, maxval)."""
    if len(buf) < 2 or buf[:2] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (missing P5 magic)")
    pos = 2
    fields = []
    n = len(buf)
    while len(fields) < 3:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        token = buf[start:pos]
        if not token.isdigit():
            raise ParseError(f"{path}: malformed PGM header field {token!r}")
        fields.append(int(token))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise ParseError(f"{path}: truncated PGM header")
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ParseError(f"{path}: PGM has empty raster {width}x{height}")
    if not 0 < maxval < 65536:
        raise ParseError(f"{path}: PGM maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if n - pos < need:
        raise ParseError(f"{path}: truncated PGM raster ({n - pos} of {need} bytes)")
    raw = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(np.int64), maxval


def _read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        mode = im.mode
        if mode == "L":
            maxval = 255
        elif mode in ("I;16", "I;16B", "I;16L", "I"):
            maxval = 65535
        elif mode == "1":
            maxval = 1
        else:
            raise ParseError(f"{path}: PNG is not single-channel grayscale (mode {mode})")
        arr = np.array(im, dtype=np.int64)
    if arr.ndim != 2:
        raise ParseError(f"{path}: PNG is not single-channel grayscale")
    return arr, maxval


def _read_raw(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf:
        raise ParseError(f"{path}: empty file")
    if buf.startswith(_PNG_MAGIC):
        try:
            return _read_png(path)
        except ParseError:
            raise
        except Exception as exc:  # Pillow raises assorted types on corrupt data
            raise ParseError(f"{path}: corrupt PNG ({exc})") from exc
    if buf[:2] == b"P5":
        return _parse_pgm(buf, path)
    raise ParseError(f"{path}: unsupported image format (expected binary PGM or PNG)")


def read_image(path):
    """Read a grayscale PGM (P5) or PNG, scaled to ``[0, 1]``."""
    raw, maxval = _read_raw(path)
    return raw.astype(np.float64) / float(maxval)


def _pgm_bytes(raw, maxval):
    h, w = raw.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + np.ascontiguousarray(raw, dtype=dtype).tobytes()


def _write_bytes(path, data):
    with open(path, "wb") as fh:
        fh.write(data)


def write_image(image, path):
    """Write an image at 16-bit precision. Format follows the extension."""
    img = as_image(image)
    raw = np.rint(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        from PIL import Image

        Image.fromarray(raw).save(path, format="PNG")
    elif ext in (".pgm", ""):
        _write_bytes(path, _pgm_bytes(raw, 65535))
    else:
        raise ValidationError(f"unsupported output extension {ext!r} (use .pgm or .png)")


def read_labels(path):
    """Read an integer label map stored as a PGM (values are label ids)."""
    raw, _ = _read_raw(path)
    return raw


def write_labels(labels, path):
    lab = as_labels(labels)
    maxval = max(int(lab.max()), 1)
    if maxval > 65535:
        raise ValidationError(f"label id {maxval} exceeds 16-bit PGM range")
    _write_bytes(path, _pgm_bytes(lab, maxval))
