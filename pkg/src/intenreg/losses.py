"""Similarity metrics and composite registration losses.

Each metric returns ``(value, gradient)`` where the gradient is taken with
respect to the warped (moving) image. SSIM statistics use a uniform box
window evaluated at fully interior positions only, with population
variances.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, List, Optional

import numpy as np

from .errors import DimensionError, ValidationError
from .imgcore import as_field, as_image, warp, warp_backward

__all__ = [
    "LossConfig",
    "WindowStats",
    "LossValue",
    "mse",
    "ncc_loss",
    "box_sum",
    "window_stats",
    "ssim",
    "ssim_map",
    "field_regularizer",
    "composite_loss",
    "SSIM_HOOKS",
]

NCC_EPS = 1e-8
SIGMA_EPS = 1e-8

# Called with no arguments on every SSIM evaluation (instrumentation).
SSIM_HOOKS: List[Callable[[], None]] = []

BASES = ("mse", "ncc")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.0
    beta: float = 0.01
    base: str = "mse"
    window: int = 11
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    c3: Optional[float] = None  # None means c2 / 2

    def __post_init__(self):
        if self.c3 is None:
            object.__setattr__(self, "c3", self.c2 / 2.0)
        base = str(self.base).lower()
        object.__setattr__(self, "base", base)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.beta >= 0.0:
            raise ValidationError(f"beta must be non-negative, got {self.beta}")
        if base not in BASES:
            raise ValidationError(f"base must be one of {BASES}, got {self.base!r}")
        if int(self.window) != self.window or self.window < 3 or self.window % 2 == 0:
            raise ValidationError(f"window must be an odd integer >= 3, got {self.window}")
        for name in ("c1", "c2", "c3"):
            if not getattr(self, name) > 0.0:
                raise ValidationError(f"{name} must be positive")


@dataclass
class WindowStats:
    mu_t: np.ndarray
    mu_s: np.ndarray
    sigma_t: np.ndarray
    sigma_s: np.ndarray
    cov: np.ndarray
    # raw second moments, kept for gradient assembly
    var_t: np.ndarray = dc_field(repr=False, default=None)
    var_s: np.ndarray = dc_field(repr=False, default=None)


@dataclass(frozen=True)
class LossValue:
    """Decomposed loss: ``total == similarity_term + regularizer_term``.

    ``similarity_term`` is ``alpha * (1 - ssim) + (1 - alpha) * base`` and
    ``regularizer_term`` is ``beta * R``. The raw ingredients are kept for
    reporting; ``ssim`` / ``base`` are ``nan`` when their weight is zero and
    they were not evaluated.
    """

    total: float
    similarity_term: float
    regularizer_term: float
    ssim: float = float("nan")
    base: float = float("nan")
    regularizer: float = 0.0


def _pair(target, warped):
    t = as_image(target, "target")
    s = as_image(warped, "warped")
    if t.shape != s.shape:
        raise DimensionError(f"target {t.shape} and warped {s.shape} differ in shape")
    return t, s


def mse(target, warped):
    t, s = _pair(target, warped)
    diff = s - t
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def ncc_loss(target, warped):
    """Negated global normalized cross-correlation of the two images."""
    t, s = _pair(target, warped)
    dt = t - t.mean()
    ds = s - s.mean()
    cross = float(np.sum(dt * ds))
    a = np.sqrt(np.sum(dt * dt) + NCC_EPS)
    b = np.sqrt(np.sum(ds * ds) + NCC_EPS)
    value = -cross / (a * b)
    grad = -(dt / (a * b) - cross * ds / (a * b ** 3))
    return float(value), grad


# --------------------------------------------------------------------------
# windowed statistics


def box_sum(x, window):
    """Sum over every fully interior ``window x window`` box (integral image)."""
    h, w = x.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(x, axis=0), axis=1, out=ii[1:, 1:])
    k = window
    return ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]


def _box_adjoint(g, window):
    """Adjoint of :func:`box_sum`: spread each window value over its pixels."""
    k = window
    padded = np.pad(g, k - 1)
    return box_sum(padded, k)


def _check_window(shape, window):
    if window % 2 == 0 or window < 1:
        raise ValidationError(f"window must be odd, got {window}")
    if shape[0] < window or shape[1] < window:
        raise DimensionError(f"image {shape} is smaller than the {window}x{window} window")


def _moments_integral(t, s, window):
    n = float(window * window)
    mt = box_sum(t, window) / n
    ms = box_sum(s, window) / n
    var_t = box_sum(t * t, window) / n - mt * mt
    var_s = box_sum(s * s, window) / n - ms * ms
    cov = box_sum(t * s, window) / n - mt * ms
    return mt, ms, var_t, var_s, cov


def _moments_naive(t, s, window):
    h, w = t.shape
    oh, ow = h - window + 1, w - window + 1
    out = [np.empty((oh, ow)) for _ in range(5)]
    n = float(window * window)
    for i in range(oh):
        for j in range(ow):
            pt = t[i:i + window, j:j + window]
            ps = s[i:i + window, j:j + window]
            mt = pt.sum() / n
            ms = ps.sum() / n
            out[0][i, j] = mt
            out[1][i, j] = ms
            out[2][i, j] = ((pt - mt) ** 2).sum() / n
            out[3][i, j] = ((ps - ms) ** 2).sum() / n
            out[4][i, j] = ((pt - mt) * (ps - ms)).sum() / n
    return tuple(out)


def window_stats(target, warped, window=11, method="integral"):
    """Local means, standard deviations and covariance over box windows.

    ``method="naive"`` runs an explicit sliding loop and exists as a
    cross-check for the integral-image path.
    """
    t, s = _pair(target, warped)
    _check_window(t.shape, window)
    if method == "integral":
        mt, ms, vt, vs, cov = _moments_integral(t, s, window)
    elif method == "naive":
        mt, ms, vt, vs, cov = _moments_naive(t, s, window)
    else:
        raise ValidationError(f"unknown window_stats method {method!r}")
    return WindowStats(
        mu_t=mt, mu_s=ms,
        sigma_t=np.sqrt(np.maximum(vt, 0.0)),
        sigma_s=np.sqrt(np.maximum(vs, 0.0)),
        cov=cov, var_t=vt, var_s=vs,
    )


def _fused(cfg):
    # c * st collapses to (2 cov + c2) / (vt + vs + c2) when c3 == c2 / 2
    return abs(cfg.c3 - cfg.c2 / 2.0) <= 1e-15 * cfg.c2


def ssim_map(target, warped, cfg=LossConfig(), method="integral"):
    """Per-window SSIM, brightness * contrast * structure."""
    st = window_stats(target, warped, cfg.window, method=method)
    return _ssim_from_stats(st, cfg)


def _ssim_from_stats(st, cfg):
    mt, ms = st.mu_t, st.mu_s
    lum = (2.0 * mt * ms + cfg.c1) / (mt * mt + ms * ms + cfg.c1)
    if _fused(cfg):
        cs = (2.0 * st.cov + cfg.c2) / (st.var_t + st.var_s + cfg.c2)
        return lum * cs
    sdt, sds = st.sigma_t, st.sigma_s
    con = (2.0 * sdt * sds + cfg.c2) / (sdt * sdt + sds * sds + cfg.c2)
    stru = (st.cov + cfg.c3) / (sdt * sds + cfg.c3)
    return lum * con * stru


def ssim(target, warped, cfg=LossConfig()):
    """Mean SSIM over valid window positions and its gradient w.r.t. ``warped``."""
    for hook in SSIM_HOOKS:
        hook()
    t, s = _pair(target, warped)
    k = cfg.window
    _check_window(t.shape, k)
    mt, ms, vt, vs, cov = _moments_integral(t, s, k)
    c1, c2, c3 = cfg.c1, cfg.c2, cfg.c3

    n1 = 2.0 * mt * ms + c1
    d1 = mt * mt + ms * ms + c1
    lum = n1 / d1
    dlum_dms = 2.0 * (mt - ms * lum) / d1

    if _fused(cfg):
        n2 = 2.0 * cov + c2
        d2 = vt + vs + c2
        cs = n2 / d2
        smap = lum * cs
        # partials w.r.t. (ms, vs, cov) treated as independent
        d_ms = dlum_dms * cs
        d_vs = -lum * cs / d2
        d_cov = 2.0 * lum / d2
    else:
        sdt = np.sqrt(np.maximum(vt, 0.0))
        sds = np.sqrt(np.maximum(vs, 0.0))
        dc = sdt * sdt + sds * sds + c2
        con = (2.0 * sdt * sds + c2) / dc
        ds_ = sdt * sds + c3
        stru = (cov + c3) / ds_
        smap = lum * con * stru
        dcon = (2.0 * sdt * dc - (2.0 * sdt * sds + c2) * 2.0 * sds) / (dc * dc)
        dstru = -(cov + c3) * sdt / (ds_ * ds_)
        d_sds = lum * (dcon * stru + con * dstru)
        d_ms = dlum_dms * con * stru
        d_vs = d_sds / (2.0 * np.maximum(sds, SIGMA_EPS))
        d_cov = lum * con / ds_

    # vs = E[s^2] - ms^2 and cov = E[ts] - mt ms
    a = d_ms - 2.0 * ms * d_vs - mt * d_cov  # coefficient of E[s]
    b = d_vs                                  # coefficient of E[s^2]
    c = d_cov                                 # coefficient of E[ts]
    scale = 1.0 / (smap.size * k * k)
    grad = (_box_adjoint(a, k) + 2.0 * s * _box_adjoint(b, k) + t * _box_adjoint(c, k)) * scale
    return float(smap.mean()), grad


# --------------------------------------------------------------------------
# regularizer and composite loss


def field_regularizer(field):
    """Mean squared forward-difference gradient of both field channels.

    Evaluated on the ``(H-1) x (W-1)`` positions where both forward
    differences exist.
    """
    u = as_field(field)
    h, w = u.shape[1:]
    if h < 2 or w < 2:
        raise DimensionError(f"field grid {u.shape[1:]} must be at least 2x2")
    base = u[:, :-1, :-1]
    dr = u[:, 1:, :-1] - base
    dc = u[:, :-1, 1:] - base
    n = (h - 1) * (w - 1)
    value = float((np.sum(dr * dr) + np.sum(dc * dc)) / n)
    grad = np.zeros_like(u)
    gr = 2.0 * dr / n
    gc = 2.0 * dc / n
    grad[:, 1:, :-1] += gr
    grad[:, :-1, 1:] += gc
    grad[:, :-1, :-1] -= gr + gc
    return value, grad


def _base_metric(cfg):
    return mse if cfg.base == "mse" else ncc_loss


def similarity(target, warped, cfg):
    """Weighted similarity term and its gradient w.r.t. the warped image.

    Returns ``(term, grad, ssim_value, base_value)``. A component with zero
    weight is never evaluated.
    """
    alpha = cfg.alpha
    term = 0.0
    grad = np.zeros_like(np.asarray(warped, dtype=np.float64))
    s_val = b_val = float("nan")
    if alpha > 0.0:
        s_val, g = ssim(target, warped, cfg)
        term = alpha * (1.0 - s_val)
        grad = -alpha * g
    if alpha < 1.0:
        b_val, g = _base_metric(cfg)(target, warped)
        if alpha > 0.0:
            term = term + (1.0 - alpha) * b_val
            grad = grad + (1.0 - alpha) * g
        else:
            term = b_val
            grad = g
    return term, grad, s_val, b_val


def composite_loss(target, source, field, cfg=LossConfig()):
    """Warp ``source`` by ``field`` and evaluate the composite loss.

    Returns ``(LossValue, gradient w.r.t. field)``.
    """
    t = as_image(target, "target")
    src = as_image(source, "source")
    u = as_field(field, t.shape)
    if src.shape != t.shape:
        raise DimensionError(f"source {src.shape} and target {t.shape} differ in shape")
    warped = warp(src, u)
    sim, g_img, s_val, b_val = similarity(t, warped, cfg)
    grad = warp_backward(src, u, g_img)
    if cfg.beta > 0.0:
        r_val, g_reg = field_regularizer(u)
        reg_term = cfg.beta * r_val
        grad += cfg.beta * g_reg
    else:
        r_val, reg_term = 0.0, 0.0
    lv = LossValue(
        total=sim + reg_term,
        similarity_term=sim,
        regularizer_term=reg_term,
        ssim=s_val,
        base=b_val,
        regularizer=r_val,
    )
    return lv, grad
