"""Per-pair registration by direct Adam descent on a dense displacement field."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from typing import List, Optional

import numpy as np

from .errors import DimensionError, DivergenceError, ValidationError
from .imgcore import as_image, warp, warp_labels, zero_field
from .losses import LossConfig, LossValue, composite_loss

__all__ = [
    "AdamState",
    "StopRule",
    "RegistrationResult",
    "adam_step",
    "register_direct",
    "DirectEngine",
    "IdentityEngine",
]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = dc_field(default=None, repr=False)
    v: Optional[np.ndarray] = dc_field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if not self.eps > 0.0:
            raise ValidationError("Adam eps must be positive")
        if not self.lr > 0.0 or not math.isfinite(self.lr):
            raise ValidationError(f"learning rate must be positive and finite, got {self.lr}")
        if self.step < 0:
            raise ValidationError("Adam step counter must be non-negative")

    def fresh(self):
        """Same hyper-parameters, cleared moments."""
        return replace(self, step=0, m=None, v=None)


@dataclass(frozen=True)
class StopRule:
    delta: float = 1e-7
    patience: int = 25
    max_iters: int = 2000

    def __post_init__(self):
        if not self.delta > 0.0:
            raise ValidationError(f"stop delta must be positive, got {self.delta}")
        if self.patience < 1 or self.max_iters < 1:
            raise ValidationError("patience and max_iters must be >= 1")


class PatienceTracker:
    """Best-so-far bookkeeping shared by direct optimization and training."""

    def __init__(self, rule):
        self.rule = rule
        self.best = math.inf
        self.stale = 0

    def update(self, value):
        """Record ``value``; returns (is_new_best, should_stop)."""
        improved_enough = self.best - value > self.rule.delta
        is_best = value < self.best
        if is_best:
            self.best = value
        self.stale = 0 if improved_enough else self.stale + 1
        return is_best, self.stale >= self.rule.patience


@dataclass
class RegistrationResult:
    field: np.ndarray
    warped: np.ndarray
    loss_trace: List[LossValue]
    iterations: int
    stopped_by: str
    warped_labels: Optional[np.ndarray] = None

    @property
    def initial_loss(self):
        return self.loss_trace[0].total

    @property
    def final_loss(self):
        """Total loss of the returned field (the best one seen)."""
        return min(lv.total for lv in self.loss_trace)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"params {p.shape} and grads {g.shape} differ in shape")
    m = np.zeros_like(p) if state.m is None else state.m
    v = np.zeros_like(p) if state.v is None else state.v
    if m.shape != p.shape or v.shape != p.shape:
        raise DimensionError("Adam moment shapes do not match params")
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_p, replace(state, step=t, m=m, v=v)


def register_direct(target, source, cfg=LossConfig(), adam=None, stop=StopRule()):
    """Minimize the composite loss over a dense field starting from zero.

    The best-loss field seen is returned, not the last iterate.

    Raises:
        DivergenceError: if the loss or its gradient becomes non-finite. The
            trace recorded so far is attached as ``trace``.
    """
    tgt = as_image(target, "target")
    src = as_image(source, "source")
    if tgt.shape != src.shape:
        raise DimensionError(f"target {tgt.shape} and source {src.shape} differ in shape")
    state = (adam or AdamState()).fresh()
    u = zero_field(tgt.shape)
    best_u = u
    trace = []
    tracker = PatienceTracker(stop)
    stopped_by = "max_iters"
    for it in range(stop.max_iters):
        lv, grad = composite_loss(tgt, src, u, cfg)
        if not math.isfinite(lv.total) or not np.all(np.isfinite(grad)):
            err = DivergenceError("non-finite loss or gradient", it)
            err.trace = trace
            raise err
        trace.append(lv)
        is_best, done = tracker.update(lv.total)
        if is_best:
            best_u = u
        if done:
            stopped_by = "patience"
            break
        u, state = adam_step(u, grad, state)
    return RegistrationResult(
        field=best_u,
        warped=warp(src, best_u),
        loss_trace=trace,
        iterations=len(trace),
        stopped_by=stopped_by,
    )


@dataclass(frozen=True)
class DirectEngine:
    """Registration callable backed by :func:`register_direct`."""

    cfg: LossConfig = LossConfig()
    lr: float = 1e-4
    stop: StopRule = StopRule()

    @property
    def tag(self):
        return f"direct_{self.cfg.base}_{self.cfg.alpha:g}"

    def __call__(self, target, source, source_labels=None):
        res = register_direct(target, source, self.cfg, AdamState(lr=self.lr), self.stop)
        if source_labels is not None:
            res.warped_labels = warp_labels(source_labels, res.field)
        return res


@dataclass(frozen=True)
class IdentityEngine:
    """Always returns the zero field; the pre-registration baseline."""

    tag: str = "identity"

    def __call__(self, target, source, source_labels=None):
        src = as_image(source, "source")
        u = zero_field(src.shape)
        res = RegistrationResult(field=u, warped=src.copy(), loss_trace=[], iterations=0, stopped_by="max_iters")
        if source_labels is not None:
            res.warped_labels = np.asarray(source_labels).copy()
        return res
