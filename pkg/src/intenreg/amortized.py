"""Small two-scale convolutional registration network trained by hand-written
reverse-mode differentiation.

Architecture (all 3x3 convolutions, zero padding 1)::

    [target, source] -> enc1 (2->16) -> lrelu -> enc2 (16->32, stride 2) -> lrelu
      -> mid (32->32) -> lrelu -> upsample x2 -> concat(enc1 act) -> dec1 (48->16)
      -> lrelu -> head (16->2, linear) -> displacement field

Tensors are ``(channels, H, W)``; samples of a batch are processed one at a
time and gradients are reduced in batch order.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field as dc_field
from typing import Dict, List

import numpy as np

from .errors import ContractError, DimensionError, DivergenceError, ParseError, ValidationError
from .imgcore import as_image, warp, warp_labels
from .losses import LossConfig, composite_loss
from .optdirect import AdamState, PatienceTracker, RegistrationResult, StopRule, adam_step

__all__ = [
    "ARCHITECTURE",
    "TrainConfig",
    "TrainReport",
    "init_params",
    "conv2d",
    "conv2d_backward",
    "lrelu",
    "lrelu_backward",
    "upsample2",
    "upsample2_backward",
    "forward",
    "forward_with_cache",
    "backward",
    "loss_and_grads",
    "train",
    "predict_register",
    "AmortizedEngine",
    "save_checkpoint",
    "load_checkpoint",
]

LEAK = 0.2
HEAD_STD = 1e-4

# name, in_channels, out_channels, stride
ARCHITECTURE = (
    ("enc1", 2, 16, 1),
    ("enc2", 16, 32, 2),
    ("mid", 32, 32, 1),
    ("dec1", 48, 16, 1),
    ("head", 16, 2, 1),
)

def param_shapes():
    shapes = OrderedDict()
    for name, cin, cout, _ in ARCHITECTURE:
        shapes[f"{name}.w"] = (cout, cin, 3, 3)
        shapes[f"{name}.b"] = (cout,)
    return shapes


def init_params(seed=0):
    """He-normal weights, zero biases, near-zero head so the field starts ~0."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x4E4554])))
    params = OrderedDict()
    for name, cin, cout, _ in ARCHITECTURE:
        std = HEAD_STD if name == "head" else math.sqrt(2.0 / (cin * 9))
        params[f"{name}.w"] = rng.normal(0.0, std, size=(cout, cin, 3, 3))
        params[f"{name}.b"] = np.zeros(cout)
    return params


def _check_params(params):
    for key, shape in param_shapes().items():
        if key not in params:
            raise ValidationError(f"missing parameter tensor {key}")
        if params[key].shape != shape:
            raise DimensionError(f"{key} has shape {params[key].shape}, expected {shape}")
        if not np.all(np.isfinite(params[key])):
            raise ValidationError(f"{key} contains non-finite values")


# --------------------------------------------------------------------------
# layers


def _im2col(x, stride):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    cols = np.empty((c, 3, 3, ho, wo))
    for ki in range(3):
        for kj in range(3):
            cols[:, ki, kj] = xp[:, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * 9, ho * wo), ho, wo


def conv2d(x, w, b, stride=1):
    """3x3 cross-correlation with zero padding 1. Returns ``(out, cols)``."""
    cols, ho, wo = _im2col(x, stride)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape(w.shape[0], ho, wo), cols


def conv2d_backward(dout, cols, w, in_shape, stride=1):
    """Gradients ``(dx, dw, db)`` of :func:`conv2d`."""
    cout = w.shape[0]
    c, h, wd = in_shape
    ho, wo = dout.shape[1:]
    d = dout.reshape(cout, -1)
    dw = (d @ cols.T).reshape(w.shape)
    db = d.sum(axis=1)
    dcols = (w.reshape(cout, -1).T @ d).reshape(c, 3, 3, ho, wo)
    dxp = np.zeros((c, h + 2, wd + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += dcols[:, ki, kj]
    return dxp[:, 1:-1, 1:-1], dw, db


def lrelu(z):
    return np.where(z > 0, z, LEAK * z)


def lrelu_backward(dout, z):
    return np.where(z > 0, dout, LEAK * dout)


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout):
    c, h, w = dout.shape
    return dout.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


# --------------------------------------------------------------------------
# network


def _stack_inputs(target, source):
    t = as_image(target, "target")
    s = as_image(source, "source")
    if t.shape != s.shape:
        raise DimensionError(f"target {t.shape} and source {s.shape} differ in shape")
    if t.shape[0] % 2 or t.shape[1] % 2:
        raise DimensionError(f"network input must have even height and width, got {t.shape}")
    return np.stack([t, s])


def forward_with_cache(params, target, source):
    """Predict the field and keep the intermediates needed by :func:`backward`."""
    _check_params(params)
    x0 = _stack_inputs(target, source)
    p = params
    z1, c1 = conv2d(x0, p["enc1.w"], p["enc1.b"], 1)
    a1 = lrelu(z1)
    z2, c2 = conv2d(a1, p["enc2.w"], p["enc2.b"], 2)
    a2 = lrelu(z2)
    z3, c3 = conv2d(a2, p["mid.w"], p["mid.b"], 1)
    a3 = lrelu(z3)
    cat = np.concatenate([upsample2(a3), a1])
    z4, c4 = conv2d(cat, p["dec1.w"], p["dec1.b"], 1)
    a4 = lrelu(z4)
    out, c5 = conv2d(a4, p["head.w"], p["head.b"], 1)
    cache = dict(
        shape=x0.shape, x0=x0, z1=z1, c1=c1, a1=a1, z2=z2, c2=c2, a2=a2,
        z3=z3, c3=c3, a3=a3, cat=cat, z4=z4, c4=c4, a4=a4, c5=c5,
        param_ids={k: id(v) for k, v in params.items()},
    )
    return out, cache


def forward(params, target, source):
    """Displacement field ``(2, H, W)`` predicted for the pair."""
    return forward_with_cache(params, target, source)[0]


def backward(params, cache, upstream):
    """Parameter gradients given ``upstream = d loss / d field``."""
    if cache.get("param_ids") != {k: id(v) for k, v in params.items()}:
        raise ContractError("cached intermediates were produced with different parameters")
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (2,) + cache["shape"][1:]:
        raise ContractError(f"upstream shape {up.shape} does not match cached forward pass")
    p = params
    g = OrderedDict()
    d, g["head.w"], g["head.b"] = conv2d_backward(up, cache["c5"], p["head.w"], cache["a4"].shape)
    d = lrelu_backward(d, cache["z4"])
    d, g["dec1.w"], g["dec1.b"] = conv2d_backward(d, cache["c4"], p["dec1.w"], cache["cat"].shape)
    n_up = cache["a3"].shape[0]
    d_a1_skip = d[n_up:]
    d = upsample2_backward(d[:n_up])
    d = lrelu_backward(d, cache["z3"])
    d, g["mid.w"], g["mid.b"] = conv2d_backward(d, cache["c3"], p["mid.w"], cache["a2"].shape)
    d = lrelu_backward(d, cache["z2"])
    d, g["enc2.w"], g["enc2.b"] = conv2d_backward(d, cache["c2"], p["enc2.w"], cache["a1"].shape, stride=2)
    d = lrelu_backward(d + d_a1_skip, cache["z1"])
    _, g["enc1.w"], g["enc1.b"] = conv2d_backward(d, cache["c1"], p["enc1.w"], cache["shape"])
    return OrderedDict((k, g[k]) for k in param_shapes())


def loss_and_grads(params, target, source, loss_cfg=LossConfig()):
    """Composite loss of the predicted registration and its parameter gradients."""
    field, cache = forward_with_cache(params, target, source)
    lv, g_field = composite_loss(target, source, field, loss_cfg)
    return lv, backward(params, cache, g_field)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    lr: float = 1e-4
    stop: StopRule = StopRule()
    loss: LossConfig = LossConfig()
    seed: int = 0
    max_epochs: int = 500

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")


@dataclass
class TrainReport:
    epoch_losses: List[float]
    epochs_run: int
    stopped_by: str
    step_losses: List[float] = dc_field(default_factory=list)


def _corpus_images(corpus):
    imgs = [as_image(getattr(s, "image", s)) for s in corpus]
    if len(imgs) < 2:
        raise ValidationError("training corpus needs at least two images")
    shape = imgs[0].shape
    for im in imgs:
        if im.shape != shape:
            raise DimensionError(f"corpus images differ in shape: {im.shape} vs {shape}")
    return imgs


def train(params, corpus, cfg=TrainConfig()):
    """Fit ``params`` on randomly drawn ordered (target, source) pairs.

    Pairs are sampled with replacement among distinct subjects. One epoch is
    ``len(corpus) // batch_size`` steps (at least one); the patience rule
    watches the epoch mean loss.

    Returns ``(params, TrainReport)``; the input ``params`` are not modified.
    """
    imgs = _corpus_images(corpus)
    _check_params(params)
    n = len(imgs)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0x545241494E])))
    params = OrderedDict((k, v.copy()) for k, v in params.items())
    states = {k: AdamState(lr=cfg.lr) for k in params}
    steps_per_epoch = max(1, n // cfg.batch_size)
    tracker = PatienceTracker(cfg.stop)
    epoch_losses, step_losses = [], []
    stopped_by = "max_epochs"
    step = 0
    for epoch in range(cfg.max_epochs):
        batch_means = []
        for _ in range(steps_per_epoch):
            ti = rng.integers(0, n, size=cfg.batch_size)
            si = rng.integers(0, n - 1, size=cfg.batch_size)
            si = si + (si >= ti)
            total = 0.0
            acc = None
            for a, b in zip(ti, si):
                lv, grads = loss_and_grads(params, imgs[a], imgs[b], cfg.loss)
                if not math.isfinite(lv.total):
                    raise DivergenceError(f"non-finite training loss in epoch {epoch}", step)
                total += lv.total
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            for k in params:
                g = acc[k] / cfg.batch_size
                if not np.all(np.isfinite(g)):
                    raise DivergenceError(f"non-finite gradient for {k} in epoch {epoch}", step)
                params[k], states[k] = adam_step(params[k], g, states[k])
            batch_means.append(total / cfg.batch_size)
            step_losses.append(total / cfg.batch_size)
            step += 1
        epoch_losses.append(float(np.mean(batch_means)))
        _, done = tracker.update(epoch_losses[-1])
        if done:
            stopped_by = "patience"
            break
    report = TrainReport(epoch_losses=epoch_losses, epochs_run=len(epoch_losses),
                         stopped_by=stopped_by, step_losses=step_losses)
    return params, report


def predict_register(params, target, source, source_labels=None, loss_cfg=LossConfig()):
    """Single forward pass registration."""
    field = forward(params, target, source)
    lv, _ = composite_loss(target, source, field, loss_cfg)
    res = RegistrationResult(
        field=field,
        warped=warp(as_image(source), field),
        loss_trace=[lv],
        iterations=1,
        stopped_by="max_iters",
    )
    if source_labels is not None:
        res.warped_labels = warp_labels(source_labels, field)
    return res


@dataclass
class AmortizedEngine:
    """Registration callable wrapping trained parameters."""

    params: Dict[str, np.ndarray]
    loss: LossConfig = LossConfig()
    tag: str = "amortized"

    def __call__(self, target, source, source_labels=None):
        return predict_register(self.params, target, source, source_labels, self.loss)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"INTENREG-NET\0"
VERSION = 1


def save_checkpoint(params, path):
    """Binary container: magic, version, JSON architecture, float64 LE tensors."""
    _check_params(params)
    desc = json.dumps({
        "layers": [list(layer) for layer in ARCHITECTURE],
        "tensors": [[k, list(s)] for k, s in param_shapes().items()],
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(desc)))
        fh.write(desc)
        for k in param_shapes():
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise ParseError(f"{path}: not an intenreg checkpoint")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise ParseError(f"{path}: truncated checkpoint header")
    version, dlen = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    try:
        desc = json.loads(buf[pos:pos + dlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt architecture descriptor") from exc
    pos += dlen
    if [tuple(layer) for layer in desc.get("layers", [])] != list(ARCHITECTURE):
        raise ParseError(f"{path}: architecture does not match this network")
    params = OrderedDict()
    for k, shape in param_shapes().items():
        count = int(np.prod(shape))
        if len(buf) < pos + 8 * count:
            raise ParseError(f"{path}: truncated tensor {k}")
        params[k] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(buf):
        raise ParseError(f"{path}: {len(buf) - pos} trailing bytes")
    return params
