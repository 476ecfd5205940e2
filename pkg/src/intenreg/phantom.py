"""Seeded synthetic brain-like phantoms with exact ground-truth labels.

Randomness comes from numpy's Philox counter-based generator. Every stream
is keyed by ``SeedSequence([seed, subject_id, attempt, purpose])`` so a
subject depends only on the config and its id, never on generation order.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import RegistrationError, ValidationError
from .imgcore import read_image, read_labels, warp, warp_labels, write_image, write_labels

__all__ = [
    "PhantomConfig",
    "PhantomSample",
    "generate_subject",
    "generate_corpus",
    "write_corpus",
    "load_split",
    "intensity_ladder",
]

BACKGROUND = 0.02
_LADDER5 = (0.25, 0.55, 0.75, 0.9)

# purpose tags for independent streams
_ANATOMY, _INTENSITY, _DEFORM, _NOISE = 0, 1, 2, 3


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 96
    width: int = 96
    n_regions: int = 5
    intensity_jitter: float = 0.08
    deform_amplitude: float = 3.0
    deform_smoothness: float = 8.0
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16 or self.height % 2 or self.width % 2:
            raise ValidationError(f"phantom size must be even and >= 16, got {self.height}x{self.width}")
        if self.n_regions < 2:
            raise ValidationError("n_regions must be >= 2")
        if self.intensity_jitter < 0 or self.deform_amplitude < 0 or self.noise_sigma < 0:
            raise ValidationError("jitter, deformation amplitude and noise must be non-negative")
        if not self.deform_smoothness > 0:
            raise ValidationError("deform_smoothness must be positive")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclass
class PhantomSample:
    image: np.ndarray
    labels: np.ndarray
    subject_id: int


class PhantomError(RegistrationError):
    """A subject could not be generated without losing a region."""


def _rng(cfg, subject_id, attempt, purpose):
    ss = np.random.SeedSequence([cfg.seed, subject_id, attempt, purpose])
    return np.random.Generator(np.random.Philox(ss))


def intensity_ladder(n_regions):
    """Base intensity of each label, background first."""
    k = n_regions - 1
    if k == len(_LADDER5):
        vals = _LADDER5
    else:
        vals = tuple(np.linspace(0.25, 0.9, k))
    return np.array((BACKGROUND,) + tuple(vals))


def canonical_labels(cfg):
    """Nested perturbed ellipses shared by every subject of a config."""
    h, w = cfg.height, cfg.width
    k = cfg.n_regions - 1
    rng = _rng(cfg, 0, 0, _ANATOMY)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ay, ax = 0.42 * h, 0.38 * w
    dy, dx = (rr - cy) / ay, (cc - cx) / ax
    rho = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    scales = np.linspace(1.0, 0.3, k)
    gap = 0.7 / max(k - 1, 1)
    labels = np.zeros((h, w), dtype=np.int64)
    for scale in scales:
        pert = np.ones_like(theta)
        for m in (2, 3, 4):
            amp = rng.uniform(0.0, gap / 12.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            pert += amp * np.cos(m * theta + phase)
        labels += (rho < scale * pert).astype(np.int64)
    return labels


def _smooth_field(cfg, rng):
    h, w = cfg.height, cfg.width
    noise = rng.standard_normal((2, h, w))
    u = np.stack([gaussian_filter(noise[i], cfg.deform_smoothness, mode="reflect") for i in range(2)])
    mag = np.hypot(u[0], u[1]).max()
    if mag == 0:
        return np.zeros_like(u)
    return u * (cfg.deform_amplitude / mag)


def generate_subject(cfg, subject_id):
    """Deterministic phantom for ``(cfg, subject_id)``."""
    base_labels = canonical_labels(cfg)
    ladder = intensity_ladder(cfg.n_regions)
    want = set(range(cfg.n_regions))
    for attempt in range(10):
        jit = _rng(cfg, subject_id, attempt, _INTENSITY).uniform(
            -cfg.intensity_jitter, cfg.intensity_jitter, size=cfg.n_regions - 1)
        levels = ladder.copy()
        levels[1:] += jit
        image = levels[base_labels]
        labels = base_labels
        if cfg.deform_amplitude > 0:
            u = _smooth_field(cfg, _rng(cfg, subject_id, attempt, _DEFORM))
            image = warp(image, u)
            labels = warp_labels(base_labels, u)
        if cfg.noise_sigma > 0:
            image = image + cfg.noise_sigma * _rng(cfg, subject_id, attempt, _NOISE).standard_normal(image.shape)
        image = np.clip(image, 0.0, 1.0)
        if set(np.unique(labels).tolist()) == want:
            return PhantomSample(image=image, labels=labels, subject_id=int(subject_id))
    raise PhantomError(f"subject {subject_id}: a region collapsed in every one of 10 attempts")


def generate_corpus(cfg, n_subjects, first_id=0):
    if n_subjects < 1:
        raise ValidationError(f"n_subjects must be >= 1, got {n_subjects}")
    return [generate_subject(cfg, sid) for sid in range(first_id, first_id + n_subjects)]


def write_corpus(out_dir, cfg, n_train, n_test):
    """Write ``train/`` and ``test/`` splits plus ``manifest.txt``.

    Subjects ``0..n_train-1`` form the training split and the following
    ``n_test`` ids the test split.
    """
    if n_train + n_test < 1:
        raise ValidationError("corpus must contain at least one subject")
    splits = {"train": range(0, n_train), "test": range(n_train, n_train + n_test)}
    os.makedirs(out_dir, exist_ok=True)
    lines = ["# intenreg phantom corpus"]
    lines += [f"{k} = {v}" for k, v in asdict(cfg).items()]
    for split, ids in splits.items():
        d = os.path.join(out_dir, split)
        os.makedirs(d, exist_ok=True)
        for sid in ids:
            s = generate_subject(cfg, sid)
            write_image(s.image, os.path.join(d, f"subject_{sid}_img.pgm"))
            write_labels(s.labels, os.path.join(d, f"subject_{sid}_seg.pgm"))
        lines.append(f"{split} = " + " ".join(str(i) for i in ids))
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    return {k: len(v) for k, v in splits.items()}


def load_split(corpus_dir, split):
    """Load one split written by :func:`write_corpus`, ordered by subject id."""
    d = os.path.join(corpus_dir, split)
    if not os.path.isdir(d):
        raise FileNotFoundError(f"corpus split not found: {d}")
    ids = sorted(
        int(name[len("subject_"):-len("_img.pgm")])
        for name in os.listdir(d)
        if name.startswith("subject_") and name.endswith("_img.pgm")
    )
    out = []
    for sid in ids:
        img = read_image(os.path.join(d, f"subject_{sid}_img.pgm"))
        lab = read_labels(os.path.join(d, f"subject_{sid}_seg.pgm"))
        out.append(PhantomSample(image=img, labels=lab, subject_id=sid))
    return out
