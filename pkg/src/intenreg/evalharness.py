"""Overlap metrics and the pairwise registration evaluation protocol.

Every test sample is registered onto every other one (diagonal included).
The resulting N x N mean-DICE matrices of two models are compared by
elementwise subtraction.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Tuple

import numpy as np

from .errors import DegenerateInputError, DimensionError, RegistrationError, ValidationError
from .imgcore import as_image, as_labels, warp_labels

__all__ = [
    "DiceMatrix",
    "DeltaMatrix",
    "RegionReport",
    "dice",
    "mean_dice",
    "per_label_dice",
    "pairwise_matrix",
    "pairwise_evaluation",
    "delta_matrix",
    "mean_intensity_difference",
    "region_report",
    "write_matrix_csv",
    "read_matrix_csv",
    "write_region_csv",
]

log = logging.getLogger(__name__)


@dataclass
class DiceMatrix:
    values: np.ndarray
    model_tag: str
    failures: List[Tuple[int, int, str]] = dc_field(default_factory=list)

    @property
    def n(self):
        return self.values.shape[0]


@dataclass
class DeltaMatrix:
    values: np.ndarray
    minuend_tag: str
    subtrahend_tag: str

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def model_tag(self):
        return f"{self.minuend_tag}-minus-{self.subtrahend_tag}"


@dataclass
class RegionReport:
    model_tag: str
    per_label: Dict[int, float]


def _label_pair(a, b):
    la = as_labels(a, "target_labels")
    lb = as_labels(b, "warped_labels")
    if la.shape != lb.shape:
        raise DimensionError(f"label maps differ in shape: {la.shape} vs {lb.shape}")
    return la, lb


def dice(target_labels, warped_labels, label):
    """Sorensen-Dice overlap of one label; 1.0 when absent from both maps."""
    la, lb = _label_pair(target_labels, warped_labels)
    a = la == label
    b = lb == label
    size = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if size == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / size


def per_label_dice(target_labels, warped_labels, labels=None):
    """DICE for each non-background label present in either map."""
    la, lb = _label_pair(target_labels, warped_labels)
    if labels is None:
        labels = np.union1d(np.unique(la), np.unique(lb))
        labels = [int(v) for v in labels if v != 0]
    return {lab: dice(la, lb, lab) for lab in labels}


def mean_dice(target_labels, warped_labels):
    """Unweighted mean DICE over non-background labels present in either map.

    A label present in only one map scores 0.
    """
    scores = per_label_dice(target_labels, warped_labels)
    if not scores:
        raise DegenerateInputError("no non-background labels in either map")
    return float(np.mean(list(scores.values())))


def mean_intensity_difference(target, warped):
    """Mean absolute intensity difference after registration."""
    t = as_image(target, "target")
    s = as_image(warped, "warped")
    if t.shape != s.shape:
        raise DimensionError(f"target {t.shape} and warped {s.shape} differ in shape")
    return float(np.mean(np.abs(t - s)))


def _vocabulary(samples):
    vocab = None
    for s in samples:
        v = tuple(int(x) for x in np.unique(s.labels) if x != 0)
        if vocab is None:
            vocab = v
        elif v != vocab:
            raise ValidationError(
                f"subject {s.subject_id} has labels {v}, expected {vocab}")
    return list(vocab or ())


def _cell(args):
    engine, target, source, labels = args
    try:
        res = engine(target.image, source.image)
        warped = warp_labels(source.labels, res.field)
    except (RegistrationError, FloatingPointError) as exc:
        return None, str(exc)
    return per_label_dice(target.labels, warped, labels), None


def pairwise_evaluation(engine, samples, workers=1, tag=None):
    """Register every ordered pair once.

    Returns ``(DiceMatrix, per_label)`` where ``per_label[i, j, k]`` is the
    DICE of the k-th non-background label for target ``i`` / source ``j``.
    Failed registrations are recorded as NaN and listed in
    ``DiceMatrix.failures``.
    """
    if len(samples) < 1:
        raise ValidationError("need at least one sample")
    labels = _vocabulary(samples)
    if not labels:
        raise DegenerateInputError("samples carry no non-background labels")
    n = len(samples)
    jobs = [(engine, samples[i], samples[j], labels) for i in range(n) for j in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_cell(job) for job in jobs]
    per_label = np.full((n, n, len(labels)), np.nan)
    failures = []
    for idx, (scores, err) in enumerate(results):
        i, j = divmod(idx, n)
        if scores is None:
            log.warning("registration of source %d onto target %d failed: %s", j, i, err)
            failures.append((i, j, err))
            continue
        per_label[i, j] = [scores[lab] for lab in labels]
    tag = tag or getattr(engine, "tag", type(engine).__name__)
    values = per_label.mean(axis=2)
    return DiceMatrix(values=values, model_tag=tag, failures=failures), per_label


def pairwise_matrix(engine, samples, workers=1, tag=None):
    """N x N mean-DICE matrix; entry (i, j) registers source j onto target i."""
    return pairwise_evaluation(engine, samples, workers, tag)[0]


def delta_matrix(a, b):
    """Elementwise ``a - b`` of two DICE matrices over the same samples."""
    if a.values.shape != b.values.shape:
        raise DimensionError(f"matrix sizes differ: {a.values.shape} vs {b.values.shape}")
    return DeltaMatrix(values=a.values - b.values, minuend_tag=a.model_tag, subtrahend_tag=b.model_tag)


def region_report_from(per_label, labels, tag):
    means = np.nanmean(per_label.reshape(-1, per_label.shape[2]), axis=0)
    return RegionReport(model_tag=tag, per_label={int(l): float(m) for l, m in zip(labels, means)})


def region_report(engine, samples, workers=1, tag=None):
    """Mean DICE of each non-background label over all ordered pairs."""
    labels = _vocabulary(samples)
    dm, per_label = pairwise_evaluation(engine, samples, workers, tag)
    return region_report_from(per_label, labels, dm.model_tag)


# --------------------------------------------------------------------------
# CSV


def _fmt(v):
    return "nan" if math.isnan(v) else format(float(v), ".17g")


def write_matrix_csv(matrix, path):
    vals = np.asarray(matrix.values)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"# model={matrix.model_tag} n={vals.shape[0]}\n")
        for row in vals:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_matrix_csv(path):
    with open(path, encoding="ascii") as fh:
        header = fh.readline().strip()
        rows = [line.strip() for line in fh if line.strip()]
    if not header.startswith("# model="):
        raise ValidationError(f"{path}: missing matrix header")
    meta = dict(part.split("=", 1) for part in header[2:].split())
    values = np.array([[float(x) for x in row.split(",")] for row in rows], dtype=np.float64)
    n = int(meta["n"])
    if values.shape != (n, n):
        raise DimensionError(f"{path}: expected {n}x{n} values, got {values.shape}")
    return DiceMatrix(values=values, model_tag=meta["model"])


def write_region_csv(report, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("label,mean_dice\n")
        for lab, val in sorted(report.per_label.items()):
            fh.write(f"{lab},{_fmt(val)}\n")
