"""Pixel- and instance-level segmentation metrics.

Undefined ratios are reported as NaN rather than 0 or 1: precision when
nothing is predicted, coverage when nothing is hazardous, and every pixel
metric when both masks are empty. Dataset summaries skip NaN entries.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .hazardmap import PixelCoord, as_mask

NAN = float("nan")
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class PixelMetrics:
    precision: float
    coverage: float
    f1: float
    iou: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InstanceMetrics:
    precision: float
    coverage: float
    f1: float
    n_truth: int
    n_pred: int

    @property
    def iou(self) -> float:
        # not reported at instance level
        return NAN


def _matched(predicted, truth) -> tuple[np.ndarray, np.ndarray]:
    predicted, truth = as_mask(predicted), as_mask(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"prediction {predicted.shape} and truth {truth.shape} differ in shape")
    return predicted, truth


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else NAN


def pixel_metrics(predicted, truth) -> PixelMetrics:
    predicted, truth = _matched(predicted, truth)
    tp = int(np.count_nonzero(predicted & truth))
    fp = int(np.count_nonzero(predicted & ~truth))
    fn = int(np.count_nonzero(~predicted & truth))
    # F1 as Dice from counts: equals 2PR/(P+R) and stays defined when only one of P, R is
    return PixelMetrics(
        precision=_ratio(tp, tp + fp),
        coverage=_ratio(tp, tp + fn),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        iou=_ratio(tp, tp + fp + fn),
    )


def label_components(mask) -> tuple[np.ndarray, int]:
    """4-connected labelling; labels follow raster order of each component's first pixel."""
    labels, n = ndimage.label(as_mask(mask), structure=FOUR_CONNECTED)
    return labels, int(n)


def connected_components(mask) -> list[frozenset[PixelCoord]]:
    labels, n = label_components(mask)
    comps: list[list[PixelCoord]] = [[] for _ in range(n)]
    for r, c in np.argwhere(labels > 0):
        comps[labels[r, c] - 1].append(PixelCoord(int(r), int(c)))
    comps.sort(key=min)
    return [frozenset(c) for c in comps]


def _harmonic(p: float, r: float) -> float:
    if math.isnan(p) or math.isnan(r):
        return NAN
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def instance_metrics(predicted, truth, cover_frac: float = 0.5) -> InstanceMetrics:
    """Instance detection rates over 4-connected hazard components.

    A truth instance is detected when at least ``cover_frac`` of its pixels
    are predicted; a predicted instance is a true positive when it touches
    any truth instance.
    """
    if not 0.0 < cover_frac <= 1.0:
        raise ValueError(f"cover_frac must lie in (0, 1], got {cover_frac}")
    predicted, truth = _matched(predicted, truth)
    t_labels, n_truth = label_components(truth)
    p_labels, n_pred = label_components(predicted)

    detected = 0
    if n_truth:
        sizes = np.bincount(t_labels.ravel(), minlength=n_truth + 1)[1:]
        hits = np.bincount(t_labels[predicted], minlength=n_truth + 1)[1:]
        detected = int(np.count_nonzero(hits / sizes >= cover_frac))
    true_pos = 0
    if n_pred:
        true_pos = len(np.unique(p_labels[truth & predicted]))

    precision = _ratio(true_pos, n_pred)
    coverage = _ratio(detected, n_truth)
    return InstanceMetrics(precision, coverage, _harmonic(precision, coverage), n_truth, n_pred)


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int


def summarize(values: Iterable[float]) -> Summary:
    """Mean and population standard deviation over the defined values.

    ``math.fsum`` is correctly rounded, so the result does not depend on the
    order the values arrive in.
    """
    vals = [float(v) for v in values if not math.isnan(v)]
    if not vals:
        return Summary(NAN, NAN, 0)
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return Summary(mean, math.sqrt(var), len(vals))


PIXEL_FIELDS = ("precision", "coverage", "f1", "iou")
INSTANCE_FIELDS = ("precision", "coverage", "f1")


def summarize_records(records: Sequence, fields: Sequence[str] = PIXEL_FIELDS) -> dict[str, Summary]:
    return {name: summarize(getattr(r, name) for r in records) for name in fields}
