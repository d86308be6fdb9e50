"""Risk-controlled hazard thresholds.

The calibrated threshold ``lambda_hat`` is the smallest grid point at which
the finite-sample-inflated empirical false-negative rate

    N / (N + 1) * R_hat(lambda) + 1 / (N + 1)

drops to the target ``alpha``. Masks produced at ``lambda_hat`` then miss, in
expectation over exchangeable test images, at most an ``alpha`` fraction of
the hazardous pixels.

Two uncalibrated comparators live here as well: a validation-tuned
threshold (``BASELINE``) and its Monte-Carlo averaged counterpart (``MC``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .hazardmap import as_mask, as_score_map, check_threshold, threshold_mask

DEFAULT_GRID = 1000


class CalibrationError(ValueError):
    """The requested risk level cannot be certified on this calibration set."""

    def __init__(self, message: str, min_alpha: float | None = None):
        super().__init__(message)
        self.min_alpha = min_alpha


class Method(str, enum.Enum):
    BASELINE = "BASELINE"
    MC = "MC"
    CRC = "CRC"
    MCCP = "MCCP"

    @property
    def uses_samples(self) -> bool:
        return self in (Method.MC, Method.MCCP)

    @property
    def is_conformal(self) -> bool:
        return self in (Method.CRC, Method.MCCP)


@dataclass
class CalibrationSet:
    """Ordered (score map, truth mask) pairs."""

    items: list = field(default_factory=list)

    def __post_init__(self):
        checked = []
        for i, pair in enumerate(self.items):
            scores, truth = pair
            scores, truth = as_score_map(scores), as_mask(truth)
            if scores.shape != truth.shape:
                raise ValueError(
                    f"calibration item {i}: score map {scores.shape} does not match mask {truth.shape}"
                )
            checked.append((scores, truth))
        if not checked:
            raise ValueError("calibration set is empty")
        self.items = checked

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def _as_cal(cal) -> CalibrationSet:
    return cal if isinstance(cal, CalibrationSet) else CalibrationSet(list(cal))


def lambda_grid(resolution: int = DEFAULT_GRID) -> np.ndarray:
    """The uniform grid ``{0, 1/G, ..., 1}``."""
    if int(resolution) != resolution or resolution < 2:
        raise ValueError(f"grid resolution must be an integer >= 2, got {resolution}")
    resolution = int(resolution)
    return np.arange(resolution + 1) / resolution


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"risk level alpha must lie in (0, 1), got {alpha}")
    return alpha


def fnr_loss(predicted, truth) -> float:
    """Fraction of hazardous truth pixels missing from ``predicted`` (0 if none)."""
    predicted, truth = as_mask(predicted), as_mask(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"malformed dataset: prediction {predicted.shape} vs truth {truth.shape}")
    n_hazard = int(truth.sum())
    if n_hazard == 0:
        return 0.0
    covered = int(np.count_nonzero(predicted & truth))
    return 1.0 - covered / n_hazard


def fnr_curve(scores: np.ndarray, truth: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """``fnr_loss(threshold_mask(scores, lam), truth)`` for every ``lam`` at once."""
    hazard_scores = np.sort(scores[truth])
    n_hazard = hazard_scores.size
    if n_hazard == 0:
        return np.zeros(len(lambdas))
    # same float comparison as threshold_mask: score >= 1 - lam
    below = np.searchsorted(hazard_scores, 1.0 - lambdas, side="left")
    covered = n_hazard - below
    return 1.0 - covered / n_hazard


def risk_curve(cal, lambdas: np.ndarray) -> np.ndarray:
    """Empirical FNR risk at every threshold, summed in item order."""
    cal = _as_cal(cal)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    total = np.zeros(len(lambdas))
    for scores, truth in cal:
        total += fnr_curve(scores, truth, lambdas)
    return total / len(cal)


def empirical_risk(cal, lam: float) -> float:
    return float(risk_curve(cal, np.array([check_threshold(lam)]))[0])


def _first_feasible(cal: CalibrationSet, alpha: float, grid: np.ndarray) -> tuple[int, np.ndarray]:
    n = len(cal)
    floor = 1 / (n + 1)
    if floor > alpha:
        raise CalibrationError(
            f"risk level alpha={alpha:g} is infeasible with N={n} calibration items: "
            f"the bound never drops below 1/(N+1) = {floor:.6g}; "
            f"use alpha >= {floor:.6g} or more calibration data",
            min_alpha=floor,
        )
    risks = risk_curve(cal, grid)
    bounds = inflated_bound(risks, n)
    feasible = np.flatnonzero(bounds <= alpha)
    # risk is 0 at lambda = 1, so feasible is nonempty once the floor check passed
    return int(feasible[0]), risks


def calibrate_crc(cal, alpha: float, grid: int = DEFAULT_GRID) -> float:
    """Smallest grid threshold whose inflated empirical FNR is at most ``alpha``."""
    cal = _as_cal(cal)
    alpha = check_alpha(alpha)
    lambdas = lambda_grid(grid)
    k, _ = _first_feasible(cal, alpha, lambdas)
    return float(lambdas[k])


def mc_average(samples: Sequence) -> np.ndarray:
    """Per-pixel mean of K stochastic score maps."""
    samples = [as_score_map(s) for s in samples]
    if not samples:
        raise ValueError("mc_average needs at least one sample")
    shape = samples[0].shape
    for i, s in enumerate(samples):
        if s.shape != shape:
            raise ValueError(f"sample {i} has shape {s.shape}, expected {shape}")
    mean = np.mean(np.stack(samples), axis=0)
    return np.clip(mean, 0.0, 1.0)


def _averaged(cal_samples) -> CalibrationSet:
    return CalibrationSet([(mc_average(samples), truth) for samples, truth in cal_samples])


def calibrate_mccp(cal_samples, alpha: float, grid: int = DEFAULT_GRID) -> float:
    """CRC on the per-image Monte-Carlo averaged score maps.

    ``cal_samples`` is a sequence of ``(samples, truth)`` pairs where
    ``samples`` holds the K score maps drawn for that image.
    """
    return calibrate_crc(_averaged(cal_samples), alpha, grid)


def f1_curve(scores: np.ndarray, truth: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """Pixel F1 (Dice) of every thresholded mask against ``truth``.

    An image with no truth pixels and an empty prediction counts as perfect
    agreement here.
    """
    thresholds = 1.0 - lambdas
    all_sorted = np.sort(scores, axis=None)
    hazard_sorted = np.sort(scores[truth])
    n_pred = all_sorted.size - np.searchsorted(all_sorted, thresholds, side="left")
    tp = hazard_sorted.size - np.searchsorted(hazard_sorted, thresholds, side="left")
    denom = n_pred + hazard_sorted.size
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 1.0)


def fit_baseline_lambda(validation, grid: int = DEFAULT_GRID) -> float:
    """Grid threshold maximising mean validation pixel F1, ties to the smaller value."""
    validation = _as_cal(validation)
    lambdas = lambda_grid(grid)
    total = np.zeros(len(lambdas))
    for scores, truth in validation:
        total += f1_curve(scores, truth, lambdas)
    mean_f1 = total / len(validation)
    return float(lambdas[int(np.argmax(mean_f1))])


@dataclass(frozen=True)
class CalibratedPredictor:
    method: Method
    lambda_hat: float
    mc_samples: Optional[int] = None
    alpha: Optional[float] = None
    n_cal: Optional[int] = None
    grid: Optional[int] = None
    achieved_risk: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        check_threshold(self.lambda_hat)
        if self.method.uses_samples and (self.mc_samples is None or self.mc_samples < 1):
            raise ValueError(f"{self.method.value} needs mc_samples >= 1")
        if self.method.is_conformal and self.alpha is None:
            raise ValueError(f"{self.method.value} needs a risk level alpha")

    @property
    def achieved_bound(self) -> Optional[float]:
        if self.achieved_risk is None or self.n_cal is None:
            return None
        return inflated_bound(self.achieved_risk, self.n_cal)

    def to_record(self) -> dict:
        record = {
            "method": self.method.value,
            "lambda_hat": self.lambda_hat,
            "N": self.n_cal,
            "G": self.grid,
            "achieved_empirical_risk": self.achieved_risk,
        }
        if self.method.is_conformal:
            record["alpha"] = self.alpha
            record["achieved_bound"] = self.achieved_bound
        if self.method.uses_samples:
            record["K"] = self.mc_samples
        return record

    @classmethod
    def from_record(cls, record: dict) -> "CalibratedPredictor":
        return cls(
            method=Method(record["method"]),
            lambda_hat=float(record["lambda_hat"]),
            mc_samples=record.get("K"),
            alpha=record.get("alpha"),
            n_cal=record.get("N"),
            grid=record.get("G"),
            achieved_risk=record.get("achieved_empirical_risk"),
        )

    def predict(self, scores_or_samples) -> np.ndarray:
        return predict(self, scores_or_samples)


def predict(pred: CalibratedPredictor, scores_or_samples) -> np.ndarray:
    """Hazard mask for one test image.

    BASELINE and CRC take a single score map; MC and MCCP take the list of
    K sampled maps, which are averaged before thresholding.
    """
    if pred.method.uses_samples:
        if isinstance(scores_or_samples, np.ndarray) and scores_or_samples.ndim == 2:
            raise ValueError(f"{pred.method.value} expects {pred.mc_samples} sampled maps, got one map")
        samples = list(scores_or_samples)
        if len(samples) != pred.mc_samples:
            raise ValueError(f"{pred.method.value} expects {pred.mc_samples} sampled maps, got {len(samples)}")
        return threshold_mask(mc_average(samples), pred.lambda_hat)
    arr = np.asarray(scores_or_samples, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{pred.method.value} expects a single 2-D score map, got shape {arr.shape}")
    return threshold_mask(arr, pred.lambda_hat)


def calibrate(
    method: Method | str,
    items: Iterable,
    alpha: float | None = None,
    grid: int = DEFAULT_GRID,
) -> CalibratedPredictor:
    """Fit any of the four predictors on calibration items.

    ``items`` holds ``(score_map, truth)`` pairs for BASELINE/CRC and
    ``(samples, truth)`` pairs for MC/MCCP.
    """
    method = Method(method)
    items = list(items)
    k = None
    if method.uses_samples:
        k = len(items[0][0]) if items else 0
        cal = _averaged(items)
    else:
        cal = _as_cal(items)
    if method.is_conformal:
        if alpha is None:
            raise ValueError(f"{method.value} needs a risk level alpha")
        lam = calibrate_crc(cal, alpha, grid)
    else:
        lam = fit_baseline_lambda(cal, grid)
        alpha = None
    achieved = empirical_risk(cal, lam)
    return CalibratedPredictor(method, lam, mc_samples=k, alpha=alpha, n_cal=len(cal), grid=grid,
                               achieved_risk=achieved)


def inflated_bound(risk: float, n: int) -> float:
    return n / (n + 1) * risk + 1 / (n + 1)


def min_feasible_alpha(n: int) -> float:
    return 1 / (n + 1)


__all__ = [
    "CalibrationError", "CalibrationSet", "CalibratedPredictor", "Method", "calibrate",
    "calibrate_crc", "calibrate_mccp", "check_alpha", "empirical_risk", "fit_baseline_lambda",
    "fnr_curve", "fnr_loss", "inflated_bound", "lambda_grid", "mc_average", "min_feasible_alpha",
    "predict", "risk_curve",
]
