"""Evaluation metrics: strict pixel-wise F-measure, PSNR, and SSIM.

All functions take plain 2-D arrays.  "Strict" means pixel-exact matching:
a predicted edge one pixel off its label counts as both a false positive and
a false negative, with no neighborhood tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, GeometryError


@dataclass(frozen=True)
class EdgeScore:
    precision: float
    recall: float
    f: float
    tp: int
    fp: int
    fn: int
    threshold: float


@dataclass(frozen=True)
class QualityScore:
    psnr: float  # dB; math.inf when saturated
    ssim: float
    saturated: bool


def _pair(a, b, caller):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"{caller}: inputs must be 2-D images")
    if a.shape != b.shape:
        raise DimensionError(f"{caller}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def strict_f_measure(y, labels, threshold: float = 0.5) -> EdgeScore:
    """Binarize y at `threshold` and score it against binary labels.

    precision = tp / (tp + fp), recall = tp / (tp + fn), f = harmonic mean;
    any zero denominator sends that rate to 0, and f is 0 when both rates are.
    """
    y, lab = _pair(y, labels, "strict_f_measure")
    if not (0.0 <= threshold <= 1.0):
        raise ContractError(f"threshold must be in [0, 1], got {threshold}")
    if not np.all((lab == 0) | (lab == 1)):
        raise ContractError("strict_f_measure: labels must be strictly binary")
    pred = y >= threshold
    truth = lab == 1
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EdgeScore(precision, recall, f, tp, fp, fn, float(threshold))


def f_sweep(y, labels, thresholds: Sequence[float]) -> tuple:
    """Score every threshold; return (best, table).  Ties go to the lowest threshold."""
    if not len(thresholds):
        raise ContractError("f_sweep needs at least one threshold")
    table = [strict_f_measure(y, labels, t) for t in thresholds]
    best = table[0]
    for s in table[1:]:
        if s.f > best.f or (s.f == best.f and s.threshold < best.threshold):
            best = s
    return best, table


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; returns inf when the images are identical."""
    a, b = _pair(a, b, "psnr")
    if peak <= 0:
        raise ContractError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _ssim_window() -> np.ndarray:
    r = _SSIM_WINDOW // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * _SSIM_SIGMA * _SSIM_SIGMA))
    return k / k.sum()


def _window_mean(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-region weighted mean (Gaussian window)."""
    t = np.lib.stride_tricks.sliding_window_view(img, k.size, axis=1) @ k
    return np.lib.stride_tricks.sliding_window_view(t, k.size, axis=0) @ k


def ssim(a, b) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma 1.5, unit dynamic range.

    Only windows fully inside the image contribute (valid region).  The
    computation is symmetric in (a, b) bitwise, and ssim(x, x) is exactly 1.
    """
    a, b = _pair(a, b, "ssim")
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise GeometryError(
            f"ssim needs at least {_SSIM_WINDOW}x{_SSIM_WINDOW} images, got {a.shape}"
        )
    k = _ssim_window()
    mu_a = _window_mean(a, k)
    mu_b = _window_mean(b, k)
    var_a = _window_mean(a * a, k) - mu_a * mu_a
    var_b = _window_mean(b * b, k) - mu_b * mu_b
    cov = _window_mean(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def quality_score(a, b, peak: float = 1.0) -> QualityScore:
    p = psnr(a, b, peak)
    return QualityScore(p, ssim(a, b), math.isinf(p))
