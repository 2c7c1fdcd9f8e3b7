"""Image-quality and classification metrics.

All functions are pure. Metrics whose denominator vanishes return None
(an explicit undefined marker) rather than a silent zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ContractError("confusion counts must be non-negative")


def confusion_from_predictions(labels, predicted) -> ConfusionCounts:
    labels = np.asarray(labels, dtype=bool)
    predicted = np.asarray(predicted, dtype=bool)
    if labels.shape != predicted.shape:
        raise ContractError("labels and predictions must align")
    return ConfusionCounts(
        tp=int(np.sum(labels & predicted)),
        fp=int(np.sum(~labels & predicted)),
        tn=int(np.sum(~labels & ~predicted)),
        fn=int(np.sum(labels & ~predicted)),
    )


def classification_metrics(counts: ConfusionCounts) -> dict:
    """balanced accuracy, f1, precision, recall; None when undefined."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    if tp + fp + tn + fn == 0:
        raise ContractError("classification metrics need at least one evaluated case")
    recall = tp / (tp + fn) if tp + fn > 0 else None
    precision = tp / (tp + fp) if tp + fp > 0 else None
    specificity = tn / (tn + fp) if tn + fp > 0 else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    if recall is None or specificity is None:
        balanced_accuracy = None
    else:
        balanced_accuracy = 0.5 * (recall + specificity)
    return {
        "balanced_accuracy": balanced_accuracy,
        "f1": f1,
        "precision": precision,
        "recall": recall,
    }


# ---------------------------------------------------------------------------
# maximum mean discrepancy
# ---------------------------------------------------------------------------

def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def median_heuristic_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled sample (distinct pairs)."""
    pooled = np.concatenate([a, b], axis=0)
    d2 = _pairwise_sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return max(med, 1e-12)


def mmd(sample_a, sample_b, bandwidth: float | None = None,
        biased: bool = False) -> float:
    """Squared maximum mean discrepancy with an RBF kernel.

    k(x, y) = exp(-||x - y||^2 / (2 sigma^2)); sigma is the pooled-sample
    median pairwise distance when not given. The default estimator is the
    unbiased one (diagonal terms excluded), which needs >= 2 points per
    sample and can dip below zero; results are clamped at 0 for reporting.
    Inputs of any shape are flattened to vectors per element.
    """
    a = np.asarray([np.ravel(x) for x in sample_a], dtype=np.float64)
    b = np.asarray([np.ravel(x) for x in sample_b], dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractError("mmd requires two non-empty samples")
    if a.shape[1] != b.shape[1]:
        raise ContractError("mmd samples must share element dimensionality")
    m, n = len(a), len(b)
    if not biased and (m < 2 or n < 2):
        raise ContractError("unbiased mmd needs at least 2 points per sample")
    sigma = bandwidth if bandwidth is not None else median_heuristic_bandwidth(a, b)
    if sigma <= 0:
        raise ContractError("mmd bandwidth must be positive")
    gamma = 1.0 / (2.0 * sigma * sigma)
    k_aa = np.exp(-gamma * _pairwise_sq_dists(a, a))
    k_bb = np.exp(-gamma * _pairwise_sq_dists(b, b))
    k_ab = np.exp(-gamma * _pairwise_sq_dists(a, b))
    if biased:
        value = k_aa.mean() + k_bb.mean() - 2.0 * k_ab.mean()
    else:
        value = ((k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
                 + (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
                 - 2.0 * k_ab.mean())
    return max(float(value), 0.0)


# ---------------------------------------------------------------------------
# structural similarity
# ---------------------------------------------------------------------------

def _gaussian_kernel(window: int, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _local_stats(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Weighted local sums over valid windows."""
    win = kernel.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (win, win))
    return np.einsum("ijkl,kl->ij", view, kernel)


def ssim(a, b, window: int = 7, dynamic_range: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window (sigma = 1.5), valid windows only.

    C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = dynamic_range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ContractError("ssim expects 2-D images")
    if window % 2 == 0 or window < 1:
        raise ContractError("ssim window must be odd and positive")
    if window > min(a.shape):
        raise ContractError(f"ssim window {window} exceeds image extent {min(a.shape)}")
    kernel = _gaussian_kernel(window)
    mu_a = _local_stats(a, kernel)
    mu_b = _local_stats(b, kernel)
    var_a = _local_stats(a * a, kernel) - mu_a * mu_a
    var_b = _local_stats(b * b, kernel) - mu_b * mu_b
    cov = _local_stats(a * b, kernel) - mu_a * mu_b
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mean_std(values) -> tuple[float, float]:
    """Aggregate as mean and sample standard deviation (ddof=1)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ContractError("cannot aggregate zero values")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std
