"""Voxel entropy, maximum-softmax-probability scoring and OOD detection metrics.

Image-level scores average over voxels predicted as tumour. When nothing is
predicted the result is flagged ``empty``; entropy then reports 0 and MSP
reports 1.0 (full confidence in "no tumour"), so such images stay in the
cohort instead of silently shrinking it.

OOD scores follow the "higher means more OOD" convention, ``s = 1 - msp``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from ._validation import as_array, as_bool, check_probability, check_same_grid
from .volume import ImageVolume, make_volume


class MaskedMean(NamedTuple):
    value: float
    empty: bool


class SliceProfile(NamedTuple):
    """Per-axial-slice means; ``values`` is NaN where ``empty`` is set."""

    values: np.ndarray
    empty: np.ndarray


class CohortStats(NamedTuple):
    mean: float
    std: float
    median: float
    q1: float
    q3: float
    n: int


def _binary_entropy(p: np.ndarray, base: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(q > 0, q * np.log(q), 0.0))
    return h / np.log(base)


def binary_entropy(p, base: float = 2.0) -> np.ndarray:
    """``-p log p - (1-p) log(1-p)`` in the given base, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return _binary_entropy(p, base)


def entropy_map(p, base: float = 2.0) -> ImageVolume:
    """Per-voxel binary entropy; base 2 gives values in [0, 1]."""
    arr = check_probability(p)
    h = _binary_entropy(arr, base)
    if isinstance(p, ImageVolume):
        return make_volume(h, p.spacing, p.origin, "normalized")
    return make_volume(h, unit="normalized")


def _masked_mean(values, mask, empty_value: float) -> MaskedMean:
    check_same_grid(values, mask)
    fg = as_bool(mask)
    if not fg.any():
        return MaskedMean(empty_value, True)
    return MaskedMean(float(np.mean(as_array(values)[fg], dtype=np.float64)), False)


def mean_entropy_over_tumor(e, mask) -> MaskedMean:
    """Mean entropy over predicted-tumour voxels; ``(0.0, empty=True)`` for an empty mask."""
    return _masked_mean(e, mask, 0.0)


def slice_entropy_profile(e, mask) -> SliceProfile:
    """Mean entropy over the tumour voxels of each axial (z) slice."""
    check_same_grid(e, mask)
    fg = as_bool(mask)
    ev = as_array(e).astype(np.float64)
    counts = fg.sum(axis=(0, 1))
    sums = np.where(fg, ev, 0.0).sum(axis=(0, 1))
    empty = counts == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(empty, np.nan, sums / np.maximum(counts, 1))
    return SliceProfile(values, empty)


def msp_score(p, mask) -> MaskedMean:
    """Mean of ``max(p, 1 - p)`` over tumour voxels; ``(1.0, empty=True)`` for an empty mask."""
    check_same_grid(p, mask)
    fg = as_bool(mask)
    if not fg.any():
        return MaskedMean(1.0, True)
    v = as_array(p)[fg].astype(np.float64)
    return MaskedMean(float(np.mean(np.maximum(v, 1.0 - v))), False)


def ood_score(msp: float) -> float:
    return 1.0 - msp


def _scores(x, name) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney AUROC: P(s_ood > s_id) with ties counted as one half."""
    s_id = _scores(id_scores, "id_scores")
    s_ood = _scores(ood_scores, "ood_scores")
    ranks = stats.rankdata(np.concatenate([s_ood, s_id]))
    n1, n0 = len(s_ood), len(s_id)
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def fpr_at_95tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """Fraction of ID images flagged OOD at the highest threshold that flags >= 95% of OOD images.

    A score flags an image when ``s >= t``. The threshold is the largest
    OOD score ``t`` with ``mean(s_ood >= t) >= tpr``.
    """
    s_id = _scores(id_scores, "id_scores")
    s_ood = np.sort(_scores(ood_scores, "ood_scores"))[::-1]
    n = len(s_ood)
    # the k highest OOD scores are all >= s_ood[k-1]; need k/n >= tpr
    k = int(np.ceil(tpr * n - 1e-12))
    k = min(max(k, 1), n)
    t = s_ood[k - 1]
    return float(np.mean(s_id >= t))


def cohort_stats(values) -> CohortStats:
    """Mean, sample std (n-1), and linearly interpolated median/quartiles."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cohort_stats needs at least one value")
    if not np.isfinite(v).all():
        raise ValueError("cohort_stats values must be finite")
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return CohortStats(float(np.mean(v)), std, float(med), float(q1), float(q3), int(v.size))


class MSPOODDetector(BaseEstimator):
    """Image-level OOD detector on mean MSP over predicted-tumour voxels.

    ``fit`` takes ID probability maps (with their predicted masks, or a
    threshold) and stores the score that flags ``1 - fpr_target`` of them as
    ID; ``decision_function`` returns ``1 - msp`` and ``predict`` returns 1
    for images flagged OOD.
    """

    def __init__(self, threshold=0.5, fpr_target=0.05):
        self.threshold = threshold
        self.fpr_target = fpr_target

    def _score(self, p, mask=None):
        pa = as_array(p)
        fg = pa >= self.threshold if mask is None else as_bool(mask)
        return ood_score(msp_score(pa, fg).value)

    def decision_function(self, X, masks=None):
        masks = [None] * len(X) if masks is None else masks
        return np.array([self._score(p, m) for p, m in zip(X, masks)])

    def fit(self, X, y=None, masks=None):
        s = self.decision_function(X, masks)
        self.id_scores_ = s
        self.cutoff_ = float(np.quantile(s, 1.0 - self.fpr_target))
        return self

    def predict(self, X, masks=None):
        return (self.decision_function(X, masks) > self.cutoff_).astype(int)
