"""Lesion-level matching, clustered Dice, pooled detection F1, volume occupancy.

A ground-truth region counts as detected when at least ``tau`` of its voxels
are covered by the predicted mask. A predicted region is a false positive
when less than ``tau`` of its own voxels fall inside the ground-truth mask.
Both fractions are self-denominated; ``overlap="iou"`` switches to
intersection-over-union against the regions it touches.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._validation import GridMismatchError, as_bool, check_fraction, check_same_grid, spacing_of
from .regions import LabeledRegions, connected_components
from .volume import Spacing


class DetectionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True, eq=False)
class MatchTable:
    """Region correspondences between a ground-truth and a predicted labelling.

    Per-region arrays are indexed by ``id - 1``. ``pairs`` lists every
    ``(gt_id, pred_id, n_shared_voxels)`` with a non-empty intersection.
    """

    gt_covered: np.ndarray
    gt_detected: np.ndarray
    pred_overlap: np.ndarray
    pred_false_positive: np.ndarray
    pairs: np.ndarray
    gt_labels: np.ndarray
    pred_labels: np.ndarray
    tau: float
    overlap: str = "self"

    @property
    def counts(self) -> DetectionCounts:
        tp = int(self.gt_detected.sum())
        return DetectionCounts(tp, int(self.pred_false_positive.sum()), len(self.gt_detected) - tp)

    @property
    def tp(self) -> int:
        return self.counts.tp

    @property
    def fp(self) -> int:
        return self.counts.fp

    @property
    def fn(self) -> int:
        return self.counts.fn

    def matched_pred_ids(self) -> np.ndarray:
        """Non-false-positive predicted regions touching a detected GT region."""
        if not len(self.pairs):
            return np.zeros(0, dtype=np.int64)
        g, p = self.pairs[:, 0], self.pairs[:, 1]
        keep = self.gt_detected[g - 1] & ~self.pred_false_positive[p - 1]
        return np.unique(p[keep])

    def detected_gt_ids(self) -> np.ndarray:
        return np.flatnonzero(self.gt_detected) + 1


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabeledRegions) else np.asarray(x)


def _pairs(g: np.ndarray, p: np.ndarray, kp: int) -> np.ndarray:
    both = (g > 0) & (p > 0)
    if not both.any():
        return np.zeros((0, 3), dtype=np.int64)
    code = g[both].astype(np.int64) * (kp + 1) + p[both]
    uniq, n = np.unique(code, return_counts=True)
    return np.stack([uniq // (kp + 1), uniq % (kp + 1), n], axis=1)


def match_regions(gt, pred, tau: float = 0.5, overlap: str = "self") -> MatchTable:
    """Classify GT regions as TP/FN and predicted regions as FP or not.

    ``gt`` and ``pred`` are :class:`LabeledRegions` (or integer label maps)
    on the same grid.
    """
    tau = check_fraction(tau, "tau")
    if overlap not in ("self", "iou"):
        raise ValueError(f"overlap must be 'self' or 'iou', got {overlap!r}")
    g, p = _labels(gt), _labels(pred)
    if g.shape != p.shape:
        raise GridMismatchError(f"label maps differ in shape: {g.shape} vs {p.shape}")
    if isinstance(gt, LabeledRegions) and isinstance(pred, LabeledRegions):
        if not np.allclose(gt.spacing, pred.spacing, rtol=0, atol=1e-6):
            raise GridMismatchError(f"spacings differ: {gt.spacing} vs {pred.spacing}")
    kg, kp = int(g.max(initial=0)), int(p.max(initial=0))
    g_size = np.bincount(g.ravel(), minlength=kg + 1)[1:]
    p_size = np.bincount(p.ravel(), minlength=kp + 1)[1:]
    pairs = _pairs(g, p, kp)
    g_hit = np.bincount(pairs[:, 0], weights=pairs[:, 2], minlength=kg + 1)[1:]
    p_hit = np.bincount(pairs[:, 1], weights=pairs[:, 2], minlength=kp + 1)[1:]

    if overlap == "self":
        g_frac = g_hit / np.maximum(g_size, 1)
        p_frac = p_hit / np.maximum(p_size, 1)
    else:
        # union with every region of the other labelling that it touches
        g_other = np.bincount(pairs[:, 0], weights=p_size[pairs[:, 1] - 1], minlength=kg + 1)[1:]
        p_other = np.bincount(pairs[:, 1], weights=g_size[pairs[:, 0] - 1], minlength=kp + 1)[1:]
        g_frac = g_hit / np.maximum(g_size + g_other - g_hit, 1)
        p_frac = p_hit / np.maximum(p_size + p_other - p_hit, 1)

    return MatchTable(
        gt_covered=g_frac,
        gt_detected=g_frac >= tau,
        pred_overlap=p_frac,
        pred_false_positive=p_frac < tau,
        pairs=pairs,
        gt_labels=g,
        pred_labels=p,
        tau=tau,
        overlap=overlap,
    )


def match_masks(gt_mask, pred_mask, tau: float = 0.5, connectivity: int = 26, overlap: str = "self"):
    """Label both masks and match them; returns ``(gt_regions, pred_regions, table)``."""
    check_same_grid(gt_mask, pred_mask)
    gt = connected_components(gt_mask, connectivity)
    pred = connected_components(pred_mask, connectivity)
    return gt, pred, match_regions(gt, pred, tau, overlap)


def matched_unions(gt_mask, pred_mask, m: MatchTable):
    """Boolean masks of the detected GT regions and the predictions matched to them."""
    shape = check_same_grid(gt_mask, pred_mask)
    if m.gt_labels.shape != shape:
        raise GridMismatchError("match table was computed on a different grid")
    gt_ids = m.detected_gt_ids()
    pred_ids = m.matched_pred_ids()
    a = _select(m.gt_labels, gt_ids)
    b = _select(m.pred_labels, pred_ids)
    return a, b


def _select(labels: np.ndarray, ids: np.ndarray) -> np.ndarray:
    if len(ids) == 0:
        return np.zeros(labels.shape, dtype=bool)
    lut = np.zeros(int(labels.max()) + 1, dtype=bool)
    lut[ids] = True
    return lut[labels]


def clustered_dice(gt_mask, pred_mask, m: MatchTable) -> float | None:
    """Volumetric Dice over the matched clustered regions, or ``None`` if nothing was detected."""
    if m.tp == 0:
        check_same_grid(gt_mask, pred_mask)
        return None
    a, b = matched_unions(gt_mask, pred_mask, m)
    na, nb = int(a.sum()), int(b.sum())
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (na + nb)


class F1Result(NamedTuple):
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def cohort_f1(counts) -> F1Result:
    """Pool TP/FP/FN over a cohort and compute precision, recall and F1.

    A ratio with a zero denominator is reported as 0.
    """
    counts = [DetectionCounts(*c) for c in counts]
    if not counts:
        raise ValueError("cohort_f1 needs at least one image")
    tp = sum(c.tp for c in counts)
    fp = sum(c.fp for c in counts)
    fn = sum(c.fn for c in counts)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Result(precision, recall, f1, tp, fp, fn)


def volume_occupancy(pred, spacing=None) -> float:
    """Total predicted foreground volume in cc (all of it is a misdetection on tumour-free scans)."""
    if isinstance(pred, LabeledRegions):
        n = int(np.count_nonzero(pred.labels))
        sp = pred.spacing if spacing is None else Spacing.coerce(spacing)
    else:
        n = int(np.count_nonzero(as_bool(pred)))
        sp = spacing_of(pred) if spacing is None else Spacing.coerce(spacing)
    return n * sp.voxel_volume_mm3 / 1000.0
