"""HU windowing and resampling to a target voxel spacing.

The function API works on :class:`~segood.volume.ImageVolume`; the
estimator classes wrap it so the steps slot into a scikit-learn
``Pipeline``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .volume import BinaryMask, ImageVolume, Spacing, make_volume

LUNG_WINDOW = (-400.0, 400.0)


class WindowSpec(NamedTuple):
    lo: float
    hi: float


def _window(w) -> WindowSpec:
    w = WindowSpec(*(float(v) for v in w))
    if not w.lo < w.hi:
        raise ValueError(f"window needs lo < hi, got {tuple(w)}")
    return w


def hu_window_normalize(vol: ImageVolume, w=LUNG_WINDOW) -> ImageVolume:
    """Map ``[lo, hi]`` linearly onto ``[0, 1]`` and clamp outside it."""
    lo, hi = _window(w)
    if vol.unit not in ("HU", "normalized"):
        raise ValueError(f"windowing expects intensity data, got unit {vol.unit!r}")
    out = (vol.data.astype(np.float64) - lo) / (hi - lo)
    return ImageVolume(np.clip(out, 0.0, 1.0), vol.spacing, vol.origin, "normalized")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resampled_dims(dims, spacing, target) -> tuple:
    return tuple(max(1, _round_half_up(n * s / t)) for n, s, t in zip(dims, spacing, target))


def _sample_coords(n_out: int, n_in: int, s_in: float, s_out: float) -> np.ndarray:
    # voxel-centre convention: output centre (i + 0.5) * s_out in mm, input index space
    i = np.arange(n_out, dtype=np.float64)
    x = (i + 0.5) * s_out / s_in - 0.5
    return np.clip(x, 0.0, n_in - 1)


def _linear_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = coords - i0
    shape = [1, 1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    return a + (b - a) * frac


def _check_target(target) -> Spacing:
    try:
        return Spacing.coerce(target)
    except ValueError as exc:
        raise ValueError(f"invalid target spacing: {exc}") from None


def resample_trilinear(vol: ImageVolume, target=(1.0, 1.0, 1.0)) -> ImageVolume:
    """Trilinear resampling of a continuous-valued volume to ``target`` spacing.

    Separable linear interpolation, one axis at a time, with clamped borders.
    Output values stay within the input range.
    """
    target = _check_target(target)
    if vol.unit == "label":
        raise ValueError("use resample_nearest for label volumes")
    if np.allclose(target, vol.spacing, rtol=0, atol=0):
        return vol
    out_dims = resampled_dims(vol.dims, vol.spacing, target)
    arr = vol.data.astype(np.float64)
    for axis in range(3):
        coords = _sample_coords(out_dims[axis], vol.dims[axis], vol.spacing[axis], target[axis])
        arr = _linear_axis(arr, coords, axis)
    if vol.unit == "probability":
        arr = np.clip(arr, 0.0, 1.0)
    return make_volume(arr, target, vol.origin, vol.unit)


def resample_nearest(mask: BinaryMask, target=(1.0, 1.0, 1.0)) -> BinaryMask:
    """Nearest-centre resampling of a label mask; the {0, 1} alphabet is kept."""
    target = _check_target(target)
    if np.allclose(target, mask.spacing, rtol=0, atol=0):
        return mask
    out_dims = resampled_dims(mask.dims, mask.spacing, target)
    idx = []
    for axis in range(3):
        coords = _sample_coords(out_dims[axis], mask.dims[axis], mask.spacing[axis], target[axis])
        idx.append(np.floor(coords + 0.5).astype(np.intp).clip(0, mask.dims[axis] - 1))
    arr = mask.data[np.ix_(*idx)]
    return BinaryMask(arr, target, mask.origin)


class HUWindowNormalizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`hu_window_normalize`.

    Stateless; ``fit`` only validates parameters. ``transform`` accepts an
    :class:`ImageVolume` or an iterable of them.
    """

    def __init__(self, lo=LUNG_WINDOW[0], hi=LUNG_WINDOW[1]):
        self.lo = lo
        self.hi = hi

    def fit(self, X=None, y=None):
        self.window_ = _window((self.lo, self.hi))
        return self

    def transform(self, X):
        window = _window((self.lo, self.hi))
        if isinstance(X, ImageVolume):
            return hu_window_normalize(X, window)
        return [hu_window_normalize(v, window) for v in X]


class IsotropicResampler(TransformerMixin, BaseEstimator):
    """Estimator wrapper resampling volumes (trilinear) or masks (nearest)."""

    def __init__(self, spacing=(1.0, 1.0, 1.0)):
        self.spacing = spacing

    def fit(self, X=None, y=None):
        self.spacing_ = _check_target(self.spacing)
        return self

    def _one(self, v):
        if v.unit == "label":
            return resample_nearest(v, self.spacing)
        return resample_trilinear(v, self.spacing)

    def transform(self, X):
        if isinstance(X, ImageVolume):
            return self._one(X)
        return [self._one(v) for v in X]
