"""Input validation helpers used at public entry points."""
from __future__ import annotations

import numpy as np

from .volume import BinaryMask, ImageVolume, Spacing


class GridMismatchError(ValueError):
    """Two volumes that must share a grid do not."""


def as_array(x) -> np.ndarray:
    """Return the voxel array of a volume or an array-like."""
    if isinstance(x, ImageVolume):
        return x.data
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {arr.shape}")
    return arr


def as_bool(x) -> np.ndarray:
    arr = as_array(x)
    return arr if arr.dtype == bool else arr != 0


def spacing_of(*volumes, default=(1.0, 1.0, 1.0)) -> Spacing:
    for v in volumes:
        if isinstance(v, ImageVolume):
            return v.spacing
    return Spacing.coerce(default)


def check_same_grid(*volumes) -> tuple:
    """Raise :class:`GridMismatchError` unless all inputs share dims (and spacing, where known)."""
    shapes = {as_array(v).shape for v in volumes}
    if len(shapes) > 1:
        raise GridMismatchError(f"volume shapes differ: {sorted(shapes)}")
    vols = [v for v in volumes if isinstance(v, ImageVolume)]
    for v in vols[1:]:
        if not np.allclose(v.spacing, vols[0].spacing, rtol=0, atol=1e-6):
            raise GridMismatchError(f"spacings differ: {vols[0].spacing} vs {v.spacing}")
    return shapes.pop()


def check_probability(x) -> np.ndarray:
    arr = as_array(x)
    if arr.size and (np.nanmin(arr) < 0 or np.nanmax(arr) > 1 or not np.isfinite(arr).all()):
        raise ValueError("probabilities must be finite and lie in [0, 1]")
    return arr


def check_mask(x) -> BinaryMask:
    if isinstance(x, BinaryMask):
        return x
    if isinstance(x, ImageVolume):
        return BinaryMask(x.data, x.spacing, x.origin)
    return BinaryMask(np.asarray(x))


def check_fraction(value: float, name: str, *, low_open=False, high_open=False) -> float:
    value = float(value)
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value < 1 if high_open else value <= 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name} must lie in the unit interval, got {value}")
    return value
