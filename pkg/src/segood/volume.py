"""Volumetric data types shared by every other module.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. The flat on-disk
order is x-fastest, i.e. Fortran order of this array.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

UNITS = ("HU", "normalized", "probability", "label")


class Spacing(NamedTuple):
    """Voxel size in millimetres along x, y and z."""

    sx: float
    sy: float
    sz: float

    @classmethod
    def coerce(cls, value) -> "Spacing":
        if isinstance(value, (int, float)):
            value = (value, value, value)
        vals = tuple(float(v) for v in value)
        if len(vals) != 3:
            raise ValueError(f"spacing needs 3 components, got {len(vals)}")
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ValueError(f"spacing must be finite and > 0, got {vals}")
        return cls(*vals)

    @property
    def voxel_volume_mm3(self) -> float:
        return self.sx * self.sy * self.sz


@dataclass(frozen=True, eq=False)
class ImageVolume:
    """A 3D scalar grid with spacing, origin and an intensity-unit tag.

    The array is copied on construction and made read-only, so instances can
    be shared between workers.
    """

    data: np.ndarray
    spacing: Spacing = Spacing(1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    unit: str = "HU"

    def __post_init__(self):
        unit = self.unit
        if unit not in UNITS:
            raise ValueError(f"unknown unit {unit!r}; expected one of {UNITS}")
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        if unit == "label":
            if arr.dtype != np.uint8:
                if not np.isin(arr, (0, 1)).all():
                    raise ValueError("label volumes may only contain 0 and 1")
                arr = arr.astype(np.uint8)
            elif arr.max(initial=0) > 1:
                raise ValueError("label volumes may only contain 0 and 1")
            else:
                arr = arr.copy()
        else:
            arr = np.array(arr, dtype=np.float32)
            if not np.isfinite(arr).all():
                raise ValueError("volume data contains non-finite values")
            if unit == "probability" and arr.size and (arr.min() < 0 or arr.max() > 1):
                raise ValueError("probability values must lie in [0, 1]")
        arr.flags.writeable = False
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("origin needs 3 components")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", Spacing.coerce(self.spacing))
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def shape(self) -> tuple:
        return self.dims

    def same_grid(self, other: "ImageVolume") -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)

    def with_data(self, data, unit: str | None = None) -> "ImageVolume":
        """New volume on the same grid; picks the subclass matching ``unit``."""
        return make_volume(data, self.spacing, self.origin, unit or self.unit)

    def flat(self) -> np.ndarray:
        """Data in x-fastest order."""
        return self.data.ravel(order="F")


class ProbabilityMap(ImageVolume):
    """Per-voxel foreground probability in [0, 1]."""

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), unit="probability"):
        if unit != "probability":
            raise ValueError("ProbabilityMap unit must be 'probability'")
        super().__init__(data, spacing, origin, unit)


class BinaryMask(ImageVolume):
    """A {0, 1} mask stored as uint8."""

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), unit="label"):
        if unit != "label":
            raise ValueError("BinaryMask unit must be 'label'")
        super().__init__(data, spacing, origin, unit)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


def make_volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), unit="HU") -> ImageVolume:
    """Build the volume class matching ``unit``."""
    if unit == "probability":
        return ProbabilityMap(data, spacing, origin)
    if unit == "label":
        return BinaryMask(data, spacing, origin)
    return ImageVolume(data, spacing, origin, unit)


def threshold_map(p: ProbabilityMap, t: float = 0.5) -> BinaryMask:
    """Binarise a probability map; a voxel is foreground iff ``p >= t``."""
    if not 0 < t < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    if isinstance(p, ImageVolume):
        return BinaryMask((p.data >= np.float32(t)).astype(np.uint8), p.spacing, p.origin)
    return BinaryMask((np.asarray(p, dtype=np.float32) >= np.float32(t)).astype(np.uint8))
