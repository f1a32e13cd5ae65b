"""Deterministic synthetic volumes with analytically known metric values.

Sphere centres are given in mm relative to the centre of voxel (0, 0, 0);
a voxel belongs to a sphere when its centre lies within the radius.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .volume import BinaryMask, ImageVolume, ProbabilityMap, Spacing

HU_TISSUE = 40.0
HU_LUNG = -800.0


@dataclass(frozen=True)
class Sphere:
    center_mm: tuple
    radius_mm: float
    plateau: float = 0.9


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    spheres: tuple = field(default_factory=tuple)
    background: float = 0.05
    seed: int = 0
    jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", Spacing.coerce(self.spacing))
        spheres = tuple(s if isinstance(s, Sphere) else Sphere(**s) for s in self.spheres)
        object.__setattr__(self, "spheres", spheres)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if not 0 <= self.background < 0.5:
            raise ValueError(f"background probability must lie in [0, 0.5), got {self.background}")
        extent = np.asarray(self.dims) * np.asarray(self.spacing)
        half = 0.5 * np.asarray(self.spacing)
        for s in spheres:
            if not 0.5 < s.plateau <= 1:
                raise ValueError(f"sphere plateau must lie in (0.5, 1], got {s.plateau}")
            if s.radius_mm <= 0:
                raise ValueError(f"sphere radius must be > 0, got {s.radius_mm}")
            c = np.asarray(s.center_mm, dtype=float)
            if np.any(c - s.radius_mm < -half) or np.any(c + s.radius_mm > extent - half):
                raise ValueError(f"sphere at {s.center_mm} with radius {s.radius_mm} leaves the grid")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        keys = ("dims", "spacing", "spheres", "background", "seed", "jitter")
        return cls(**{k: d[k] for k in keys if k in d})


class Phantom(NamedTuple):
    image: ImageVolume
    gt: BinaryMask
    prob: ProbabilityMap


def sphere_masks(spec: PhantomSpec):
    """One boolean mask per sphere, by voxel-centre inclusion."""
    axes = [np.arange(n) * s for n, s in zip(spec.dims, spec.spacing)]
    x, y, z = axes
    for s in spec.spheres:
        cx, cy, cz = s.center_mm
        d2 = (
            (x[:, None, None] - cx) ** 2
            + (y[None, :, None] - cy) ** 2
            + (z[None, None, :] - cz) ** 2
        )
        yield s, d2 <= s.radius_mm**2


def gen_phantom(spec: PhantomSpec) -> Phantom:
    gt = np.zeros(spec.dims, dtype=bool)
    prob = np.full(spec.dims, spec.background, dtype=np.float64)
    for sphere, inside in sphere_masks(spec):
        gt |= inside
        prob[inside] = np.maximum(prob[inside], sphere.plateau)
    if spec.jitter > 0:
        rng = np.random.default_rng(spec.seed)
        prob = np.clip(prob + rng.uniform(-spec.jitter, spec.jitter, size=spec.dims), 0.0, 1.0)
    image = np.where(gt, HU_TISSUE, HU_LUNG)
    return Phantom(
        ImageVolume(image, spec.spacing, unit="HU"),
        BinaryMask(gt.astype(np.uint8), spec.spacing),
        ProbabilityMap(prob, spec.spacing),
    )


class ShiftedPair(NamedTuple):
    gt: BinaryMask
    pred: BinaryMask


def gen_shifted_pair(side: int, shift: int, margin: int = 2, spacing=(1.0, 1.0, 1.0)) -> ShiftedPair:
    """Two axis-aligned cubes of ``side`` voxels, the second offset by ``shift`` along x."""
    if side < 1 or shift < 0:
        raise ValueError("side must be >= 1 and shift >= 0")
    dims = (side + shift + 2 * margin, side + 2 * margin, side + 2 * margin)
    gt = np.zeros(dims, dtype=np.uint8)
    pred = np.zeros(dims, dtype=np.uint8)
    yz = slice(margin, margin + side)
    gt[margin : margin + side, yz, yz] = 1
    pred[margin + shift : margin + shift + side, yz, yz] = 1
    return ShiftedPair(BinaryMask(gt, spacing), BinaryMask(pred, spacing))
