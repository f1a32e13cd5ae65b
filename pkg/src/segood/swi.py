"""Gaussian-weighted sliding-window aggregation of patch predictions.

A patch scorer is any callable ``scorer(patch, origin) -> probabilities``
where ``patch`` is a ``(px, py, pz)`` array cut from the (padded) volume and
``origin`` its corner index in padded coordinates. One-argument callables
``scorer(patch)`` are accepted too.
"""
from __future__ import annotations

import inspect
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .nifti import read_raw, write_raw
from .volume import ImageVolume, ProbabilityMap, make_volume, threshold_map

WEIGHT_FLOOR = 1e-8


@dataclass(frozen=True)
class WindowSpec3D:
    patch: tuple = (128, 128, 128)
    overlap: float = 0.5
    sigma_scale: float = 0.125

    def __post_init__(self):
        patch = tuple(int(p) for p in (self.patch if np.ndim(self.patch) else (self.patch,) * 3))
        if len(patch) != 3 or min(patch) < 1:
            raise ValueError(f"patch dims must be three positive integers, got {self.patch}")
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if not self.sigma_scale > 0:
            raise ValueError(f"sigma_scale must be > 0, got {self.sigma_scale}")
        object.__setattr__(self, "patch", patch)

    @property
    def strides(self) -> tuple:
        return tuple(int(math.floor(p * (1 - self.overlap) + 0.5)) for p in self.patch)


@dataclass(frozen=True)
class TilePlan:
    dims: tuple
    padded_dims: tuple
    pad_before: tuple
    positions: tuple

    @property
    def padded(self) -> bool:
        return self.dims != self.padded_dims


def _axis_positions(n: int, patch: int, stride: int) -> list:
    if stride <= 0:
        raise ValueError(f"non-positive stride {stride}; lower the overlap")
    last = n - patch
    pos = list(range(0, last + 1, stride))
    if pos[-1] != last:
        pos.append(last)
    return pos


def plan_tiles(dims, w: WindowSpec3D) -> TilePlan:
    dims = tuple(int(d) for d in dims)
    padded = tuple(max(d, p) for d, p in zip(dims, w.patch))
    before = tuple((pd - d) // 2 for d, pd in zip(dims, padded))
    axes = [_axis_positions(n, p, s) for n, p, s in zip(padded, w.patch, w.strides)]
    return TilePlan(dims, padded, before, tuple(itertools.product(*axes)))


def tile_positions(dims, w: WindowSpec3D) -> list:
    """Patch origins (padded coordinates), sorted lexicographically."""
    return list(plan_tiles(dims, w).positions)


def gaussian_weight(w: WindowSpec3D) -> np.ndarray:
    """Separable Gaussian importance map, 1 at the patch centre, floored at 1e-8."""
    weight = np.ones(w.patch, dtype=np.float64)
    for axis, n in enumerate(w.patch):
        sigma = w.sigma_scale * n
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        g = np.exp(-(x**2) / (2.0 * sigma**2))
        shape = [1, 1, 1]
        shape[axis] = n
        weight = weight * g.reshape(shape)
    return np.maximum(weight, WEIGHT_FLOOR)


def _pad(data: np.ndarray, plan: TilePlan) -> np.ndarray:
    if not plan.padded:
        return data
    pad = [(b, pd - d - b) for d, pd, b in zip(plan.dims, plan.padded_dims, plan.pad_before)]
    return np.pad(data, pad, mode="constant", constant_values=0)


def _bind(scorer):
    try:
        params = [
            p for p in inspect.signature(scorer).parameters.values()
            if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD, p.VAR_POSITIONAL)
        ]
    except (TypeError, ValueError):
        return scorer
    if len(params) == 1 and params[0].kind != params[0].VAR_POSITIONAL:
        return lambda patch, origin: scorer(patch)
    return scorer


def aggregate(vol, scorer, w: WindowSpec3D | None = None, n_workers: int = 1) -> ProbabilityMap:
    """Blend overlapping patch predictions into a full-volume probability map.

    Tiles are scored (possibly concurrently) but always accumulated in sorted
    origin order, so the result does not depend on ``n_workers``.
    """
    w = w or WindowSpec3D()
    data = vol.data if isinstance(vol, ImageVolume) else np.asarray(vol, dtype=np.float32)
    plan = plan_tiles(data.shape, w)
    data = _pad(data, plan)
    weight = gaussian_weight(w)
    num = np.zeros(plan.padded_dims, dtype=np.float64)
    den = np.zeros(plan.padded_dims, dtype=np.float64)
    score = _bind(scorer)

    def run(origin):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, w.patch))
        out = np.asarray(score(data[sl], origin), dtype=np.float64)
        if out.shape != w.patch:
            raise ValueError(f"scorer returned shape {out.shape} for patch {w.patch} at {origin}")
        if out.size and (not np.isfinite(out).all() or out.min() < 0 or out.max() > 1):
            raise ValueError(f"scorer output outside [0, 1] at {origin}")
        return sl, out

    def accumulate(results):
        for sl, out in results:
            num[sl] += weight * out
            den[sl] += weight

    positions = plan.positions
    if n_workers <= 1:
        accumulate(map(run, positions))
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            for s in range(0, len(positions), n_workers):
                accumulate(pool.map(run, positions[s : s + n_workers]))

    out = num / den
    crop = tuple(slice(b, b + d) for b, d in zip(plan.pad_before, plan.dims))
    out = np.clip(out[crop], 0.0, 1.0)
    if isinstance(vol, ImageVolume):
        return ProbabilityMap(out, vol.spacing, vol.origin)
    return ProbabilityMap(out)


def patch_filename(origin) -> str:
    return "patch_{}_{}_{}.raw".format(*origin)


def export_patches(vol: ImageVolume, directory, w: WindowSpec3D | None = None) -> list:
    """Write every (padded) input patch in the raw format for an external scorer."""
    w = w or WindowSpec3D()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    plan = plan_tiles(vol.dims, w)
    data = _pad(vol.data.astype(np.float32), plan)
    unit = "normalized" if vol.unit == "label" else vol.unit
    for origin in plan.positions:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, w.patch))
        write_raw(make_volume(data[sl], vol.spacing, unit=unit), directory / patch_filename(origin))
    return list(plan.positions)


class DirectoryPatchScorer:
    """Serves pre-computed patch predictions stored as ``patch_<x>_<y>_<z>.raw`` + ``.json``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, patch, origin):
        path = self.directory / patch_filename(origin)
        if not path.exists():
            raise FileNotFoundError(f"no prediction for patch at {tuple(origin)}: {path}")
        return read_raw(path).data


class ConstantScorer:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, patch, origin):
        return np.full(patch.shape, self.value)


class SlidingWindowInferer(BaseEstimator):
    """Estimator facade over :func:`aggregate`; ``predict_proba`` returns a :class:`ProbabilityMap`."""

    def __init__(self, scorer=None, patch_size=(128, 128, 128), overlap=0.5, sigma_scale=0.125,
                 n_workers=1, threshold=0.5):
        self.scorer = scorer
        self.patch_size = patch_size
        self.overlap = overlap
        self.sigma_scale = sigma_scale
        self.n_workers = n_workers
        self.threshold = threshold

    def _spec(self):
        return WindowSpec3D(tuple(self.patch_size), self.overlap, self.sigma_scale)

    def fit(self, X=None, y=None):
        self.window_ = self._spec()
        return self

    def predict_proba(self, vol) -> ProbabilityMap:
        if self.scorer is None:
            raise ValueError("SlidingWindowInferer needs a scorer")
        return aggregate(vol, self.scorer, self._spec(), self.n_workers)

    def predict(self, vol):
        return threshold_map(self.predict_proba(vol), self.threshold)
