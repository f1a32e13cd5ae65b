"""3D connected-component labelling of binary masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import as_bool, spacing_of
from .volume import Spacing

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass(frozen=True)
class Region:
    id: int
    voxel_count: int
    bbox: tuple  # ((i0, i1), (j0, j1), (k0, k1)), inclusive
    centroid: tuple  # index space


@dataclass(frozen=True, eq=False)
class LabeledRegions:
    """Label map (0 = background, 1..K) plus a per-region table."""

    labels: np.ndarray
    regions: tuple
    spacing: Spacing = Spacing(1.0, 1.0, 1.0)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def counts(self) -> np.ndarray:
        """Voxel counts indexed by label; entry 0 is the background count."""
        return np.bincount(self.labels.ravel(order="F"), minlength=self.n_regions + 1)

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0

    def __len__(self):
        return self.n_regions


def _scan_order_view(arr: np.ndarray) -> np.ndarray:
    # transposed view is C-contiguous in x-fastest order, so scipy's raster
    # labelling assigns ids in first-encountered x-fastest order
    return arr.T


def connected_components(mask, connectivity: int = 26, min_size: int = 0) -> LabeledRegions:
    """Label maximal connected foreground sets.

    Region ids are assigned in order of each region's first voxel in the
    x-fastest scan. Regions smaller than ``min_size`` voxels are dropped and
    the remaining ids renumbered contiguously.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    fg = as_bool(mask)
    labels_t, k = ndimage.label(_scan_order_view(fg), structure=_STRUCTURES[connectivity])
    labels = labels_t.T.astype(np.int32, copy=False)
    if min_size > 1 and k:
        counts = np.bincount(labels.ravel(), minlength=k + 1)
        keep = counts >= min_size
        keep[0] = False
        remap = np.zeros(k + 1, dtype=np.int32)
        remap[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
        labels = remap[labels]
        k = int(keep.sum())
    return LabeledRegions(labels, _region_table(labels, k), spacing_of(mask))


def _region_table(labels: np.ndarray, k: int) -> tuple:
    if k == 0:
        return ()
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k + 1)
    idx = np.nonzero(flat)[0]
    lab = flat[idx]
    coords = np.unravel_index(idx, labels.shape)
    sums = [np.bincount(lab, weights=c, minlength=k + 1) for c in coords]
    slices = ndimage.find_objects(labels, max_label=k)
    table = []
    for r in range(1, k + 1):
        bbox = tuple((s.start, s.stop - 1) for s in slices[r - 1])
        centroid = tuple(float(s[r] / counts[r]) for s in sums)
        table.append(Region(r, int(counts[r]), bbox, centroid))
    return tuple(table)


@dataclass(frozen=True)
class RegionStats:
    id: int
    volume_cc: float
    centroid_mm: tuple


def region_stats(lr: LabeledRegions, spacing=None) -> list:
    """Physical volume (cc) and centroid (mm, relative to index 0) per region."""
    sp = Spacing.coerce(spacing) if spacing is not None else lr.spacing
    vox_cc = sp.voxel_volume_mm3 / 1000.0
    return [
        RegionStats(
            r.id,
            r.voxel_count * vox_cc,
            tuple(c * s for c, s in zip(r.centroid, sp)),
        )
        for r in lr.regions
    ]
