"""Surface voxels, exact nearest-surface distances and HD95."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import as_bool, spacing_of
from .seg_metrics import MatchTable, matched_unions
from .volume import Spacing

BRUTE_FORCE_LIMIT = 4096
_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True, eq=False)
class SurfaceSet:
    """Indices (N x 3) of foreground voxels that have a background 6-neighbour."""

    indices: np.ndarray
    spacing: Spacing = Spacing(1.0, 1.0, 1.0)

    def __len__(self):
        return len(self.indices)

    @property
    def points_mm(self) -> np.ndarray:
        return self.indices * np.asarray(self.spacing, dtype=np.float64)


def _bbox(fg: np.ndarray):
    nz = [np.flatnonzero(fg.any(axis=tuple(a for a in range(3) if a != ax))) for ax in range(3)]
    return tuple((int(i[0]), int(i[-1]) + 1) for i in nz)


def surface_mask(mask) -> np.ndarray:
    """Boolean map of surface voxels; voxels outside the grid count as background."""
    fg = as_bool(mask)
    out = np.zeros(fg.shape, dtype=bool)
    if not fg.any():
        return out
    box = _bbox(fg)
    sl = tuple(slice(lo, hi) for lo, hi in box)
    sub = fg[sl]
    interior = ndimage.binary_erosion(sub, structure=_SIX, border_value=0)
    # the crop is the bounding box, so everything beyond its edge is background
    out[sl] = sub & ~interior
    return out


def extract_surface(mask, spacing=None) -> SurfaceSet:
    sp = Spacing.coerce(spacing) if spacing is not None else spacing_of(mask)
    idx = np.argwhere(surface_mask(mask))
    return SurfaceSet(idx.astype(np.int64), sp)


def _brute_force(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty(len(a))
    chunk = max(1, 2**18 // len(b))
    for s in range(0, len(a), chunk):
        diff = a[s : s + chunk, None, :] - b[None, :, :]
        out[s : s + chunk] = np.sqrt(np.min(np.einsum("ijk,ijk->ij", diff, diff), axis=1))
    return out


def _edt_distances(a: SurfaceSet, b: SurfaceSet) -> np.ndarray:
    both = np.concatenate([a.indices, b.indices])
    lo = both.min(axis=0)
    hi = both.max(axis=0) + 1
    grid = np.ones(tuple(hi - lo), dtype=bool)
    bi = b.indices - lo
    grid[bi[:, 0], bi[:, 1], bi[:, 2]] = False
    dist = ndimage.distance_transform_edt(grid, sampling=tuple(b.spacing))
    ai = a.indices - lo
    return dist[ai[:, 0], ai[:, 1], ai[:, 2]].astype(np.float64)


def directed_distances(a: SurfaceSet, b: SurfaceSet, method: str = "auto") -> np.ndarray:
    """Distance in mm from each voxel of ``a`` to the nearest voxel of ``b``.

    Exact either way: a brute-force pairwise minimum for small ``b`` or a
    Euclidean distance transform over the bounding box of both sets.
    """
    if len(b) == 0:
        raise ValueError("target surface is empty")
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-6):
        raise ValueError("surfaces have different spacings")
    if len(a) == 0:
        return np.zeros(0)
    if method == "auto":
        method = "brute" if len(b) <= BRUTE_FORCE_LIMIT and len(a) * len(b) <= 2**24 else "edt"
    if method == "brute":
        return _brute_force(a.points_mm, b.points_mm)
    if method == "edt":
        return _edt_distances(a, b)
    raise ValueError(f"unknown method {method!r}")


def symmetric_distances(a_mask, b_mask, spacing=None):
    """Both directed distance lists between the surfaces of two masks."""
    sp = Spacing.coerce(spacing) if spacing is not None else spacing_of(a_mask, b_mask)
    sa = extract_surface(a_mask, sp)
    sb = extract_surface(b_mask, sp)
    return directed_distances(sa, sb), directed_distances(sb, sa)


def hausdorff_percentile(d_ab: np.ndarray, d_ba: np.ndarray, q: float = 95.0,
                         convention: str = "combined") -> float:
    if convention == "combined":
        return float(np.percentile(np.concatenate([d_ab, d_ba]), q))
    if convention == "max_directed":
        return float(max(np.percentile(d_ab, q), np.percentile(d_ba, q)))
    raise ValueError(f"unknown HD convention {convention!r}")


def hd95(gt_mask, pred_mask, m: MatchTable, convention: str = "combined",
         percentile: float = 95.0) -> float | None:
    """HD95 in mm between the matched GT and predicted regions.

    ``None`` when no GT region is detected or no prediction is matched.
    """
    a, b = matched_unions(gt_mask, pred_mask, m)
    if not a.any() or not b.any():
        return None
    d_ab, d_ba = symmetric_distances(a, b, spacing_of(gt_mask, pred_mask))
    return hausdorff_percentile(d_ab, d_ba, percentile, convention)
