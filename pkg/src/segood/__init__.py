"""Segmentation accuracy and out-of-distribution robustness metrics for 3D CT."""

__version__ = "0.1.0"

from .nifti import read_nifti, read_raw, write_nifti, write_raw
from .phantom import PhantomSpec, Sphere, gen_phantom, gen_shifted_pair
from .preprocess import (
    HUWindowNormalizer,
    IsotropicResampler,
    hu_window_normalize,
    resample_nearest,
    resample_trilinear,
)
from .regions import LabeledRegions, connected_components, region_stats
from .seg_metrics import (
    DetectionCounts,
    MatchTable,
    clustered_dice,
    cohort_f1,
    match_masks,
    match_regions,
    volume_occupancy,
)
from .surface import SurfaceSet, directed_distances, extract_surface, hd95
from .swi import SlidingWindowInferer, WindowSpec3D, aggregate, gaussian_weight, tile_positions
from .uncertainty import (
    MSPOODDetector,
    auroc,
    cohort_stats,
    entropy_map,
    fpr_at_95tpr,
    mean_entropy_over_tumor,
    msp_score,
    slice_entropy_profile,
)
from .volume import BinaryMask, ImageVolume, ProbabilityMap, Spacing, threshold_map

__all__ = [
    "BinaryMask",
    "DetectionCounts",
    "HUWindowNormalizer",
    "ImageVolume",
    "IsotropicResampler",
    "LabeledRegions",
    "MSPOODDetector",
    "MatchTable",
    "PhantomSpec",
    "ProbabilityMap",
    "SlidingWindowInferer",
    "Spacing",
    "Sphere",
    "SurfaceSet",
    "WindowSpec3D",
    "aggregate",
    "auroc",
    "clustered_dice",
    "cohort_f1",
    "cohort_stats",
    "connected_components",
    "directed_distances",
    "entropy_map",
    "extract_surface",
    "fpr_at_95tpr",
    "gaussian_weight",
    "gen_phantom",
    "gen_shifted_pair",
    "hd95",
    "hu_window_normalize",
    "match_masks",
    "match_regions",
    "mean_entropy_over_tumor",
    "msp_score",
    "read_nifti",
    "read_raw",
    "region_stats",
    "resample_nearest",
    "resample_trilinear",
    "slice_entropy_profile",
    "threshold_map",
    "tile_positions",
    "volume_occupancy",
    "write_nifti",
    "write_raw",
]
