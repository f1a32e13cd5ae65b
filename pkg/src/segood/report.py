"""Cohort evaluation, CSV/JSON reports and entropy overlay rendering.

Outputs of a run (``per_image.csv``, ``summary.json``) depend only on the
config and the input files: cases are reported in config order, floats in
the CSV use 6 significant digits and the JSON keeps full doubles. The worker
count and output directory are not recorded.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, PngImagePlugin
from scipy import ndimage

from .nifti import read_nifti
from .preprocess import LUNG_WINDOW, hu_window_normalize, resample_nearest, resample_trilinear
from .regions import connected_components
from ._validation import check_same_grid
from .seg_metrics import clustered_dice, cohort_f1, match_regions, matched_unions, volume_occupancy
from .surface import hausdorff_percentile, symmetric_distances
from .uncertainty import (
    auroc,
    binary_entropy,
    cohort_stats,
    fpr_at_95tpr,
    msp_score,
    slice_entropy_profile,
)
from .volume import BinaryMask, ImageVolume, threshold_map

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "SEGOOD_WORKERS"

CSV_COLUMNS = (
    "case_id",
    "status",
    "error",
    "dsc",
    "hd95_mm",
    "hd95_alt_mm",
    "tp",
    "fp",
    "fn",
    "mean_entropy",
    "no_detection",
    "msp",
    "ood_score",
    "predicted_volume_cc",
)

DEFAULT_OPTIONS = {
    "connectivity": 26,
    "tau": 0.5,
    "overlap": "self",
    "hd95_convention": "combined",
    "entropy_base": 2,
    "threshold": 0.5,
    "min_region_size": 0,
    "resample_spacing": None,
    "window": list(LUNG_WINDOW),
    "verbose": False,
    "slice_profile": False,
    "render": False,
}


class ConfigError(ValueError):
    """Invalid cohort configuration."""


@dataclass
class Case:
    id: str
    prob: Path
    gt: Path | None = None
    image: Path | None = None


@dataclass
class CohortConfig:
    name: str
    role: str
    cases: list
    options: dict = field(default_factory=lambda: dict(DEFAULT_OPTIONS))
    output_dir: Path = Path("out")
    workers: int = 1
    id_scores: Path | None = None

    def __post_init__(self):
        if self.role not in ("ID", "OOD"):
            raise ConfigError(f"role must be 'ID' or 'OOD', got {self.role!r}")
        if not self.cases:
            raise ConfigError("cohort has no cases")
        ids = [c.id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ConfigError("case ids must be unique")
        for c in self.cases:
            if self.role == "ID" and c.gt is None:
                raise ConfigError(f"ID case {c.id!r} has no gt path")
            paths = [p for p in (c.prob, c.gt, c.image) if p is not None]
            if len(set(paths)) != len(paths):
                raise ConfigError(f"case {c.id!r} reuses a path")
        unknown = set(self.options) - set(DEFAULT_OPTIONS)
        if unknown:
            raise ConfigError(f"unknown options: {sorted(unknown)}")
        self.options = {**DEFAULT_OPTIONS, **self.options}
        _check_options(self.options)
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "CohortConfig":
        def resolve(p):
            return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

        try:
            cases = [
                Case(str(c["id"]), resolve(c["prob"]), resolve(c.get("gt")), resolve(c.get("image")))
                for c in d["cases"]
            ]
            return cls(
                name=str(d.get("name", "cohort")),
                role=str(d["role"]),
                cases=cases,
                options=dict(d.get("options", {})),
                output_dir=resolve(d.get("output_dir", "out")),
                workers=int(d.get("workers", os.environ.get(WORKERS_ENV, 1))),
                id_scores=resolve(d.get("id_scores")),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed cohort config: {exc!r}") from None

    @classmethod
    def load(cls, path) -> "CohortConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d, path.parent)


def _check_options(o: dict) -> None:
    if o["connectivity"] not in (6, 18, 26):
        raise ConfigError("connectivity must be 6, 18 or 26")
    if not 0 <= float(o["tau"]) <= 1:
        raise ConfigError("tau must lie in [0, 1]")
    if not 0 < float(o["threshold"]) < 1:
        raise ConfigError("threshold must lie in (0, 1)")
    if o["overlap"] not in ("self", "iou"):
        raise ConfigError("overlap must be 'self' or 'iou'")
    if o["hd95_convention"] not in ("combined", "max_directed"):
        raise ConfigError("hd95_convention must be 'combined' or 'max_directed'")
    if o["entropy_base"] not in (2, "e"):
        raise ConfigError("entropy_base must be 2 or 'e'")
    if int(o["min_region_size"]) < 0:
        raise ConfigError("min_region_size must be >= 0")
    w = o["window"]
    if w is not None and (len(w) != 2 or not w[0] < w[1]):
        raise ConfigError("window must be [lo, hi] with lo < hi")
    sp = o["resample_spacing"]
    if sp is not None and (len(sp) != 3 or min(sp) <= 0):
        raise ConfigError("resample_spacing must be three positive numbers")


@dataclass
class ImageMetrics:
    case_id: str
    status: str = "ok"
    error: str = ""
    dsc: float | None = None
    hd95_mm: float | None = None
    hd95_alt_mm: float | None = None
    tp: int | None = None
    fp: int | None = None
    fn: int | None = None
    mean_entropy: float | None = None
    no_detection: bool | None = None
    msp: float | None = None
    ood_score: float | None = None
    predicted_volume_cc: float | None = None
    slice_entropy: list | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _entropy_base(o) -> float:
    return math.e if o["entropy_base"] == "e" else 2.0


def _load_prob(path: Path, spacing) -> ImageVolume:
    vol = read_nifti(path, unit="probability")
    return resample_trilinear(vol, spacing) if spacing is not None else vol


def _load_mask(path: Path, spacing) -> BinaryMask:
    vol = read_nifti(path, unit="label")
    return resample_nearest(vol, spacing) if spacing is not None else vol


def _uncertainty(prob: ImageVolume, pred: BinaryMask, o: dict, rec: ImageMetrics) -> None:
    fg = pred.data.astype(bool)
    rec.no_detection = not fg.any()
    if rec.no_detection:
        rec.mean_entropy = 0.0
    else:
        rec.mean_entropy = float(np.mean(binary_entropy(prob.data[fg], _entropy_base(o))))
    rec.msp = msp_score(prob, pred).value
    rec.ood_score = 1.0 - rec.msp
    rec.predicted_volume_cc = volume_occupancy(pred)
    if o["slice_profile"]:
        h = prob.with_data(binary_entropy(prob.data, _entropy_base(o)), "normalized")
        values = slice_entropy_profile(h, pred).values
        rec.slice_entropy = [None if np.isnan(v) else float(v) for v in values]


def evaluate_id_case(case: Case, o: dict) -> ImageMetrics:
    rec = ImageMetrics(case.id)
    prob = _load_prob(case.prob, o["resample_spacing"])
    gt = _load_mask(case.gt, o["resample_spacing"])
    if not prob.same_grid(gt):
        raise ValueError(f"grid mismatch: prob {prob.dims}@{prob.spacing} vs gt {gt.dims}@{gt.spacing}")
    pred = threshold_map(prob, o["threshold"])
    gt_lr = connected_components(gt, o["connectivity"], o["min_region_size"])
    pred_lr = connected_components(pred, o["connectivity"], o["min_region_size"])
    m = match_regions(gt_lr, pred_lr, o["tau"], o["overlap"])
    rec.tp, rec.fp, rec.fn = m.counts
    rec.dsc = clustered_dice(gt, pred, m)
    a, b = matched_unions(gt, pred, m)
    if a.any() and b.any():
        d_ab, d_ba = symmetric_distances(a, b, gt.spacing)
        rec.hd95_mm = hausdorff_percentile(d_ab, d_ba, 95.0, o["hd95_convention"])
        if o["verbose"]:
            other = "max_directed" if o["hd95_convention"] == "combined" else "combined"
            rec.hd95_alt_mm = hausdorff_percentile(d_ab, d_ba, 95.0, other)
    _uncertainty(prob, pred, o, rec)
    return rec


def evaluate_ood_case(case: Case, o: dict) -> ImageMetrics:
    rec = ImageMetrics(case.id)
    prob = _load_prob(case.prob, o["resample_spacing"])
    pred = threshold_map(prob, o["threshold"])
    if o["min_region_size"] > 1:
        lr = connected_components(pred, o["connectivity"], o["min_region_size"])
        pred = BinaryMask((lr.labels > 0).astype(np.uint8), pred.spacing, pred.origin)
    _uncertainty(prob, pred, o, rec)
    return rec


def _safe(fn, case: Case, o: dict) -> ImageMetrics:
    try:
        return fn(case, o)
    except Exception as exc:  # isolate per-case failures
        log.warning("case %s failed: %s", case.id, exc)
        return ImageMetrics(case.id, status="failed", error=f"{type(exc).__name__}: {exc}")


def _run_cases(fn, cfg: CohortConfig, workers: int | None = None) -> list:
    workers = int(workers or cfg.workers)
    if workers <= 1:
        return [_safe(fn, c, cfg.options) for c in cfg.cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: _safe(fn, c, cfg.options), cfg.cases))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def csv_round(v: float) -> float:
    """The value as it reads back from the CSV."""
    return float(f"{v:.6g}")


def write_csv(records, path: Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    path.write_text(buf.getvalue())


def read_scores(path, column: str = "ood_score") -> list:
    """OOD scores of the successful cases in a per-image CSV."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ID score file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and column not in rows[0]:
        raise ValueError(f"{path} has no {column!r} column")
    return [float(r[column]) for r in rows if r.get("status") == "ok" and r[column] != ""]


def _stats(values) -> dict | None:
    values = [v for v in values if v is not None]
    if not values:
        return None
    s = cohort_stats(values)
    return {
        "mean": s.mean,
        "std": s.std,
        "median": s.median,
        "q1": s.q1,
        "q3": s.q3,
        "n": s.n,
        "mean_std": format_mean_std(s.mean, s.std),
        "median_iqr": format_median_iqr(s.median, s.q1, s.q3),
    }


def format_mean_std(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def format_median_iqr(median: float, q1: float, q3: float, digits: int = 2) -> str:
    return f"{median:.{digits}f} [{q1:.{digits}f}, {q3:.{digits}f}]"


def _assumptions(o: dict) -> dict:
    return {
        "threshold_rule": f"p >= {o['threshold']}",
        "connectivity": o["connectivity"],
        "overlap_denominator": "own region volume" if o["overlap"] == "self" else "iou",
        "tau": o["tau"],
        "hd95_convention": o["hd95_convention"],
        "hd95_percentile_interpolation": "linear",
        "surface_neighbourhood": 6,
        "entropy_base": o["entropy_base"],
        "empty_prediction_entropy": 0.0,
        "empty_prediction_msp": 1.0,
        "ood_score": "1 - msp",
        "std": "sample (n-1)",
        "quantiles": "linear interpolation",
    }


def _base_summary(cfg: CohortConfig, records) -> dict:
    ok = [r for r in records if r.ok]
    failed = [r for r in records if not r.ok]
    return {
        "schema_version": SCHEMA_VERSION,
        "cohort": cfg.name,
        "role": cfg.role,
        "n_cases": len(records),
        "n_succeeded": len(ok),
        "n_failed": len(failed),
        "failures": [{"case_id": r.case_id, "error": r.error} for r in failed],
        "options": {k: cfg.options[k] for k in sorted(cfg.options)},
        "assumptions": _assumptions(cfg.options),
    }


def summarize_id(cfg: CohortConfig, records) -> dict:
    ok = [r for r in records if r.ok]
    summary = _base_summary(cfg, records)
    f1 = cohort_f1([(r.tp, r.fp, r.fn) for r in ok]) if ok else None
    summary["metrics"] = {
        "dsc": _stats(r.dsc for r in ok),
        "hd95_mm": _stats(r.hd95_mm for r in ok),
        "entropy": _stats(r.mean_entropy for r in ok),
        "entropy_detected_only": _stats(r.mean_entropy for r in ok if not r.no_detection),
        "msp": _stats(r.msp for r in ok),
        "f1": f1._asdict() if f1 else None,
    }
    summary["flags"] = {
        "dsc_undefined": sum(r.dsc is None for r in ok),
        "hd95_undefined": sum(r.hd95_mm is None for r in ok),
        "no_detection": sum(bool(r.no_detection) for r in ok),
    }
    if cfg.options["slice_profile"]:
        summary["slice_entropy"] = {r.case_id: r.slice_entropy for r in ok}
    return summary


def summarize_ood(cfg: CohortConfig, records, id_scores) -> dict:
    ok = [r for r in records if r.ok]
    summary = _base_summary(cfg, records)
    # score both sides at CSV precision so equal confidences tie exactly
    ood = [csv_round(r.ood_score) for r in ok]
    metrics = {
        "volume_occupancy_cc": _stats(r.predicted_volume_cc for r in ok),
        "entropy": _stats(r.mean_entropy for r in ok),
        "entropy_detected_only": _stats(r.mean_entropy for r in ok if not r.no_detection),
        "msp": _stats(r.msp for r in ok),
        "n_id_scores": len(id_scores),
        "auroc": None,
        "auroc_percent": None,
        "fpr_at_95tpr": None,
        "fpr_at_95tpr_percent": None,
    }
    if ood and id_scores:
        a = auroc(id_scores, ood)
        f = fpr_at_95tpr(id_scores, ood)
        metrics.update(
            auroc=a,
            auroc_percent=round(100 * a, 2),
            fpr_at_95tpr=f,
            fpr_at_95tpr_percent=round(100 * f, 2),
        )
    summary["metrics"] = metrics
    summary["flags"] = {"no_detection": sum(bool(r.no_detection) for r in ok)}
    if cfg.options["slice_profile"]:
        summary["slice_entropy"] = {r.case_id: r.slice_entropy for r in ok}
    return summary


def _emit(cfg: CohortConfig, records, summary: dict, out_dir) -> dict:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(records, out / "per_image.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _render_cases(cfg: CohortConfig, records, out_dir) -> None:
    out = Path(out_dir or cfg.output_dir) / "overlays"
    o = cfg.options
    for case, rec in zip(cfg.cases, records):
        if not rec.ok or case.image is None:
            continue
        try:
            image = read_nifti(case.image, unit="HU")
            prob = _load_prob(case.prob, o["resample_spacing"])
            if o["resample_spacing"] is not None:
                image = resample_trilinear(image, o["resample_spacing"])
            pred = threshold_map(prob, o["threshold"])
            h = prob.with_data(binary_entropy(prob.data, _entropy_base(o)), "normalized")
            render_overlay(image, h, pred, out_dir=out, prefix=case.id, window=o["window"])
        except Exception as exc:
            log.warning("rendering %s failed: %s", case.id, exc)


def run_eval_id(cfg: CohortConfig, out_dir=None, workers=None) -> dict:
    """Evaluate an ID cohort and write ``per_image.csv`` and ``summary.json``."""
    if cfg.role != "ID":
        raise ConfigError("run_eval_id needs an ID cohort")
    records = _run_cases(evaluate_id_case, cfg, workers)
    summary = _emit(cfg, records, summarize_id(cfg, records), out_dir)
    if cfg.options["render"]:
        _render_cases(cfg, records, out_dir)
    return summary


def run_eval_ood(cfg: CohortConfig, id_scores=None, out_dir=None, workers=None) -> dict:
    """Evaluate an OOD cohort against the ID scores of an earlier :func:`run_eval_id`."""
    if cfg.role != "OOD":
        raise ConfigError("run_eval_ood needs an OOD cohort")
    path = id_scores or cfg.id_scores
    if path is None:
        raise ConfigError("no ID score file given")
    scores = read_scores(path)
    if not scores:
        raise ValueError(f"ID score file {path} holds no successful cases")
    records = _run_cases(evaluate_ood_case, cfg, workers)
    summary = _emit(cfg, records, summarize_ood(cfg, records, scores), out_dir)
    if cfg.options["render"]:
        _render_cases(cfg, records, out_dir)
    return summary


# -- rendering --------------------------------------------------------------


def default_slices(mask) -> list:
    """Lowest, centroid and highest tumour-bearing axial slices (or the middle slice if empty)."""
    fg = mask.data.astype(bool) if isinstance(mask, ImageVolume) else np.asarray(mask, bool)
    zs = np.flatnonzero(fg.any(axis=(0, 1)))
    if len(zs) == 0:
        return [fg.shape[2] // 2]
    counts = fg.sum(axis=(0, 1))
    centroid = int(math.floor(np.sum(np.arange(fg.shape[2]) * counts) / counts.sum() + 0.5))
    out = []
    for z in (int(zs[0]), centroid, int(zs[-1])):
        if z not in out:
            out.append(z)
    return out


def _heat(e: np.ndarray) -> np.ndarray:
    r = np.clip(3 * e, 0, 1)
    g = np.clip(3 * e - 1, 0, 1)
    b = np.clip(3 * e - 2, 0, 1)
    return np.stack([r, g, b], axis=-1)


@dataclass(frozen=True)
class OverlaySlice:
    path: Path
    slice_index: int
    mean_entropy: float | None
    label: str


def render_overlay(image: ImageVolume, e, mask, slices=None, out_dir=".", prefix="case",
                   zoom: int = 2, window=LUNG_WINDOW) -> list:
    """Render windowed axial slices with an entropy heat overlay and mask contour.

    Each PNG is ``(ny * zoom, nx * zoom)`` pixels; the slice's mean tumour
    entropy is printed top-right (``-`` when the slice has no tumour) and
    stored in the PNG text field ``mean_entropy``.
    """
    check_same_grid(image, e, mask)
    zoom = int(zoom)
    if zoom < 1:
        raise ValueError("zoom must be a positive integer")
    fg = mask.data.astype(bool) if isinstance(mask, ImageVolume) else np.asarray(mask) != 0
    ev = np.asarray(e.data if isinstance(e, ImageVolume) else e, dtype=np.float64)
    nz = fg.shape[2]
    slices = default_slices(fg) if slices is None else [int(s) for s in slices]
    for s in slices:
        if not 0 <= s < nz:
            raise IndexError(f"slice {s} out of range [0, {nz})")
    if image.unit == "HU" and window is not None:
        gray = hu_window_normalize(image, window).data
    else:
        gray = np.clip(image.data, 0, 1)
    profile = slice_entropy_profile(ev, fg)
    detected = fg.any()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for s in slices:
        g = gray[:, :, s].T.astype(np.float64)  # rows = y, cols = x
        rgb = np.repeat(g[..., None], 3, axis=-1)
        m2 = fg[:, :, s].T
        if detected:
            h = np.clip(ev[:, :, s].T, 0, 1)
            alpha = 0.6 * h[..., None]
            rgb = (1 - alpha) * rgb + alpha * _heat(h)
            edge = m2 & ~ndimage.binary_erosion(m2, border_value=0)
            rgb[edge] = (0.0, 1.0, 0.0)
        px = np.round(rgb * 255).astype(np.uint8)
        px = np.repeat(np.repeat(px, zoom, axis=0), zoom, axis=1)
        img = Image.fromarray(px, "RGB")
        draw = ImageDraw.Draw(img)
        if profile.empty[s]:
            value, label = None, "-"
        else:
            value = float(profile.values[s])
            label = f"{value:.3f}"
        w = draw.textlength(label)
        draw.text((img.width - w - 2, 1), label, fill=(255, 165, 0))
        if not detected:
            draw.text((2, img.height - 12), "no detection", fill=(255, 255, 0))
        info = PngImagePlugin.PngInfo()
        info.add_text("mean_entropy", "" if value is None else repr(value))
        info.add_text("slice", str(s))
        path = out_dir / f"{prefix}_z{s:03d}.png"
        img.save(path, pnginfo=info)
        results.append(OverlaySlice(path, s, value, label))
    return results
