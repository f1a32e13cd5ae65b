"""Command-line entry point: ``segood <subcommand> ...``.

Exit codes: 0 success, 1 total failure (nothing could be evaluated or
written), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .nifti import read_nifti, write_nifti
from .phantom import PhantomSpec, gen_phantom, gen_shifted_pair
from .report import CohortConfig, ConfigError, render_overlay, run_eval_id, run_eval_ood
from .swi import DirectoryPatchScorer, WindowSpec3D, aggregate, export_patches
from .uncertainty import entropy_map
from .volume import threshold_map

log = logging.getLogger("segood")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _metric_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="cohort JSON config")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--workers", type=int, help="worker threads (default: config, then $SEGOOD_WORKERS)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    p.add_argument("--overlap", choices=("self", "iou"))
    p.add_argument("--hd95-convention", choices=("combined", "max_directed"))
    p.add_argument("--entropy-base", choices=("2", "e"))
    p.add_argument("--min-region-size", type=int)
    p.add_argument("--verbose-metrics", action="store_true", help="also report the alternate HD95 convention")
    p.add_argument("--slice-profile", action="store_true", help="add per-slice entropy to summary.json")
    p.add_argument("--render", action="store_true", help="write entropy overlays for cases with images")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segood", description="Segmentation and OOD robustness metrics for 3D CT cohorts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("eval-id", help="evaluate an in-distribution cohort with ground truth")
    _metric_flags(p)

    p = sub.add_parser("eval-ood", help="evaluate an OOD cohort against prior ID scores")
    _metric_flags(p)
    p.add_argument("--id-scores", type=Path, help="per_image.csv from an eval-id run")

    p = sub.add_parser("entropy-map", help="write the voxel entropy of a probability map")
    p.add_argument("--prob", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--base", choices=("2", "e"), default="2")

    p = sub.add_parser("swi-aggregate", help="blend stored patch predictions into a probability map")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--patches", required=True, type=Path, help="directory of patch_<x>_<y>_<z>.raw predictions")
    p.add_argument("--out", type=Path, help="output probability NIfTI")
    p.add_argument("--export", action="store_true", help="write input patches to --patches instead")
    p.add_argument("--patch", type=int, nargs=3, default=(128, 128, 128))
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--sigma-scale", type=float, default=0.125)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("phantom", help="generate a synthetic cohort and its config")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("render", help="render entropy overlays for one case")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--prob", required=True, type=Path)
    p.add_argument("--mask", type=Path, help="mask to outline (default: thresholded prob)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--slices", type=int, nargs="+")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--zoom", type=int, default=2)
    p.add_argument("--prefix", default="case")
    return parser


def _config(args) -> CohortConfig:
    cfg = CohortConfig.load(args.config)
    overrides = {
        "threshold": args.threshold,
        "tau": args.tau,
        "connectivity": args.connectivity,
        "overlap": args.overlap,
        "hd95_convention": args.hd95_convention,
        "entropy_base": None if args.entropy_base is None else (2 if args.entropy_base == "2" else "e"),
        "min_region_size": args.min_region_size,
        "verbose": args.verbose_metrics or None,
        "slice_profile": args.slice_profile or None,
        "render": args.render or None,
    }
    options = {**cfg.options, **{k: v for k, v in overrides.items() if v is not None}}
    return CohortConfig(cfg.name, cfg.role, cfg.cases, options, args.out or cfg.output_dir,
                        args.workers or cfg.workers, cfg.id_scores)


def _finish(summary: dict, out: Path) -> int:
    log.info("%s: %d/%d cases evaluated -> %s", summary["cohort"], summary["n_succeeded"],
             summary["n_cases"], out)
    return 0 if summary["n_succeeded"] > 0 else 1


def cmd_eval_id(args) -> int:
    cfg = _config(args)
    return _finish(run_eval_id(cfg), cfg.output_dir)


def cmd_eval_ood(args) -> int:
    cfg = _config(args)
    return _finish(run_eval_ood(cfg, args.id_scores), cfg.output_dir)


def cmd_entropy_map(args) -> int:
    prob = read_nifti(args.prob, unit="probability")
    write_nifti(entropy_map(prob, 2.0 if args.base == "2" else math.e), args.out)
    return 0


def cmd_swi(args) -> int:
    w = WindowSpec3D(tuple(args.patch), args.overlap, args.sigma_scale)
    image = read_nifti(args.image)
    if args.export:
        origins = export_patches(image, args.patches, w)
        log.info("wrote %d patches to %s", len(origins), args.patches)
        return 0
    if args.out is None:
        raise UsageError("swi-aggregate: --out is required unless --export is given")
    prob = aggregate(image, DirectoryPatchScorer(args.patches), w, args.workers)
    write_nifti(prob, args.out)
    return 0


def _write_case(out: Path, cid: str, image, gt, prob) -> dict:
    entry = {"id": cid}
    for key, vol in (("image", image), ("gt", gt), ("prob", prob)):
        if vol is None:
            continue
        name = f"{cid}_{key}.nii.gz"
        write_nifti(vol, out / name)
        entry[key] = name
    return entry


def cmd_phantom(args) -> int:
    """Spec keys: kind (spheres | shifted_cube), n_cases, role, name, options, plus generator fields."""
    try:
        spec = json.loads(args.spec.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read phantom spec {args.spec}: {exc}") from None
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    kind = spec.get("kind", "spheres")
    role = spec.get("role", "ID")
    n = int(spec.get("n_cases", 1))
    cases = []
    for i in range(n):
        cid = f"case_{i:03d}"
        if kind == "shifted_cube":
            pair = gen_shifted_pair(int(spec["side"]), int(spec["shift"]), int(spec.get("margin", 2)),
                                    spec.get("spacing", (1.0, 1.0, 1.0)))
            prob = pair.pred.with_data(
                pair.pred.data * float(spec.get("plateau", 0.9))
                + (1 - pair.pred.data) * float(spec.get("background", 0.05)),
                "probability",
            )
            gt = pair.gt if role == "ID" else None
            cases.append(_write_case(out, cid, None, gt, prob))
        elif kind == "spheres":
            ps = PhantomSpec.from_dict({**spec, "seed": int(spec.get("seed", 0)) + i})
            ph = gen_phantom(ps)
            cases.append(_write_case(out, cid, ph.image, ph.gt if role == "ID" else None, ph.prob))
        else:
            raise ConfigError(f"unknown phantom kind {kind!r}")
    cohort = {
        "name": spec.get("name", f"phantom_{kind}"),
        "role": role,
        "cases": cases,
        "options": spec.get("options", {}),
        "output_dir": "results",
    }
    (out / "cohort.json").write_text(json.dumps(cohort, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d %s cases and cohort.json to %s", n, kind, out)
    return 0


def cmd_render(args) -> int:
    image = read_nifti(args.image, unit="HU")
    prob = read_nifti(args.prob, unit="probability")
    mask = read_nifti(args.mask, unit="label") if args.mask else threshold_map(prob, args.threshold)
    results = render_overlay(image, entropy_map(prob), mask, args.slices, args.out, args.prefix, args.zoom)
    for r in results:
        log.info("slice %d: %s -> %s", r.slice_index, r.label, r.path)
    return 0


COMMANDS = {
    "eval-id": cmd_eval_id,
    "eval-ood": cmd_eval_ood,
    "entropy-map": cmd_entropy_map,
    "swi-aggregate": cmd_swi,
    "phantom": cmd_phantom,
    "render": cmd_render,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"segood: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"segood: {args.command} failed: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
