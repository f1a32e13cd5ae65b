import csv
import json

import numpy as np
import pytest
from PIL import Image

from oracles import auroc_pairs
from segood.cli import cli_main
from segood.nifti import write_nifti
from segood.phantom import PhantomSpec, Sphere, gen_phantom, gen_shifted_pair
from segood.report import (
    CSV_COLUMNS,
    CohortConfig,
    ConfigError,
    default_slices,
    format_median_iqr,
    read_scores,
    render_overlay,
    run_eval_id,
    run_eval_ood,
)
from segood.uncertainty import entropy_map, slice_entropy_profile
from segood.volume import BinaryMask, ImageVolume, ProbabilityMap


def _write_cohort(root, role, cases, **extra):
    """cases: list of (prob array, gt array or None); returns the config path."""
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (prob, gt) in enumerate(cases):
        cid = f"c{i:02d}"
        write_nifti(ProbabilityMap(prob), root / f"{cid}_prob.nii.gz")
        e = {"id": cid, "prob": f"{cid}_prob.nii.gz"}
        if gt is not None:
            write_nifti(BinaryMask(gt), root / f"{cid}_gt.nii.gz")
            e["gt"] = f"{cid}_gt.nii.gz"
        entries.append(e)
    cfg = {"name": root.name, "role": role, "cases": entries, "output_dir": "out", **extra}
    (root / "cohort.json").write_text(json.dumps(cfg))
    return root / "cohort.json"


def _uniform_case(msp, dims=(6, 6, 6)):
    m = np.zeros(dims, dtype=np.uint8)
    m[1:5, 1:5, 1:5] = 1
    return np.where(m, msp, 0.05), m


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_identical_pairs_cohort(tmp_path):
    ph = gen_phantom(PhantomSpec((16, 16, 16), spheres=[Sphere((8, 8, 8), 4)]))
    cfg = CohortConfig.load(_write_cohort(tmp_path / "id", "ID", [(ph.gt.data * 0.9, ph.gt.data)] * 3))
    s = run_eval_id(cfg)
    m = s["metrics"]
    assert m["dsc"]["mean"] == 1.0 and m["dsc"]["std"] == 0.0 and m["dsc"]["mean_std"] == "1.00 ± 0.00"
    assert m["f1"]["f1"] == 1.0 and m["hd95_mm"]["mean"] == 0.0
    assert m["entropy"]["mean"] == pytest.approx(0.4690, abs=1e-4)
    assert s["n_succeeded"] == 3 and s["flags"]["no_detection"] == 0


def test_shifted_pair_cohort(tmp_path):
    pair = gen_shifted_pair(4, 2)
    cases = [(pair.pred.data * 0.9, pair.gt.data)] * 4
    s = run_eval_id(CohortConfig.load(_write_cohort(tmp_path / "sh", "ID", cases)))
    assert s["metrics"]["dsc"]["mean"] == 0.5
    assert s["metrics"]["f1"]["tp"] == 4


def test_unreadable_case_isolated(tmp_path):
    ph = gen_phantom(PhantomSpec((10, 10, 10), spheres=[Sphere((5, 5, 5), 3)]))
    path = _write_cohort(tmp_path / "bad", "ID", [(ph.prob.data, ph.gt.data)] * 3)
    (tmp_path / "bad" / "c01_prob.nii.gz").write_bytes(b"not a nifti")
    s = run_eval_id(CohortConfig.load(path))
    assert s["n_failed"] == 1 and s["n_succeeded"] == 2
    assert s["failures"][0]["case_id"] == "c01"
    rows = _rows(tmp_path / "bad" / "out" / "per_image.csv")
    assert [r["status"] for r in rows] == ["ok", "failed", "ok"]
    assert rows[1]["dsc"] == "" and rows[1]["error"]
    assert s["metrics"]["dsc"]["n"] == 2


def test_undefined_metrics_flagged(tmp_path):
    gt = np.zeros((8, 8, 8), dtype=np.uint8)
    gt[2:5, 2:5, 2:5] = 1
    cases = [(np.full(gt.shape, 0.1), gt), (gt * 0.9, gt)]
    s = run_eval_id(CohortConfig.load(_write_cohort(tmp_path / "u", "ID", cases)))
    assert s["flags"] == {"dsc_undefined": 1, "hd95_undefined": 1, "no_detection": 1}
    rows = _rows(tmp_path / "u" / "out" / "per_image.csv")
    assert rows[0]["no_detection"] == "1" and rows[0]["msp"] == "1" and rows[0]["mean_entropy"] == "0"
    assert s["metrics"]["f1"]["fn"] == 1


def _id_run(tmp_path, msps):
    path = _write_cohort(tmp_path / "id", "ID", [_uniform_case(v) for v in msps])
    run_eval_id(CohortConfig.load(path))
    return tmp_path / "id" / "out" / "per_image.csv"


def test_ood_zero_predictions(tmp_path):
    scores = _id_run(tmp_path, [0.95, 0.9])
    path = _write_cohort(tmp_path / "ood", "OOD", [(np.full((6, 6, 6), 0.1), None)] * 3)
    s = run_eval_ood(CohortConfig.load(path), scores)
    occ = s["metrics"]["volume_occupancy_cc"]
    assert occ["median"] == 0.0 and occ["median_iqr"] == "0.00 [0.00, 0.00]"
    assert s["flags"]["no_detection"] == 3


def test_ood_perfect_separation(tmp_path):
    scores = _id_run(tmp_path, [0.99, 0.95, 0.97])
    path = _write_cohort(tmp_path / "ood", "OOD", [_uniform_case(v) for v in (0.7, 0.6, 0.65)])
    m = run_eval_ood(CohortConfig.load(path), scores)["metrics"]
    assert m["auroc"] == 1.0 and m["fpr_at_95tpr"] == 0.0
    assert m["auroc_percent"] == 100.0 and m["n_id_scores"] == 3


def test_ood_four_vs_four(tmp_path):
    # OOD scores 1 - msp: ID {0.1, 0.4} x2, OOD {0.3, 0.5} x2
    scores = _id_run(tmp_path, [0.9, 0.6, 0.9, 0.6])
    path = _write_cohort(tmp_path / "ood", "OOD", [_uniform_case(v) for v in (0.7, 0.5, 0.7, 0.5)])
    s = run_eval_ood(CohortConfig.load(path), scores)
    assert read_scores(scores) == [0.1, 0.4, 0.1, 0.4]
    assert s["metrics"]["auroc"] == 0.75 == auroc_pairs([0.1, 0.4] * 2, [0.3, 0.5] * 2)
    assert s["metrics"]["auroc_percent"] == 75.0
    on_disk = json.loads((tmp_path / "ood" / "out" / "summary.json").read_text())
    assert on_disk["metrics"]["auroc"] == 0.75


def test_ood_missing_scores(tmp_path):
    path = _write_cohort(tmp_path / "ood", "OOD", [_uniform_case(0.7)])
    with pytest.raises(FileNotFoundError):
        run_eval_ood(CohortConfig.load(path), tmp_path / "nope.csv")
    with pytest.raises(ConfigError):
        run_eval_ood(CohortConfig.load(path))


def test_config_validation(tmp_path):
    base = {"role": "ID", "cases": [{"id": "a", "prob": "p.nii", "gt": "g.nii"}]}
    CohortConfig.from_dict(base)
    for bad in (
        {**base, "role": "XX"},
        {**base, "cases": []},
        {**base, "cases": [{"id": "a", "prob": "p.nii"}]},
        {**base, "cases": [{"id": "a", "prob": "p.nii", "gt": "p.nii"}]},
        {**base, "options": {"tau": 2}},
        {**base, "options": {"connectivity": 8}},
        {**base, "options": {"bogus": 1}},
        {"cases": []},
    ):
        with pytest.raises(ConfigError):
            CohortConfig.from_dict(bad)


def test_schema_snapshot(tmp_path):
    ph = gen_phantom(PhantomSpec((10, 10, 10), spheres=[Sphere((5, 5, 5), 3)]))
    path = _write_cohort(tmp_path / "s", "ID", [(ph.prob.data, ph.gt.data)])
    s = run_eval_id(CohortConfig.load(path))
    header = (tmp_path / "s" / "out" / "per_image.csv").read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS) == (
        "case_id,status,error,dsc,hd95_mm,hd95_alt_mm,tp,fp,fn,mean_entropy,no_detection,"
        "msp,ood_score,predicted_volume_cc"
    )
    assert sorted(s) == ["assumptions", "cohort", "failures", "flags", "metrics", "n_cases",
                         "n_failed", "n_succeeded", "options", "role", "schema_version"]
    assert s["schema_version"] == 1
    assert sorted(s["metrics"]) == ["dsc", "entropy", "entropy_detected_only", "f1", "hd95_mm", "msp"]
    assert sorted(s["metrics"]["dsc"]) == ["mean", "mean_std", "median", "median_iqr", "n", "q1", "q3", "std"]


def test_byte_identical_across_runs_and_workers(tmp_path):
    cases = []
    for i in range(5):
        spec = PhantomSpec((14, 14, 14), spheres=[Sphere((7, 7, 7), 3 + i % 3)], seed=i, jitter=0.3)
        ph = gen_phantom(spec)
        cases.append((ph.prob.data, ph.gt.data))
    cfg = CohortConfig.load(_write_cohort(tmp_path / "d", "ID", cases))
    outs = []
    for n, workers in enumerate((1, 4, 1)):
        run_eval_id(cfg, out_dir=tmp_path / f"o{n}", workers=workers)
        outs.append([(tmp_path / f"o{n}" / f).read_bytes() for f in ("per_image.csv", "summary.json")])
    assert outs[0] == outs[1] == outs[2]


def test_render_overlay(tmp_path):
    ph = gen_phantom(PhantomSpec((20, 16, 12), spheres=[Sphere((10, 8, 6), 4)], jitter=0.2, seed=3))
    e = entropy_map(ph.prob)
    mask = BinaryMask((ph.prob.data >= 0.5).astype(np.uint8))
    res = render_overlay(ph.image, e, mask, out_dir=tmp_path, prefix="x", zoom=3)
    assert [r.slice_index for r in res] == default_slices(mask)
    prof = slice_entropy_profile(e, mask)
    for r in res:
        img = Image.open(r.path)
        assert img.size == (20 * 3, 16 * 3)  # width follows x, height follows y
        assert abs(float(r.label) - prof.values[r.slice_index]) <= 1e-3
        assert abs(float(img.text["mean_entropy"]) - prof.values[r.slice_index]) <= 1e-3
    with pytest.raises(IndexError):
        render_overlay(ph.image, e, mask, slices=[12], out_dir=tmp_path)


def test_render_empty_mask(tmp_path):
    image = ImageVolume(np.zeros((8, 8, 5)), unit="HU")
    empty = np.zeros((8, 8, 5), dtype=np.uint8)
    res = render_overlay(image, entropy_map(np.full((8, 8, 5), 0.2)), empty, out_dir=tmp_path)
    assert [r.slice_index for r in res] == [2]
    assert res[0].label == "-" and res[0].mean_entropy is None
    assert Image.open(res[0].path).text["mean_entropy"] == ""


def test_default_slices_use_centroid():
    m = np.zeros((4, 4, 20), dtype=np.uint8)
    m[:, :, 2] = 1
    m[0, 0, 3:11] = 1
    assert default_slices(m) == [2, 4, 10]


def test_format_helpers():
    assert format_median_iqr(5.671, 2.0, 9.25) == "5.67 [2.00, 9.25]"


# -- CLI ---------------------------------------------------------------------


def test_cli_usage_errors(capsys):
    assert cli_main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err
    assert cli_main(["eval-id"]) == 2
    assert cli_main(["eval-id", "--config", "x.json", "--bogus"]) == 2
    assert cli_main(["--version"]) == 0
    assert cli_main(["eval-id", "--config", "/nonexistent/cohort.json"]) == 2


def test_cli_phantom_then_eval_chain(tmp_path):
    spec = {"kind": "shifted_cube", "side": 4, "shift": 2, "n_cases": 3, "name": "cubes"}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert cli_main(["-q", "phantom", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "ph")]) == 0
    assert cli_main(["-q", "eval-id", "--config", str(tmp_path / "ph" / "cohort.json")]) == 0
    s = json.loads((tmp_path / "ph" / "results" / "summary.json").read_text())
    assert s["metrics"]["dsc"]["mean"] == 0.5 and s["n_succeeded"] == 3

    # IoU overlap flag turns the same cohort into misses
    out = tmp_path / "iou"
    assert cli_main(["-q", "eval-id", "--config", str(tmp_path / "ph" / "cohort.json"),
                     "--overlap", "iou", "--out", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["metrics"]["f1"]["tp"] == 0


def test_cli_spheres_phantom_and_ood(tmp_path):
    spec = {"kind": "spheres", "dims": [16, 16, 16], "spheres": [{"center_mm": [8, 8, 8], "radius_mm": 4}],
            "n_cases": 2, "jitter": 0.02}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert cli_main(["-q", "phantom", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "id")]) == 0
    assert cli_main(["-q", "eval-id", "--config", str(tmp_path / "id" / "cohort.json"), "--render",
                     "--slice-profile", "--verbose-metrics"]) == 0
    res = tmp_path / "id" / "results"
    assert len(list((res / "overlays").glob("*.png"))) == 6
    rows = _rows(res / "per_image.csv")
    assert float(rows[0]["dsc"]) == 1.0 and rows[0]["hd95_alt_mm"] == "0"

    ood_spec = {**spec, "role": "OOD", "spheres": [{"center_mm": [8, 8, 8], "radius_mm": 4, "plateau": 0.6}]}
    (tmp_path / "o.json").write_text(json.dumps(ood_spec))
    assert cli_main(["-q", "phantom", "--spec", str(tmp_path / "o.json"), "--out", str(tmp_path / "ood")]) == 0
    assert cli_main(["-q", "eval-ood", "--config", str(tmp_path / "ood" / "cohort.json"),
                     "--id-scores", str(res / "per_image.csv")]) == 0
    m = json.loads((tmp_path / "ood" / "results" / "summary.json").read_text())["metrics"]
    assert m["auroc"] == 1.0 and m["fpr_at_95tpr"] == 0.0


def test_cli_total_failure_exit_one(tmp_path):
    path = _write_cohort(tmp_path / "f", "ID", [_uniform_case(0.9)])
    (tmp_path / "f" / "c00_prob.nii.gz").write_bytes(b"garbage")
    assert cli_main(["-q", "eval-id", "--config", str(path)]) == 1


def test_cli_entropy_map_and_render(tmp_path):
    ph = gen_phantom(PhantomSpec((10, 10, 10), spheres=[Sphere((5, 5, 5), 3)]))
    write_nifti(ph.prob, tmp_path / "p.nii.gz")
    write_nifti(ph.image, tmp_path / "i.nii.gz")
    assert cli_main(["-q", "entropy-map", "--prob", str(tmp_path / "p.nii.gz"), "--out", str(tmp_path / "e.nii")]) == 0
    from segood.nifti import read_nifti

    e = read_nifti(tmp_path / "e.nii")
    assert e.data.max() == pytest.approx(0.4690, abs=1e-4)
    assert cli_main(["-q", "render", "--image", str(tmp_path / "i.nii.gz"), "--prob", str(tmp_path / "p.nii.gz"),
                     "--out", str(tmp_path / "png"), "--slices", "5", "--zoom", "1"]) == 0
    assert Image.open(tmp_path / "png" / "case_z005.png").size == (10, 10)


def test_cli_swi_export_and_aggregate(tmp_path):
    rng = np.random.default_rng(0)
    write_nifti(ImageVolume(rng.random((20, 12, 10)), (1, 1, 2)), tmp_path / "img.nii")
    args = ["--image", str(tmp_path / "img.nii"), "--patches", str(tmp_path / "patches"), "--patch", "8", "8", "8"]
    assert cli_main(["-q", "swi-aggregate", "--export", *args]) == 0
    n = len(list((tmp_path / "patches").glob("*.raw")))
    assert n == 4 * 2 * 2
    assert cli_main(["-q", "swi-aggregate", *args]) == 2  # --out missing
    assert cli_main(["-q", "swi-aggregate", *args, "--out", str(tmp_path / "p.nii"), "--workers", "2"]) == 0
    from segood.nifti import read_nifti

    out = read_nifti(tmp_path / "p.nii")
    assert out.unit == "probability" and out.dims == (20, 12, 10)
    assert np.allclose(out.data, read_nifti(tmp_path / "img.nii").data, atol=1e-6)
