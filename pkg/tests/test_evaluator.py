import csv
import json
import math

import numpy as np
import pytest

from monodisp.data import CameraRig, load_manifest, random_scene, write_raster16, write_synthetic_dataset
from monodisp.errors import EmptyReportError, InvalidInputError
from monodisp.evaluator import (PROTOCOLS, MetricReport, PredictionDir, aggregate, center_crop, compute_metrics,
                                crop_mask, d1_all, disparity_to_depth, evaluate_dataset, garg_crop,
                                resize_disparity, write_report)


def loop_metrics(z, g, cap, mask, min_depth=1e-3):
    """Plain per-pixel accumulation of every statistic."""
    n = 0
    s = dict(abs_rel=0.0, sq_rel=0.0, rms=0.0, log_rms=0.0, log10=0.0, a1=0, a2=0, a3=0)
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            if g[i, j] <= 0 or (mask is not None and not mask[i, j]):
                continue
            zz = min(max(z[i, j], min_depth), cap if cap is not None else math.inf)
            gg = min(max(g[i, j], min_depth), cap if cap is not None else math.inf)
            n += 1
            s["abs_rel"] += abs(zz - gg) / gg
            s["sq_rel"] += (zz - gg) ** 2 / gg
            s["rms"] += (zz - gg) ** 2
            s["log_rms"] += (math.log(zz) - math.log(gg)) ** 2
            s["log10"] += abs(math.log10(zz) - math.log10(gg))
            r = max(zz / gg, gg / zz)
            s["a1"] += r < 1.25
            s["a2"] += r < 1.25 ** 2
            s["a3"] += r < 1.25 ** 3
    return dict(abs_rel=s["abs_rel"] / n, sq_rel=s["sq_rel"] / n, rms=math.sqrt(s["rms"] / n),
                log_rms=math.sqrt(s["log_rms"] / n), log10=s["log10"] / n,
                acc_1=s["a1"] / n, acc_2=s["a2"] / n, acc_3=s["a3"] / n)


def loop_d1(d, g, mask):
    bad = total = 0
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            if g[i, j] <= 0 or (mask is not None and not mask[i, j]):
                continue
            total += 1
            e = abs(d[i, j] - g[i, j])
            bad += e > 3 and e > 0.05 * g[i, j]
    return 100.0 * bad / total


def test_metrics_match_loop_on_random_inputs():
    rng = np.random.default_rng(0)
    for k in range(50):
        g = rng.uniform(1, 90, (16, 16))
        g[rng.random((16, 16)) < 0.2] = 0
        z = g * rng.uniform(0.6, 1.6, (16, 16))
        mask = rng.random((16, 16)) < 0.8 if k % 2 else None
        cap = (80.0, 50.0, None)[k % 3]
        got = compute_metrics(z, g, cap, mask).as_dict()
        want = loop_metrics(z, g, cap, mask)
        for name, value in want.items():
            assert got[name] == pytest.approx(value, abs=1e-9), name
        dg = rng.uniform(0, 100, (16, 16))
        dp = dg + rng.normal(0, 5, (16, 16))
        assert d1_all(dp, dg, mask) == pytest.approx(loop_d1(dp, dg, mask), abs=1e-9)


def test_metrics_closed_forms():
    g = np.full((4, 4), 2.0) ** np.arange(1, 5)[None, :]
    exact = compute_metrics(g, g)
    assert exact.abs_rel == exact.rms == exact.log10 == 0
    assert exact.acc_1 == exact.acc_2 == exact.acc_3 == 1
    double = compute_metrics(2 * g, g, cap=None)
    assert double.abs_rel == 1 and double.acc_1 == double.acc_2 == double.acc_3 == 0
    boundary = compute_metrics(1.25 * g, g, cap=None)
    assert boundary.acc_1 == 0 and boundary.acc_2 == 1 and boundary.acc_3 == 1
    assert boundary.abs_rel == 0.25


def test_metrics_clamping_is_idempotent():
    rng = np.random.default_rng(1)
    g = rng.uniform(1, 120, (8, 8))
    z = rng.uniform(0, 150, (8, 8))
    a = compute_metrics(z, g, 80.0)
    b = compute_metrics(np.clip(z, 1e-3, 80), np.clip(g, 1e-3, 80), 80.0)
    assert a == b


def test_metrics_errors():
    with pytest.raises(EmptyReportError):
        compute_metrics(np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        compute_metrics(np.ones((2, 2)), np.ones((2, 3)))


def test_d1_examples():
    assert d1_all(np.array([[96.0]]), np.array([[100.0]])) == 0.0
    assert d1_all(np.array([[15.0]]), np.array([[10.0]])) == 100.0
    g = np.random.default_rng(2).uniform(1, 50, (5, 5))
    assert d1_all(g, g) == 0.0


def test_depth_from_disparity():
    assert np.all(disparity_to_depth(np.full((2, 2), 2.0), CameraRig(1.0, 1.0)) == 0.5)
    assert float(disparity_to_depth(np.array([10.0]), CameraRig(721.0, 0.54))[0]) == pytest.approx(38.934)
    assert float(disparity_to_depth(np.array([0.0]), CameraRig(100.0, 0.5), 1e-3)[0]) == pytest.approx(50.0 / 1e-3)


def test_crops():
    assert garg_crop(375, 1242) == (153, 371, 44, 1197)
    assert garg_crop(100, 100) == (40, 99, 3, 96)
    r0, r1, c0, c1 = garg_crop(375, 1242)
    assert (r1 - r0) / 375 == pytest.approx(0.584, abs=5e-3)
    assert (c1 - c0) / 1242 == pytest.approx(0.928, abs=5e-3)
    r0, r1, c0, c1 = center_crop(2272, 1704)
    assert (r1 - r0, c0, c1) == (852, 0, 1704) and r0 == (2272 - 852) // 2
    m = crop_mask((4, 5), (1, 3, 2, 4))
    assert m.sum() == 4 and m[1, 2] and not m[0, 0]


def test_resize_keeps_pixel_meaning():
    d = np.full((4, 8), 3.0)
    up = resize_disparity(d, 8, 16)
    assert up.shape == (8, 16) and np.allclose(up, 6.0)
    assert resize_disparity(d, 4, 8) is not None and np.array_equal(resize_disparity(d, 4, 8), d)


def test_aggregate_is_mean_of_images():
    reps = [MetricReport(abs_rel=0.1, n_valid_pixels=10), MetricReport(abs_rel=0.3, n_valid_pixels=5)]
    agg = aggregate(reps)
    assert agg.abs_rel == pytest.approx(0.2) and agg.n_valid_pixels == 15 and agg.rms is None
    with pytest.raises(EmptyReportError):
        aggregate([])


@pytest.fixture()
def synthetic_set(tmp_path):
    rng = np.random.default_rng(3)
    manifest = write_synthetic_dataset(tmp_path / "data", [random_scene(rng) for _ in range(3)])
    return manifest


def gt_predictions(manifest, root, offset=0.0):
    from monodisp.data import load_sample
    for rec in manifest.records:
        s = load_sample(rec)
        write_raster16(root / rec.sequence / f"{rec.stem}.png", s.gt_disparity + offset)
    return PredictionDir(root)


def test_ground_truth_predictions_score_perfectly(synthetic_set, tmp_path):
    pred = gt_predictions(synthetic_set, tmp_path / "pred")
    res = evaluate_dataset(pred, synthetic_set, "kitti2015")
    agg = res.aggregate
    assert agg.abs_rel == 0 and agg.rms == 0 and agg.d1_all == 0
    assert agg.acc_1 == agg.acc_2 == agg.acc_3 == 1
    assert agg.abs_rel == np.mean([r.abs_rel for _, r in res.rows])


def test_uniform_offset_on_homogeneous_set(tmp_path):
    rng = np.random.default_rng(4)
    spec = random_scene(rng)
    manifest = write_synthetic_dataset(tmp_path / "data", [spec, spec, spec])
    pred = gt_predictions(manifest, tmp_path / "pred", offset=1.0)
    res = evaluate_dataset(pred, manifest, "kitti2015")
    single = res.rows[0][1]
    for name in ("abs_rel", "rms", "d1_all", "acc_1"):
        assert getattr(res.aggregate, name) == pytest.approx(getattr(single, name), abs=1e-12)


def test_protocols_and_reports(synthetic_set, tmp_path):
    pred = gt_predictions(synthetic_set, tmp_path / "pred", offset=0.5)
    for name, proto in PROTOCOLS.items():
        res = evaluate_dataset(pred, synthetic_set, name)
        d = res.aggregate.as_dict()
        present = {k for k, v in d.items() if v is not None and k != "n_valid_pixels"}
        assert present == set(proto.metrics)
    res = evaluate_dataset(pred, synthetic_set, "make3d-70")
    paths = write_report(res, tmp_path / "out", {"split": "synthetic"})
    summary = json.loads(paths["summary"].read_text())
    assert summary["protocol"] == "make3d-70" and summary["n_images"] == 3
    with open(paths["table"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and rows[0]["log_rms"] == ""
    with pytest.raises(InvalidInputError):
        evaluate_dataset(pred, synthetic_set, "eigen-90")


def test_missing_prediction_is_collected_not_raised(synthetic_set, tmp_path):
    pred = gt_predictions(synthetic_set, tmp_path / "pred")
    victim = synthetic_set.records[1]
    (tmp_path / "pred" / victim.sequence / f"{victim.stem}.png").unlink()
    res = evaluate_dataset(pred, load_manifest(synthetic_set.root, "synthetic"), "eigen-80")
    assert len(res.rows) == 2 and res.errors[0][0] == victim.name
