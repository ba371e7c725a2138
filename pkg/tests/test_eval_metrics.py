import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap11_oracle, confusion_oracle, f1_of

from bevroad.errors import DegenerateInputError, ShapeError
from bevroad.eval_metrics import (
    HALF_THRESHOLD,
    ConfusionCounts,
    aggregate,
    average_precision,
    binary_iou,
    binary_iou_from_counts,
    confusion_at_threshold,
    evaluate_scene,
    format_table,
    max_f1,
    pr_curve,
    report_from_curve,
)
from bevroad.kitti_io import GtMaskPair


def random_pair(seed, size=32):
    rng = np.random.default_rng(seed)
    road = rng.random((size, size)) < 0.4
    valid = rng.random((size, size)) < 0.9
    # informative but noisy confidences
    conf = np.clip(0.35 * road + rng.random((size, size)) * 0.65, 0, 1)
    return conf, GtMaskPair(road & valid, valid)


def half_road(size=8):
    road = np.zeros((size, size), bool)
    road[:, : size // 2] = True
    return GtMaskPair(road, np.ones_like(road))


def test_perfect_prediction():
    gt = half_road()
    conf = gt.road.astype(float)
    c = confusion_at_threshold(conf, gt, 128)
    assert c.fp == c.fn == 0
    curve = pr_curve(conf, gt)
    assert max_f1(curve)[0] == 1.0
    assert average_precision(curve) == 1.0
    assert binary_iou(conf, gt) == (1.0, 1.0, 1.0)
    rep = report_from_curve(curve)
    assert rep.max_f1 == rep.ap == rep.binary_iou_mean == 1.0


def test_threshold_zero_is_all_positive():
    conf, gt = random_pair(0)
    c = confusion_at_threshold(conf, gt, 0)
    assert c.fn == 0 and c.tn == 0
    assert c.total == gt.valid.sum()


def test_constant_one_on_half_road():
    gt = half_road()
    curve = pr_curve(np.ones(gt.shape), gt)
    np.testing.assert_allclose(curve.precision, 0.5)
    np.testing.assert_allclose(curve.recall, 1.0)
    np.testing.assert_allclose(curve.f1, 2 / 3)
    f1, t = max_f1(curve)
    assert f1 == pytest.approx(2 / 3) and t == 0
    assert average_precision(curve) == pytest.approx(0.5)


def test_no_road_is_degenerate():
    gt = GtMaskPair(np.zeros((4, 4), bool), np.ones((4, 4), bool))
    with pytest.raises(DegenerateInputError):
        max_f1(pr_curve(np.zeros((4, 4)), gt))


def test_iou_counts_and_f1_identity():
    road, bg, mean = binary_iou_from_counts(ConfusionCounts(tp=3, fp=1, tn=5, fn=1))
    assert road == pytest.approx(0.6)
    f1 = f1_of(3, 1, 1)
    assert f1 == 0.75
    assert road == pytest.approx(f1 / (2 - f1), abs=1e-12)
    assert bg == pytest.approx(5 / 7)
    assert mean == pytest.approx((0.6 + 5 / 7) / 2)


def test_empty_union_counts_as_one():
    assert binary_iou_from_counts(ConfusionCounts(0, 0, 4, 0)) == (1.0, 1.0, 1.0)
    assert binary_iou_from_counts(ConfusionCounts(4, 0, 0, 0)) == (1.0, 1.0, 1.0)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        binary_iou(np.zeros((3, 3)), half_road(4))


@pytest.mark.parametrize("seed", range(5))
def test_oracle_equivalence(seed):
    conf, gt = random_pair(seed)
    curve = pr_curve(conf, gt)
    for t in range(256):
        expected = confusion_oracle(conf, gt.road, gt.valid, t)
        assert tuple(int(v[t]) for v in (curve.tp, curve.fp, curve.tn, curve.fn)) == expected
    scan = []
    for t in range(256):
        tp, fp, _, fn = confusion_oracle(conf, gt.road, gt.valid, t)
        scan.append(f1_of(tp, fp, fn))
    best = max(scan)
    f1, t = max_f1(curve)
    assert f1 == best and t == scan.index(best)
    assert average_precision(curve) == pytest.approx(ap11_oracle(conf, gt.road, gt.valid), abs=1e-15)
    tp, fp, tn, fn = confusion_oracle(conf, gt.road, gt.valid, 128)
    road, bg = tp / (tp + fp + fn), tn / (tn + fp + fn)
    assert binary_iou(conf, gt) == (road, bg, (road + bg) / 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_curve_invariants(seed):
    conf, gt = random_pair(seed, size=12)
    if not gt.road.any():
        return
    curve = pr_curve(conf, gt)
    pos = curve.tp + curve.fp
    assert np.all(np.diff(pos) <= 0)
    assert np.all(curve.tp + curve.fp + curve.tn + curve.fn == gt.valid.sum())
    for arr in (curve.precision, curve.recall):
        assert np.all((arr >= 0) & (arr <= 1))
    rep = report_from_curve(curve)
    assert rep.fnr == pytest.approx(1 - rep.recall)
    assert 0 <= rep.fpr <= 1
    assert rep.max_f1 >= curve.f1[HALF_THRESHOLD]
    c = curve.counts(HALF_THRESHOLD)
    f1 = f1_of(c.tp, c.fp, c.fn)
    assert rep.iou_road == pytest.approx(f1 / (2 - f1), abs=1e-12)
    # flip invariance
    flipped = report_from_curve(pr_curve(conf[:, ::-1], gt.fliplr()))
    assert flipped == rep


def test_interpolated_precision_non_increasing():
    conf, gt = random_pair(3)
    curve = pr_curve(conf, gt)
    interp = [curve.precision[curve.recall >= r].max() for r in np.linspace(0, 1, 11) if (curve.recall >= r).any()]
    assert all(a >= b for a, b in zip(interp, interp[1:]))


def test_aggregate_pools_counts():
    # scene 1: one TP pixel; scene 2: one FP pixel
    gt1 = GtMaskPair(np.array([[True]]), np.array([[True]]))
    gt2 = GtMaskPair(np.array([[False, True]]), np.array([[True, True]]))
    c1 = pr_curve(np.array([[1.0]]), gt1)
    c2 = pr_curve(np.array([[1.0, 0.0]]), gt2)
    pooled = c1 + c2
    assert pooled.precision[255] == 0.5
    # with three false positives pooling and averaging disagree
    gt3 = GtMaskPair(np.array([[False, False, False, True]]), np.ones((1, 4), bool))
    c3 = pr_curve(np.array([[1.0, 1.0, 1.0, 0.0]]), gt3)
    assert (c1 + c3).precision[255] == 0.25
    assert (c1.precision[255] + c3.precision[255]) / 2 == 0.5
    reports = aggregate({"um_1": c1, "uu_2": c2}, {"um_1": "UM", "uu_2": "UU"}, "category")
    assert list(reports) == ["UM", "UU", "URBAN"]
    assert reports["URBAN"] == report_from_curve(pooled)
    assert list(aggregate({"um_1": c1}, None, "overall")) == ["URBAN"]


def test_aggregate_single_scene_and_union():
    conf, gt = random_pair(1)
    curve = pr_curve(conf, gt)
    assert aggregate({"a": curve})["URBAN"] == evaluate_scene(conf, gt)
    curves = {f"s{i}": pr_curve(*random_pair(i)) for i in range(4)}
    cats = {"s0": "UM", "s1": "UMM", "s2": "UU", "s3": "UM"}
    reps = aggregate(curves, cats, "category")
    union = curves["s0"] + curves["s1"] + curves["s2"] + curves["s3"]
    assert reps["URBAN"] == report_from_curve(union)
    with pytest.raises(DegenerateInputError):
        aggregate({})


def test_report_outputs():
    gt = half_road()
    rep = evaluate_scene(gt.road.astype(float), gt)
    kv = dict(line.split("=") for line in rep.to_keyvalue().splitlines())
    assert set(kv) == {"maxf", "ap", "pre", "rec", "fpr", "fnr", "iou_road", "iou_bg", "biou", "threshold"}
    assert float(kv["maxf"]) == 1.0
    table = format_table({"UM": rep, "URBAN": rep})
    assert "UM_ROAD" in table and "URBAN_ROAD" in table and "BinaryIoU" in table
