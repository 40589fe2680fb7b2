import numpy as np
import pytest

from meshseg.evaluation import (
    ConfusionMatrix,
    MetricsUsageError,
    accumulate,
    format_report,
    metrics,
)
from meshseg.model import DataError


def brute_force_metrics(pred, truth, c):
    # independent set-based oracle
    pred, truth = np.asarray(pred), np.asarray(truth)
    oa = float(np.mean(pred == truth))
    ious = []
    for cls in range(c):
        p = set(np.nonzero(pred == cls)[0].tolist())
        t = set(np.nonzero(truth == cls)[0].tolist())
        union = p | t
        if union:
            ious.append(len(p & t) / len(union))
        else:
            ious.append(None)
    defined = [x for x in ious if x is not None]
    return oa, ious, sum(defined) / len(defined)


def test_perfect_prediction_diagonal():
    cm = ConfusionMatrix(3)
    accumulate(cm, [0, 1, 2, 1], [0, 1, 2, 1])
    assert np.trace(cm.counts) == 4
    r = metrics(cm)
    assert r.oa == 1.0 and r.miou == 1.0
    assert np.allclose(r.per_class_iou, 1.0)


def test_single_cell_counts_position():
    cm = ConfusionMatrix(3)
    accumulate(cm, pred=[2], truth=[1])
    assert cm.counts[1][2] == 1
    assert cm.counts.sum() == 1


def test_accumulation_additive_across_meshes():
    rng = np.random.default_rng(0)
    t1, p1 = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    t2, p2 = rng.integers(0, 4, 30), rng.integers(0, 4, 30)
    cm_split = ConfusionMatrix(4)
    accumulate(cm_split, p1, t1)
    accumulate(cm_split, p2, t2)
    cm_joint = ConfusionMatrix(4)
    accumulate(cm_joint, np.concatenate([p1, p2]), np.concatenate([t1, t2]))
    assert np.array_equal(cm_split.counts, cm_joint.counts)


def test_hand_counted_example():
    cm = ConfusionMatrix(2)
    accumulate(cm, pred=[0, 1, 1, 1], truth=[0, 0, 1, 1])
    r = metrics(cm)
    assert r.oa == pytest.approx(0.75)
    assert r.per_class_iou[0] == pytest.approx(0.5)
    assert r.per_class_iou[1] == pytest.approx(2 / 3)
    assert r.miou == pytest.approx(0.5833333, abs=1e-6)


def test_all_wrong_binary():
    cm = ConfusionMatrix(2)
    accumulate(cm, pred=[1, 1, 0, 0], truth=[0, 0, 1, 1])
    r = metrics(cm)
    assert r.oa == 0.0
    assert np.allclose(r.per_class_iou, 0.0)


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    for _ in range(25):
        m = int(rng.integers(5, 400))
        c = int(rng.integers(2, 7))
        truth = rng.integers(0, c, m)
        pred = rng.integers(0, c, m)
        cm = accumulate(ConfusionMatrix(c), pred, truth)
        r = metrics(cm)
        oa, ious, miou = brute_force_metrics(pred, truth, c)
        assert r.oa == pytest.approx(oa, abs=1e-12)
        for got, want in zip(r.per_class_iou, ious):
            if want is None:
                assert np.isnan(got)
            else:
                assert got == pytest.approx(want, abs=1e-12)
        assert r.miou == pytest.approx(miou, abs=1e-12)
        assert 0.0 <= r.oa <= 1.0
        defined = r.per_class_iou[~np.isnan(r.per_class_iou)]
        assert defined.min() - 1e-12 <= r.miou <= defined.max() + 1e-12


def test_undefined_class_excluded_and_flagged():
    cm = ConfusionMatrix(3)
    accumulate(cm, pred=[0, 1], truth=[0, 1])  # class 2 absent everywhere
    r = metrics(cm)
    assert r.undefined_classes == (2,)
    assert np.isnan(r.per_class_iou[2])
    assert r.miou == pytest.approx(1.0)


def test_relabeling_invariance():
    rng = np.random.default_rng(5)
    truth = rng.integers(0, 4, 200)
    pred = rng.integers(0, 4, 200)
    perm = np.array([2, 0, 3, 1])
    r1 = metrics(accumulate(ConfusionMatrix(4), pred, truth))
    r2 = metrics(accumulate(ConfusionMatrix(4), perm[pred], perm[truth]))
    assert r1.oa == pytest.approx(r2.oa)
    assert r1.miou == pytest.approx(r2.miou)
    inv = np.argsort(perm)
    assert np.allclose(r1.per_class_iou, r2.per_class_iou[perm], equal_nan=True)
    assert np.allclose(r2.per_class_iou, r1.per_class_iou[inv], equal_nan=True)


def test_empty_matrix_rejected():
    with pytest.raises(MetricsUsageError):
        metrics(ConfusionMatrix(2))


def test_out_of_range_class_rejected():
    cm = ConfusionMatrix(2)
    with pytest.raises(DataError):
        accumulate(cm, pred=[0, 2], truth=[0, 1])


def test_report_layout():
    cm = accumulate(ConfusionMatrix(2), [0, 1, 1, 1], [0, 0, 1, 1])
    text = format_report(metrics(cm))
    lines = text.splitlines()
    assert lines[0] == "class\tname\tiou"
    assert any(line.startswith("OA\t") for line in lines)
    assert any(line.startswith("mIoU\t") for line in lines)
