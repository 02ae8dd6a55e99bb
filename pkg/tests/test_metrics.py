import numpy as np
import pytest

from incseg.annotations import IGNORE_VALUE
from incseg.labels import LabelSpace
from incseg.metrics import aggregate_runs, iou_per_class, mean_iou_imagewise
from incseg.model import InputContractError


SPACE = LabelSpace.from_names(["background", "road", "building"])


def iou_oracle(pred, gt, n_classes):
    out = {}
    valid = gt != IGNORE_VALUE
    for c in range(n_classes):
        inter = union = 0
        for r in range(pred.shape[0]):
            for col in range(pred.shape[1]):
                if not valid[r, col]:
                    continue
                p, g = pred[r, col] == c, gt[r, col] == c
                inter += p and g
                union += p or g
        out[c] = None if union == 0 else inter / union
    return out


def test_perfect_prediction():
    gt = np.random.default_rng(0).integers(0, 3, (16, 16))
    ious = iou_per_class(gt, gt, SPACE)
    assert all(v == 1.0 for v in ious.values() if v is not None)


def test_disjoint_masks():
    pred = np.full((8, 8), 1)
    gt = np.full((8, 8), 2)
    ious = iou_per_class(pred, gt, SPACE)
    assert ious[1] == 0.0 and ious[2] == 0.0
    assert ious[0] is None


def test_matches_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        pred = rng.integers(0, 3, (8, 8))
        gt = rng.integers(0, 3, (8, 8))
        gt[rng.random((8, 8)) < 0.1] = IGNORE_VALUE
        assert iou_per_class(pred, gt, SPACE) == iou_oracle(pred, gt, 3)


def test_symmetry_and_bounds():
    rng = np.random.default_rng(2)
    pred = rng.integers(0, 3, (8, 8))
    gt = rng.integers(0, 3, (8, 8))
    a = iou_per_class(pred, gt, SPACE)
    b = iou_per_class(gt, pred, SPACE)
    assert a == b
    assert all(0.0 <= v <= 1.0 for v in a.values() if v is not None)


def test_shape_mismatch():
    with pytest.raises(InputContractError):
        iou_per_class(np.zeros((4, 4)), np.zeros((4, 5)), SPACE)


def test_mean_single_image():
    ious = {0: 0.5, 1: 0.7, 2: None}
    assert mean_iou_imagewise([ious], SPACE) == pytest.approx(0.6)


def test_mean_two_images():
    a = {0: 0.6, 1: None, 2: None}
    b = {0: 0.8, 1: None, 2: None}
    assert mean_iou_imagewise([a, b], SPACE) == pytest.approx(0.7)


def test_mean_empty_raises():
    with pytest.raises(InputContractError):
        mean_iou_imagewise([], SPACE)


def test_order_invariance():
    rng = np.random.default_rng(3)
    results = [{0: rng.random(), 1: rng.random(), 2: None} for _ in range(5)]
    assert mean_iou_imagewise(results, SPACE) == mean_iou_imagewise(results[::-1], SPACE)


def test_aggregate_three_seeds_mean_std():
    runs = [
        [{0: 0.7, 1: 0.6, 2: 0.8}],
        [{0: 0.6, 1: 0.7, 2: 0.6}],
        [{0: 0.8, 1: 0.5, 2: 0.7}],
    ]
    report = aggregate_runs(runs, SPACE)
    mious = [np.mean(list(r[0].values())) for r in runs]
    assert report.miou_mean == pytest.approx(np.mean(mious))
    assert report.miou_std == pytest.approx(np.std(mious, ddof=1))
    assert report.n_runs == 3
    table = report.to_table()
    assert "mIoU" in table and "road" in table


def test_exclude_background():
    ious = [{0: 0.0, 1: 1.0, 2: 1.0}]
    assert mean_iou_imagewise(ious, SPACE, exclude_background=True) == 1.0
