import numpy as np
import pytest

from ssr.evaluation import (
    ConfusionAccumulator,
    accumulate,
    cam_to_pseudo_label,
    metrics,
)


def test_pseudo_label_single_class_full_activation():
    cam = np.ones((1, 4, 4))
    out = cam_to_pseudo_label(cam, [2], bg_thresh=0.45)
    assert (out == 3).all()  # class index 2 -> mask value 3


def test_pseudo_label_all_zero_is_background():
    out = cam_to_pseudo_label(np.zeros((2, 3, 3)), [0, 1], bg_thresh=0.45)
    assert (out == 0).all()


def test_pseudo_label_argmax_with_threshold():
    cam = np.zeros((2, 1, 1))
    cam[0] = 0.8
    cam[1] = 0.3
    out = cam_to_pseudo_label(cam, [0, 1], bg_thresh=0.4)
    assert out[0, 0] == 1
    out = cam_to_pseudo_label(cam, [0, 1], bg_thresh=0.9)
    assert out[0, 0] == 0


def test_pseudo_label_validation():
    with pytest.raises(ValueError, match="empty"):
        cam_to_pseudo_label(np.ones((0, 2, 2)), [])
    with pytest.raises(ValueError, match="must be"):
        cam_to_pseudo_label(np.ones((2, 2, 2)), [0])


def test_accumulate_diagonal_and_ignore():
    acc = ConfusionAccumulator(2)
    pred = np.array([[0, 1], [2, 0]])
    accumulate(acc, pred, pred)
    assert np.trace(acc.matrix) == 4
    assert acc.matrix.sum() == 4
    before = acc.matrix.copy()
    accumulate(acc, pred, np.full_like(pred, 255))
    assert np.array_equal(acc.matrix, before)


def test_accumulate_hand_case():
    acc = ConfusionAccumulator(2)
    accumulate(acc, np.array([2, 1]), np.array([1, 1]))
    assert acc.matrix[1, 2] == 1
    assert acc.matrix[1, 1] == 1


def test_accumulate_validation():
    acc = ConfusionAccumulator(2)
    with pytest.raises(ValueError, match="shape"):
        accumulate(acc, np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="outside"):
        accumulate(acc, np.array([5]), np.array([0]))


def test_accumulate_merge_associative():
    rng = np.random.default_rng(0)
    preds = [rng.integers(0, 4, (6, 6)) for _ in range(3)]
    gts = [rng.integers(0, 4, (6, 6)) for _ in range(3)]
    whole = ConfusionAccumulator(3)
    for p, g in zip(preds, gts):
        accumulate(whole, p, g)
    parts = []
    for p, g in zip(preds, gts):
        a = ConfusionAccumulator(3)
        accumulate(a, p, g)
        parts.append(a)
    merged = parts[0].merge(parts[1]).merge(parts[2])
    assert np.array_equal(merged.matrix, whole.matrix)


def test_metrics_perfect_prediction():
    acc = ConfusionAccumulator(2)
    gt = np.array([[0, 1], [2, 1]])
    accumulate(acc, gt, gt)
    rep = metrics(acc)
    assert rep.miou == 1.0
    assert rep.precision == 1.0
    assert rep.recall == 1.0
    assert rep.confusion_ratio == 0.0


def test_metrics_everything_background():
    acc = ConfusionAccumulator(1)
    gt = np.array([0, 0, 1, 1])
    accumulate(acc, np.zeros(4, dtype=int), gt)
    rep = metrics(acc)
    assert rep.per_class_iou[1] == 0.0
    assert rep.recall == pytest.approx(0.5)  # bg recall 1, fg recall 0
    assert rep.confusion_ratio == 0.0  # misses went to background, not another class


def test_metrics_hand_case_miou_two_thirds():
    acc = ConfusionAccumulator(2)
    accumulate(acc, np.array([0, 1, 2, 2]), np.array([0, 1, 1, 2]))
    rep = metrics(acc)
    np.testing.assert_allclose(rep.per_class_iou, [1.0, 0.5, 0.5])
    assert rep.miou == pytest.approx(2 / 3)
    # one of two foreground gt pixels of class 1 predicted as class 2
    assert rep.confusion_ratio == pytest.approx(1 / 3)


def test_metrics_ignore_absent_classes():
    acc = ConfusionAccumulator(3)  # class 3 never appears
    accumulate(acc, np.array([0, 1]), np.array([0, 1]))
    rep = metrics(acc)
    assert np.isnan(rep.per_class_iou[2]) and np.isnan(rep.per_class_iou[3])
    assert rep.miou == 1.0


def test_metrics_pixel_order_invariant():
    rng = np.random.default_rng(1)
    pred = rng.integers(0, 3, 50)
    gt = rng.integers(0, 3, 50)
    a1 = ConfusionAccumulator(2)
    accumulate(a1, pred, gt)
    perm = rng.permutation(50)
    a2 = ConfusionAccumulator(2)
    accumulate(a2, pred[perm], gt[perm])
    r1, r2 = metrics(a1), metrics(a2)
    assert r1.miou == r2.miou
    assert r1.confusion_ratio == r2.confusion_ratio


def test_metrics_requires_pixels():
    with pytest.raises(ValueError, match="no pixels"):
        metrics(ConfusionAccumulator(2))
