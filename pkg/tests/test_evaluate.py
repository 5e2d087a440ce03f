import numpy as np
import pytest
from hypothesis import given, strategies as st

from octa.errors import DegenerateInputError, ValidationError
from octa.evaluate import (
    SegMetrics,
    confusion,
    format_table,
    pr_area,
    pr_curve,
    roc_auc,
    roc_curve,
    seg_metrics,
    summarize,
    wilcoxon_signed_rank,
)
from oracles import brute_auc, brute_counts, brute_wilcoxon


def test_counts_example():
    m = SegMetrics(tp=2, fp=1, fn=1, tn=6)
    assert m.dice == pytest.approx(4 / 6)
    assert m.precision == pytest.approx(2 / 3)
    assert m.recall == pytest.approx(2 / 3)
    assert m.specificity == pytest.approx(6 / 7)
    assert m.accuracy == pytest.approx(0.8)


def test_perfect_and_disjoint():
    gt = np.zeros((8, 8), bool)
    gt[2:4, 2:4] = True
    roi = np.ones_like(gt)
    m = seg_metrics(gt, gt, roi)
    assert all(getattr(m, k) == 1.0 for k in ("dice", "precision", "recall", "specificity", "accuracy"))
    pred = np.zeros_like(gt)
    pred[6:, 6:] = True
    m = seg_metrics(pred, gt, roi)
    assert m.dice == 0 and m.recall == 0


def test_roi_restricts_counts():
    pred = np.ones((4, 4), bool)
    gt = np.zeros((4, 4), bool)
    roi = np.zeros((4, 4), bool)
    roi[0, :2] = True
    m = seg_metrics(pred, gt, roi)
    assert (m.tp, m.fp, m.fn, m.tn) == (0, 2, 0, 0)


def test_empty_roi_raises():
    z = np.zeros((3, 3), bool)
    with pytest.raises(DegenerateInputError):
        seg_metrics(z, z, z)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metric_bounds_and_dice_identity(tp, fp, fn, tn):
    if tp + fp + fn + tn == 0:
        return
    m = SegMetrics(tp, fp, fn, tn)
    for k in ("dice", "precision", "recall", "specificity", "accuracy"):
        assert 0.0 <= getattr(m, k) <= 1.0
    assert m.dice <= min(2 * m.precision, 2 * m.recall) + 1e-12
    if 2 * tp + fp + fn:
        assert m.dice == pytest.approx(2 * tp / (2 * tp + fp + fn))


def test_seg_metrics_matches_counting_oracle(rng):
    for _ in range(100):
        shape = tuple(rng.integers(2, 12, 2))
        pred, gt, roi = (rng.random(shape) < p for p in rng.random(3))
        if not roi.any():
            continue
        m = seg_metrics(pred, gt, roi)
        assert (m.tp, m.fp, m.fn, m.tn) == brute_counts(pred, gt, roi)


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert roc_auc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5


def test_auc_one_class_raises():
    with pytest.raises(DegenerateInputError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_counting(rng):
    for _ in range(100):
        n = int(rng.integers(2, 51))
        scores = rng.integers(0, 10, n) / 10  # coarse grid forces ties
        labels = rng.random(n) < 0.5
        if labels.all() or not labels.any():
            continue
        assert roc_auc(scores, labels) == brute_auc(scores, labels)


def test_roc_curve_endpoints():
    fpr, tpr, _ = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert fpr[0] == 0 and tpr[0] == 0 and fpr[-1] == 1 and tpr[-1] == 1
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_wilcoxon_all_positive_n8():
    a = np.arange(1, 9, dtype=float)
    assert wilcoxon_signed_rank(a, np.zeros(8)) == 2 / 2 ** 8


def test_wilcoxon_degenerate_and_small():
    with pytest.raises(DegenerateInputError):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValidationError):
        wilcoxon_signed_rank([1, 2, 3], [0, 0, 0])


def test_wilcoxon_matches_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(6, 13))
        a = rng.integers(0, 6, n).astype(float)  # small integer range forces ties and zeros
        b = rng.integers(0, 6, n).astype(float)
        d = a - b
        if np.count_nonzero(d) < 6:
            continue
        assert wilcoxon_signed_rank(a, b) == brute_wilcoxon(a, b)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=6, max_size=40),
       st.lists(st.floats(-5, 5, allow_nan=False), min_size=6, max_size=40))
def test_wilcoxon_antisymmetric(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    if np.count_nonzero(a - b) < 6:
        return
    p = wilcoxon_signed_rank(a, b)
    assert p == pytest.approx(wilcoxon_signed_rank(b, a), abs=1e-12)
    assert 0 < p <= 1


def test_wilcoxon_normal_branch_close_to_scipy(rng):
    from scipy.stats import wilcoxon

    a = rng.normal(size=40)
    b = a + rng.normal(0.3, 1, size=40)
    ref = wilcoxon(a, b, correction=True, method="approx").pvalue
    assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, rel=1e-9)


def test_confusion_hand_tally():
    labels = ["h", "h", "e", "e", "l", "l", "l"]
    preds = ["h", "e", "e", "e", "l", "h", "l"]
    cm = confusion(preds, labels, classes=["h", "e", "l"])
    assert cm.counts.tolist() == [[1, 1, 0], [0, 2, 0], [1, 0, 2]]
    assert cm.accuracy == pytest.approx(5 / 7)
    assert cm.accuracy == np.trace(cm.counts) / cm.counts.sum()


def test_confusion_perfect_and_unknown():
    cm = confusion(["a", "b", "b"], ["a", "b", "b"])
    assert np.array_equal(cm.counts, np.diag(np.diag(cm.counts)))
    with pytest.raises(ValidationError):
        confusion(["x"], ["a"], classes=["a", "b"])


def test_pr_curve_points_and_area():
    m1, m2 = SegMetrics(5, 1, 5, 10), SegMetrics(8, 6, 2, 5)
    curve = pr_curve([(0.5, m2), (0.1, m1)])
    assert curve == [(0.1, m1.recall, m1.precision), (0.5, m2.recall, m2.precision)]
    single = pr_curve([(0.1, m1), (0.1, m1)])
    assert len({(r, p) for _, r, p in single}) == 1
    assert pr_area(curve) == pytest.approx((m2.recall - m1.recall) * (m1.precision + m2.precision) / 2)


def test_summary_and_table():
    s = summarize([SegMetrics(2, 1, 1, 6), SegMetrics(1, 0, 0, 9)])
    assert s["dice"]["mean"] == pytest.approx((4 / 6 + 1) / 2)
    text = format_table([("DDAE", 0.1, s)])
    assert "DDAE (0.1)" in text and "Dice" in text
