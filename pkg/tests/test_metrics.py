import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lesioncascade.metrics import (
    ConfusionCounts,
    cls_metrics,
    confusion,
    mean_ignoring_nan,
    roc_auc,
    seg_metrics,
)


def mann_whitney_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_confusion_examples():
    m = np.random.default_rng(0).random((6, 6)) < 0.5
    c = confusion(m, m)
    assert c.fp == 0 and c.fn == 0 and c.total == 36
    c = confusion(np.ones((4, 4), bool), np.zeros((4, 4), bool))
    assert (c.tp, c.fp, c.fn, c.tn) == (0, 16, 0, 0)
    with pytest.raises(ValueError):
        confusion(np.ones((2, 2)), np.ones((2, 3)))


def test_confusion_matches_pixel_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p, g = rng.random((8, 8)) < 0.5, rng.random((8, 8)) < 0.5
        counts = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
        for a, b in zip(p.ravel(), g.ravel()):
            key = ("t" if a == b else "f") + ("p" if a else "n")
            counts[key] += 1
        assert confusion(p, g) == ConfusionCounts(**counts)


def test_seg_metric_examples():
    m = np.zeros((5, 5), bool)
    m[1:3, 1:4] = True
    assert seg_metrics(confusion(m, m)) == {"JA": 1.0, "DI": 1.0, "AC_s": 1.0, "GM": 1.0}
    r = seg_metrics(ConfusionCounts(tp=2, fp=1, fn=1, tn=12))
    assert r["JA"] == pytest.approx(0.5)
    assert r["DI"] == pytest.approx(2 / 3)
    assert r["AC_s"] == pytest.approx(0.875)
    assert r["GM"] == pytest.approx((2 / 3 + 12 / 13) / 2)
    assert r["GM"] == pytest.approx(0.7949, abs=1e-4)
    empty = seg_metrics(confusion(np.zeros((4, 4)), np.zeros((4, 4))))
    assert empty["JA"] == 1.0 and empty["DI"] == 1.0 and empty["GM"] == 1.0


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metric_ranges_and_ja_le_di(tp, fp, fn, tn):
    if tp + fp + fn + tn == 0:
        return
    r = seg_metrics(ConfusionCounts(tp, fp, fn, tn))
    for v in r.values():
        assert math.isnan(v) or 0 <= v <= 1
    assert r["JA"] <= r["DI"]
    if r["JA"] < 1:
        assert r["JA"] < r["DI"] or r["DI"] == 0


def test_cls_metric_examples():
    assert cls_metrics([1, 0, 1], [1, 0, 1]) == {"AC_r": 1.0, "SE": 1.0, "SP": 1.0}
    r = cls_metrics([1, 0, 0, 0], [1, 1, 0, 0])
    assert r == {"AC_r": 0.75, "SE": 0.5, "SP": 1.0}
    r = cls_metrics([0, 1], [0, 0])
    assert math.isnan(r["SE"]) and r["SP"] == 0.5
    with pytest.raises(ValueError):
        cls_metrics([], [])


def test_roc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
    tied = roc_auc([0.4] * 6, [0, 1, 0, 1, 1, 0])
    assert tied.auc == 0.5
    np.testing.assert_array_equal(tied.fpr, [0, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_rank_statistic():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(4, 60))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 1)  # coarse rounding forces ties
        auc = roc_auc(scores, labels).auc
        assert auc == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-9)
        u = stats.mannwhitneyu(scores[labels == 1], scores[labels == 0]).statistic
        assert auc == pytest.approx(u / ((labels == 1).sum() * (labels == 0).sum()), abs=1e-9)


@given(st.lists(st.tuples(st.integers(0, 1000).map(lambda v: v / 1000), st.booleans()), min_size=2, max_size=40))
@settings(max_examples=100)
def test_roc_invariants(pairs):
    scores = np.array([p[0] for p in pairs])
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        return
    roc = roc_auc(scores, labels)
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert 0 <= roc.auc <= 1
    transformed = roc_auc(np.exp(3 * scores) - 7, labels).auc
    assert transformed == pytest.approx(roc.auc, abs=1e-12)


def test_roc_csv():
    text = roc_auc([0.2, 0.7], [0, 1]).to_csv().splitlines()
    assert text[0] == "# auc=1.0"
    assert text[1] == "fpr,tpr"
    assert text[2] == "0.0,0.0" and text[-1] == "1.0,1.0"


def test_mean_ignoring_nan():
    assert mean_ignoring_nan([1.0, math.nan, 3.0]) == 2.0
    assert math.isnan(mean_ignoring_nan([math.nan]))
