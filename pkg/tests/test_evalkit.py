from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mxml.errors import ConfigError, DataError
from mxml.evalkit import (EvalReport, bootstrap_test, correctness, early_stop_metric, evaluate, is_correct,
                          recall_at_k, temporal_iou)
from mxml.retrieval import MomentPrediction


@pytest.mark.parametrize("a,b,want", [((0, 10), (0, 10), 1.0), ((0, 5), (5, 10), 0.0),
                                      ((0, 10), (5, 15), 5 / 15), ((2, 3), (0, 10), 0.1),
                                      ((0, 1), (4, 6), 0.0), ((3, 3), (3, 3), 1.0)])
def test_iou_cases(a, b, want):
    assert temporal_iou(a, b) == want
    assert temporal_iou(b, a) == want


def test_iou_rejects_reversed():
    with pytest.raises(ValueError):
        temporal_iou((5, 1), (0, 2))


@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 50), st.floats(0, 50))
def test_iou_bounds(a, b, c, d):
    v = temporal_iou((min(a, b), max(a, b)), (min(c, d), max(c, d)))
    assert 0 <= v <= 1


def test_recall_perfect_and_wrong_video():
    gt = {"a": ("v1", 0.0, 3.0), "b": ("v2", 1.5, 6.0)}
    perfect = {q: [g] for q, g in gt.items()}
    wrong = {q: [("v9", s, e)] for q, (_, s, e) in gt.items()}
    for k in (1, 5):
        for thr in (0.3, 0.5, 0.7, 1.0):
            assert recall_at_k(perfect, gt, k, thr) == 1.0
            assert recall_at_k(wrong, gt, k, thr) == 0.0


def test_recall_three_query_hand_case():
    gt = {"hit": ("v", 0.0, 10.0), "near": ("v", 0.0, 10.0), "wrong": ("v", 0.0, 10.0)}
    preds = {"hit": [("v", 0.0, 10.0)], "near": [("v", 0.0, 6.0)], "wrong": [("w", 0.0, 10.0)]}
    assert temporal_iou((0, 6), (0, 10)) == 0.6
    assert recall_at_k(preds, gt, 1, 0.7) == pytest.approx(1 / 3, abs=0)


def test_recall_k_looks_deeper():
    gt = {"q": ("v", 3.0, 6.0)}
    preds = {"q": [("x", 0, 1), ("y", 0, 1), ("v", 3.0, 6.0)]}
    assert recall_at_k(preds, gt, 2, 0.5) == 0.0
    assert recall_at_k(preds, gt, 3, 0.5) == 1.0


def test_recall_accepts_moment_predictions():
    gt = {"q": ("v", 3.0, 7.5)}
    assert is_correct([MomentPrediction("v", 2, 4, 1.0)], gt["q"], 1, 0.7)


def test_recall_errors():
    with pytest.raises(DataError):
        recall_at_k({}, {})
    with pytest.raises(DataError):
        recall_at_k({"x": []}, {"q": ("v", 0, 1)})
    with pytest.raises(DataError):
        correctness({}, {}, ["q"])


def test_missing_prediction_counts_as_miss():
    assert recall_at_k({}, {"q": ("v", 0, 1)}) == 0.0


def test_recall_matches_brute_force(rng):
    vids = ["a", "b", "c"]
    gt, preds = {}, {}
    for i in range(200):
        s = float(rng.integers(0, 20)) * 1.5
        gt[f"q{i}"] = (vids[rng.integers(3)], s, s + 1.5 * int(rng.integers(1, 6)))
        rows = []
        for _ in range(int(rng.integers(0, 6))):
            ps = float(rng.integers(0, 20)) * 1.5
            rows.append((vids[rng.integers(3)], ps, ps + 1.5 * int(rng.integers(1, 6))))
        preds[f"q{i}"] = rows

    def iou(a, b):
        grid = np.arange(0, 60, 0.75) + 0.375   # half-clip cells; every endpoint is on the grid
        ina = (grid > a[0]) & (grid < a[1])
        inb = (grid > b[0]) & (grid < b[1])
        return (ina & inb).sum() / (ina | inb).sum()

    for k in (1, 3, 5):
        for thr in (0.3, 0.5, 0.7):
            hits = sum(any(v == gt[q][0] and iou((s, e), gt[q][1:]) >= thr for v, s, e in preds[q][:k])
                       for q in gt)
            assert recall_at_k(preds, gt, k, thr) == hits / 200


def _queries():
    Q = lambda qid, lang, qt, vid, s, e: SimpleNamespace(query_id=qid, language=lang, qtype=qt,
                                                         gt_video_id=vid, start=s, end=e)
    return [Q("1", "en", "video", "v", 0, 3), Q("2", "en", "sub", "v", 3, 6), Q("3", "en", "video", "w", 0, 3),
            Q("4", "zh", "video", "v", 0, 3), Q("5", "zh", "video+sub", "v", 3, 6), Q("6", "zh", "sub", "w", 0, 3)]


def test_evaluate_breakdown():
    preds = {"1": [("v", 0, 3)], "2": [("v", 0, 3), ("v", 3, 6)], "3": [("w", 0, 1.5)],
             "4": [("v", 0, 3)], "5": [], "6": [("w", 0, 3)]}
    r = evaluate(preds, _queries(), ks=(1, 5), ious=(0.5, 0.7))
    assert r.recall("en", 1, 0.7) == 1 / 3
    assert r.recall("en", 5, 0.7) == 2 / 3
    assert r.recall("en", 1, 0.5, "video") == 1.0
    assert r.recall("en", 1, 0.7, "video") == 0.5
    assert r.recall("zh", 1, 0.7) == 2 / 3
    assert r.recall("zh", 5, 0.5, "video+sub") == 0.0
    assert r.counts["en"] == {"all": 3, "video": 2, "sub": 1}
    assert EvalReport.from_dict(r.to_dict()).cells == r.cells
    assert "R@5/0.7" in r.table()


def test_early_stop_metric():
    assert early_stop_metric(0.0379, 0.0296) == pytest.approx(0.0675, abs=1e-12)
    assert early_stop_metric(0, 0) == 0


# bootstrap -------------------------------------------------------------------------

def test_bootstrap_identical_is_null():
    a = np.random.default_rng(0).integers(0, 2, 300)
    assert bootstrap_test(a, a, B=2000, seed=1) > 0.4


def test_bootstrap_separated():
    assert bootstrap_test(np.ones(200), np.zeros(200), B=10000, seed=0) < 1e-4


def test_bootstrap_small_advantage():
    for seed in range(10):
        r = np.random.default_rng(seed)
        b = r.integers(0, 2, 1000)
        a = b.copy()
        a[r.choice(np.nonzero(b == 0)[0], 50, replace=False)] = 1
        assert bootstrap_test(a, b, B=2000, seed=seed) < 0.2


def test_bootstrap_independent_of_workers():
    r = np.random.default_rng(3)
    a, b = r.integers(0, 2, 150), r.integers(0, 2, 150)
    assert bootstrap_test(a, b, B=3500, seed=9, n_jobs=1) == bootstrap_test(a, b, B=3500, seed=9, n_jobs=4)


def test_bootstrap_two_sided_is_symmetric():
    r = np.random.default_rng(4)
    a, b = r.integers(0, 2, 120), r.integers(0, 2, 120)
    assert bootstrap_test(a, b, B=2000, seed=2, one_sided=False) == bootstrap_test(b, a, B=2000, seed=2,
                                                                                  one_sided=False)


def test_bootstrap_length_mismatch():
    with pytest.raises(ConfigError):
        bootstrap_test([1, 0], [1])
    with pytest.raises(ConfigError):
        bootstrap_test([], [])
