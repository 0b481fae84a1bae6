import json

import numpy as np
import pytest

from spotfusion.metrics import (
    MetricsBundle,
    auprc_macro,
    auroc_macro,
    balanced_accuracy,
    binary_auroc,
    binary_average_precision,
    compute_metrics,
    confusion_matrix,
    mean_metric,
    midranks,
    weighted_f1,
)


def brute_force_auroc(pos, neg):
    """Pairwise comparison oracle: wins + half ties over all (pos, neg) pairs."""
    pos = np.asarray(pos, float)[:, None]
    neg = np.asarray(neg, float)[None, :]
    wins = (pos > neg).sum() + 0.5 * (pos == neg).sum()
    return wins / (pos.size * neg.size)


def test_confusion_perfect_is_diagonal():
    cm = confusion_matrix([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert np.array_equal(cm, np.diag([1, 2, 1]))


def test_confusion_hand_fixture():
    cm = confusion_matrix([0, 0, 1], [0, 1, 1], 2)
    assert np.array_equal(cm, [[1, 1], [0, 1]])


def test_confusion_empty_input():
    assert np.array_equal(confusion_matrix([], [], 2), np.zeros((2, 2)))


def test_confusion_label_out_of_range():
    with pytest.raises(ValueError, match="label"):
        confusion_matrix([0, 2], [0, 1], 2)


def test_balanced_accuracy_fixtures():
    assert balanced_accuracy(np.diag([5, 3])) == 1.0
    # recalls 1.0 and 0.5
    assert balanced_accuracy(np.asarray([[4, 0], [2, 2]])) == 0.75
    # binary, everything predicted class 0: recalls (1, 0)
    assert balanced_accuracy(np.asarray([[7, 0], [5, 0]])) == 0.5


def test_balanced_accuracy_empty_class_error():
    with pytest.raises(ValueError, match="class 1"):
        balanced_accuracy(np.asarray([[3, 0], [0, 0]]))


def test_weighted_f1_fixtures():
    assert weighted_f1(np.diag([4, 4])) == 1.0
    cm = confusion_matrix([0, 0, 1], [0, 1, 1], 2)
    assert abs(weighted_f1(cm) - 2.0 / 3.0) < 1e-12


def test_weighted_f1_zero_precision_recall_contributes_zero():
    # class 1 never predicted and never correct
    cm = np.asarray([[5, 0], [3, 0]])
    f1_0 = 2 * (5 / 8) * 1.0 / (5 / 8 + 1.0)
    assert abs(weighted_f1(cm) - (5 / 8) * f1_0) < 1e-12


def test_binary_auroc_fixtures():
    assert binary_auroc([0.9, 0.8], [0.2, 0.1]) == 1.0
    assert binary_auroc([0.5, 0.5], [0.5, 0.5]) == 0.5
    assert binary_auroc([0.9, 0.4], [0.5, 0.1]) == 0.75


def test_auroc_exactly_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(10, 201))
        n_pos = int(rng.integers(1, n))
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        pos, neg = scores[:n_pos], scores[n_pos:]
        assert binary_auroc(pos, neg) == brute_force_auroc(pos, neg)


def test_average_precision_fixtures():
    assert binary_average_precision([1, 0, 0], [0.9, 0.8, 0.1]) == 1.0
    assert binary_average_precision([0, 1], [0.9, 0.4]) == 0.5
    # all positives ranked above all negatives
    assert binary_average_precision([1, 1, 0, 0], [0.9, 0.8, 0.7, 0.1]) == 1.0


def test_average_precision_tie_breaks_by_ascending_index():
    # equal scores: the earlier index is ranked first
    ap_pos_first = binary_average_precision([1, 0], [0.5, 0.5])
    ap_pos_second = binary_average_precision([0, 1], [0.5, 0.5])
    assert ap_pos_first == 1.0
    assert ap_pos_second == 0.5


def test_average_precision_step_sum_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(3, 60))
        y = rng.integers(0, 2, n)
        if y.sum() in (0, n):
            continue
        s = np.round(rng.random(n), 1)
        order = sorted(range(n), key=lambda i: (-s[i], i))
        tp = 0
        precisions = []
        for rank, i in enumerate(order, start=1):
            if y[i]:
                tp += 1
                precisions.append(tp / rank)
        oracle = sum(precisions) / y.sum()
        assert binary_average_precision(y, s) == pytest.approx(oracle, abs=1e-12)


def test_macro_metrics_class_permutation_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n, c = 60, 3
        truth = rng.integers(0, c, n)
        prob = rng.dirichlet(np.ones(c), size=n)
        perm = rng.permutation(c)
        inv = np.argsort(perm)
        truth_p = perm[truth]
        prob_p = prob[:, inv]
        assert auroc_macro(truth, prob) == pytest.approx(auroc_macro(truth_p, prob_p), abs=1e-12)
        assert auprc_macro(truth, prob) == pytest.approx(auprc_macro(truth_p, prob_p), abs=1e-12)
        pred = prob.argmax(axis=1)
        cm = confusion_matrix(truth, pred, c)
        cm_p = confusion_matrix(truth_p, perm[pred], c)
        assert balanced_accuracy(cm) == pytest.approx(balanced_accuracy(cm_p), abs=1e-12)
        assert weighted_f1(cm) == pytest.approx(weighted_f1(cm_p), abs=1e-12)


def test_macro_metrics_warn_on_absent_class_and_error_on_single():
    truth = np.asarray([0, 0, 1, 1])
    prob = np.asarray([[0.8, 0.1, 0.1], [0.7, 0.2, 0.1],
                       [0.2, 0.7, 0.1], [0.1, 0.8, 0.1]])
    with pytest.warns(UserWarning, match="class 2 absent"):
        val = auroc_macro(truth, prob)
    assert val == 1.0
    with pytest.raises(ValueError, match="two classes"):
        auroc_macro([1, 1, 1], prob[:3])


def test_random_predictor_balanced_accuracy_near_half():
    rng = np.random.default_rng(3)
    n = 10_000
    truth = rng.integers(0, 2, n)
    pred = rng.integers(0, 2, n)
    cm = confusion_matrix(truth, pred, 2)
    assert abs(balanced_accuracy(cm) - 0.5) < 0.05


def test_all_metrics_within_unit_interval():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(4, 40))
        c = int(rng.integers(2, 5))
        truth = rng.integers(0, c, n)
        if len(set(truth.tolist())) < c:
            continue  # balanced accuracy needs every class represented
        prob = rng.dirichlet(np.ones(c), size=n)
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = compute_metrics(truth, prob.argmax(axis=1), prob)
        for v in m.to_dict().values():
            assert 0.0 <= v <= 1.0


def test_mean_metric_reproduces_reported_average():
    assert abs(mean_metric(0.801, 0.829, 0.931, 0.970) - 0.883) < 0.0005


def test_metrics_bundle_json_keys():
    m = MetricsBundle(np.zeros((2, 2)), 0.5, 0.5, 0.5, 0.5)
    payload = json.loads(m.to_json())
    assert list(sorted(payload)) == ["auprc", "auroc", "bal_acc", "mean", "w_f1"]
    assert payload["mean"] == 0.5


def test_midranks_with_ties():
    assert np.array_equal(midranks(np.asarray([3.0, 1.0, 3.0])), [2.5, 1.0, 2.5])
    assert np.array_equal(midranks(np.asarray([5.0])), [1.0])
