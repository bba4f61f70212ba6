import json
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermabench.errors import MetricsError
from dermabench.metrics import (
    REPORT_HEADER,
    BinaryCounts,
    ConfusionMatrix,
    ScoredSample,
    accuracy,
    auc_rank,
    average_ranks,
    binary_counts,
    confusion_matrix,
    full_report,
    multiclass_auc,
    one_vs_rest_auc,
    per_class_counts,
    precision,
    recall,
    stack_samples,
    threshold_counts,
)


def pair_auc(pos, neg) -> Fraction:
    """(#concordant + 1/2 #tied) / (n_p n_n), counted pair by pair."""
    total = Fraction(0)
    for p in pos:
        for n in neg:
            if p > n:
                total += 1
            elif p == n:
                total += Fraction(1, 2)
    return total / (len(pos) * len(neg))


def softmax_rows(rng, n, k=7, scale=2.0):
    z = rng.normal(0, scale, (n, k))
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


# -- AUC --------------------------------------------------------------------


def test_auc_examples():
    assert auc_rank([0.9, 0.8], [0.7, 0.1]) == 1.0
    assert auc_rank([0.8, 0.3], [0.5, 0.2]) == 0.75
    assert pair_auc([0.8, 0.3], [0.5, 0.2]) == Fraction(3, 4)
    assert auc_rank([0.4] * 3, [0.4] * 5) == 0.5


def test_auc_rank_sum_trace():
    # pooled ascending: 0.1(1) 0.7(2) 0.8(3) 0.9(4) -> S_p = 7
    ranks = average_ranks(np.array([0.9, 0.8, 0.7, 0.1]))
    assert ranks.tolist() == [4, 3, 2, 1]
    assert ranks[:2].sum() == 7


def test_average_ranks_ties():
    assert average_ranks(np.array([2.0, 1.0, 2.0, 3.0, 1.0])).tolist() == [3.5, 1.5, 3.5, 5.0, 1.5]


def test_auc_empty_side():
    with pytest.raises(MetricsError):
        auc_rank([], [0.1])
    with pytest.raises(MetricsError):
        auc_rank([0.1], [])


def _random_instance(rng):
    n_p, n_n = rng.integers(1, 51, size=2)
    if rng.random() < 0.5:
        # few distinct levels -> heavy ties
        levels = rng.random(rng.integers(1, 5))
        return rng.choice(levels, n_p), rng.choice(levels, n_n)
    return rng.random(n_p), rng.random(n_n)


def test_auc_matches_pair_oracle_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        pos, neg = _random_instance(rng)
        assert abs(auc_rank(pos, neg) - float(pair_auc(pos, neg))) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(0, 6), min_size=1, max_size=30),
    st.lists(st.integers(0, 6), min_size=1, max_size=30),
)
def test_auc_complement(pos, neg):
    pos = np.asarray(pos) / 6
    neg = np.asarray(neg) / 6
    assert abs(auc_rank(pos, neg) + auc_rank(neg, pos) - 1) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(-50, 50), min_size=1, max_size=30),
    st.lists(st.integers(-50, 50), min_size=1, max_size=30),
)
def test_auc_invariant_under_monotone_transform(pos, neg):
    # integer grid keeps the transforms strictly increasing in floating point
    pos, neg = np.asarray(pos) / 10, np.asarray(neg) / 10
    base = auc_rank(pos, neg)
    assert auc_rank(np.exp(pos), np.exp(neg)) == pytest.approx(base, abs=1e-12)
    assert auc_rank(3 * pos + 1, 3 * neg + 1) == pytest.approx(base, abs=1e-12)


def test_multiclass_auc_perfect_and_constant():
    labels = np.arange(70) % 7
    assert multiclass_auc(np.eye(7)[labels], labels) == 1.0
    assert multiclass_auc(np.full((70, 7), 1 / 7), labels) == 0.5


def test_multiclass_auc_matches_per_class_pair_oracle():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 7, 200)
    scores = softmax_rows(rng, 200)
    oracle = np.mean([float(pair_auc(scores[labels == c, c], scores[labels != c, c])) for c in range(7)])
    assert multiclass_auc(scores, labels) == pytest.approx(oracle, abs=1e-12)


def test_multiclass_auc_excludes_absent_class():
    labels = np.arange(60) % 6  # class 6 never positive
    scores = np.eye(7)[labels]
    with pytest.warns(UserWarning, match=r"\[6\]"):
        value = multiclass_auc(scores, labels)
    assert value == 1.0
    per_class, excluded = one_vs_rest_auc(scores, labels)
    assert excluded == [6] and len(per_class) == 6


# -- confusion matrix / accuracy -------------------------------------------


def test_confusion_examples():
    labels = np.arange(21) % 7
    cm = confusion_matrix(np.eye(7)[labels], labels)
    assert np.array_equal(cm.counts, np.diag(np.full(7, 3)))
    assert np.trace(cm.counts) == 21

    one = confusion_matrix(np.eye(7)[[5]], [2])
    expected = np.zeros((7, 7), int)
    expected[2, 5] = 1
    assert np.array_equal(one.counts, expected)


def test_confusion_row_sums_match_histogram():
    rng = np.random.default_rng(11)
    labels = rng.integers(0, 7, 100)
    cm = confusion_matrix(softmax_rows(rng, 100), labels)
    hist = [sum(1 for x in labels if x == c) for c in range(7)]
    assert cm.support.tolist() == hist
    assert cm.total == 100


def test_confusion_tie_break_lowest_code():
    cm = confusion_matrix(np.array([[0, 0.5, 0, 0.5, 0, 0, 0]]), [0])
    assert cm.counts[0, 1] == 1


def test_confusion_empty():
    with pytest.raises(MetricsError):
        confusion_matrix(np.zeros((0, 7)), [])


def test_accuracy_examples():
    assert accuracy(ConfusionMatrix(np.diag([5, 1, 1, 1, 1, 1, 1]))) == 1.0
    cm = np.zeros((7, 7), int)
    cm[0, 0] = 6663
    cm[1, 0] = 3337
    assert accuracy(ConfusionMatrix(cm)) == 0.6663
    off = np.ones((7, 7), int) - np.eye(7, dtype=int)
    assert accuracy(ConfusionMatrix(off)) == 0.0
    with pytest.raises(MetricsError):
        accuracy(ConfusionMatrix(np.zeros((7, 7), int)))


@settings(max_examples=50)
@given(st.lists(st.integers(0, 20), min_size=49, max_size=49))
def test_accuracy_in_unit_interval_and_one_iff_diagonal(cells):
    m = np.asarray(cells).reshape(7, 7)
    if m.sum() == 0:
        return
    acc = accuracy(ConfusionMatrix(m))
    assert 0 <= acc <= 1
    off_diag = m.sum() - np.trace(m)
    assert (acc == 1.0) == (off_diag == 0)


# -- precision / recall -----------------------------------------------------


def test_precision_recall_examples():
    assert precision(BinaryCounts(TP=3, FP=1, TN=0, FN=0)).value == 0.75
    assert recall(BinaryCounts(TP=3, FP=0, TN=0, FN=3)).value == 0.5
    p = precision(BinaryCounts(0, 0, 5, 2))
    assert p.value == 0.0 and p.undefined
    r = recall(BinaryCounts(0, 4, 5, 0))
    assert r.value == 0.0 and r.undefined
    assert not precision(BinaryCounts(3, 1, 0, 0)).undefined


def test_threshold_counts_perfect_and_uniform():
    n = 13
    labels = np.arange(n) % 7
    assert threshold_counts(np.eye(7)[labels], labels) == BinaryCounts(TP=n, FP=0, TN=6 * n, FN=0)
    assert threshold_counts(np.full((n, 7), 1 / 7), labels) == BinaryCounts(TP=0, FP=0, TN=6 * n, FN=n)


def enumerate_decisions(scores, labels, tau):
    tp = fp = tn = fn = 0
    for i in range(len(scores)):
        for c in range(7):
            positive = scores[i][c] >= tau
            actual = labels[i] == c
            if positive and actual:
                tp += 1
            elif positive:
                fp += 1
            elif actual:
                fn += 1
            else:
                tn += 1
    return BinaryCounts(tp, fp, tn, fn)


def test_threshold_counts_three_sample_enumeration():
    scores = np.array(
        [
            [0.6, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05],
            [0.2, 0.5, 0.1, 0.1, 0.05, 0.05, 0.0],
            [0.1, 0.1, 0.1, 0.1, 0.1, 0.45, 0.05],
        ]
    )
    labels = np.array([0, 2, 5])
    counts = threshold_counts(scores, labels, 0.5)
    assert counts == enumerate_decisions(scores, labels, 0.5)
    assert counts == BinaryCounts(TP=1, FP=1, TN=17, FN=2)
    assert counts.total == 21


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_threshold_counts_match_enumeration(n, seed, tau):
    rng = np.random.default_rng(seed)
    scores = softmax_rows(rng, n)
    labels = rng.integers(0, 7, n)
    assert threshold_counts(scores, labels, tau) == enumerate_decisions(scores, labels, tau)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000))
def test_half_threshold_at_most_one_positive_per_sample(n, seed):
    rng = np.random.default_rng(seed)
    scores = softmax_rows(rng, n, scale=3.0)
    labels = rng.integers(0, 7, n)
    c = threshold_counts(scores, labels, 0.5)
    assert c.TP + c.FP <= n


def test_per_class_counts_from_confusion():
    labels = np.array([0, 0, 1, 2])
    scores = np.eye(7)[[0, 1, 1, 0]]
    counts = per_class_counts(scores, labels)
    assert counts[0] == BinaryCounts(TP=1, FP=1, TN=1, FN=1)
    assert counts[1] == BinaryCounts(TP=1, FP=1, TN=2, FN=0)
    assert counts[2] == BinaryCounts(TP=0, FP=0, TN=3, FN=1)
    assert binary_counts(scores, labels, "argmax_per_class") == counts


def test_tau_must_be_open_interval():
    with pytest.raises(MetricsError):
        threshold_counts(np.eye(7)[[0]], [0], 1.0)


# -- reports ------------------------------------------------------------------


def test_perfect_report():
    labels = np.arange(35) % 7
    for mode in ("threshold_micro", "argmax_macro"):
        r = full_report(np.eye(7)[labels], labels, 0.0, mode)
        assert r.row() == (0.0, 1.0, 1.0, 1.0, 1.0)
        assert r.aggregation_mode == mode


def test_report_columns_follow_table_header():
    assert REPORT_HEADER == ("Loss", "ACC", "Precision", "AUC", "Recall")
    labels = np.arange(7)
    r = full_report(np.eye(7)[labels], labels, 0.5, "threshold_micro")
    assert r.to_csv().splitlines()[0] == "loss,acc,precision,auc,recall"


def test_both_modes():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 7, 80)
    scores = softmax_rows(rng, 80)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        both = full_report(scores, labels, 1.2, "both")
    assert set(both) == {"threshold_micro", "argmax_macro"}
    assert both["threshold_micro"].accuracy == both["argmax_macro"].accuracy
    assert both["threshold_micro"].auc == both["argmax_macro"].auc
    micro = threshold_counts(scores, labels)
    assert both["threshold_micro"].precision == precision(micro).value
    macro = np.mean([precision(c).value for c in per_class_counts(scores, labels)])
    assert both["argmax_macro"].precision == pytest.approx(macro)


def test_undefined_flags_recorded():
    labels = np.arange(14) % 7
    r = full_report(np.full((14, 7), 1 / 7), labels, np.log(7), "threshold_micro")
    assert r.precision == 0.0 and "precision" in r.undefined


def test_report_roundtrip():
    with pytest.warns(UserWarning):
        r = full_report(np.eye(7)[[0, 1, 2]], [0, 1, 1], 0.3, "argmax_macro")
    assert r.auc_excluded_classes == (2, 3, 4, 5, 6)
    d = json.loads(r.to_json())
    assert type(r).from_dict(d) == r


def test_permutation_invariance():
    rng = np.random.default_rng(9)
    labels = rng.integers(0, 7, 120)
    scores = softmax_rows(rng, 120)
    perm = rng.permutation(120)
    a = full_report(scores, labels, 1.0, "both")
    b = full_report(scores[perm], labels[perm], 1.0, "both")
    for mode in a:
        assert a[mode].row() == pytest.approx(b[mode].row(), abs=1e-12)


def test_scored_samples():
    samples = [ScoredSample(np.eye(7)[i % 7], i % 7) for i in range(14)]
    scores, labels = stack_samples(samples)
    assert scores.shape == (14, 7)
    assert multiclass_auc(scores, labels) == 1.0
    with pytest.raises(MetricsError):
        ScoredSample(np.full(7, 0.2), 0)


def test_confusion_serialisation():
    cm = confusion_matrix(np.eye(7)[[0, 3]], [0, 2])
    assert ConfusionMatrix.from_dict(cm.to_dict()).counts.tolist() == cm.counts.tolist()
    csv = cm.to_csv().splitlines()
    assert csv[0].startswith("true/predicted,actinic_keratoses_iec")
    assert csv[3] == "benign_keratosis,0,0,0,1,0,0,0"
