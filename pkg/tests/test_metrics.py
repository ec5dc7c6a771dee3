"""AUPRC against an exhaustive rational-arithmetic oracle, plus aggregates."""

from fractions import Fraction

import numpy as np
import pytest

from ehrseq.errors import MetricUndefined
from ehrseq.metrics import auprc, macro_auprc, standard_error, task_auprc


def oracle_auprc(scores, labels):
    """Average precision by exhaustive threshold sweep in exact arithmetic.

    Walks unique score values from high to low; each block of tied scores
    contributes (positives in block / total positives) * precision at the
    block's inclusion point.
    """
    pairs = sorted(zip(scores, labels), key=lambda p: -p[0])
    n_pos = sum(l for _, l in pairs)
    ap = Fraction(0)
    seen = 0
    tp = 0
    i = 0
    while i < len(pairs):
        j = i
        block_tp = 0
        while j < len(pairs) and pairs[j][0] == pairs[i][0]:
            block_tp += pairs[j][1]
            j += 1
        seen += j - i
        tp += block_tp
        ap += Fraction(block_tp, n_pos) * Fraction(tp, seen)
        i = j
    return ap


class TestAuprcOracle:
    def test_exact_on_random_instances(self):
        rng = np.random.default_rng(7)
        for trial in range(1000):
            n = int(rng.integers(2, 21))
            labels = rng.integers(0, 2, size=n)
            if labels.sum() == 0:
                labels[int(rng.integers(0, n))] = 1
            if labels.sum() == n:
                labels[int(rng.integers(0, n))] = 0
            # small integer scores force plenty of ties
            scores = rng.integers(0, 5, size=n).astype(np.float64)
            expected = oracle_auprc(scores.astype(int).tolist(), labels.tolist())
            got = auprc(scores, labels.astype(np.float64))
            assert abs(got - float(expected)) < 1e-12, (trial, scores, labels)

    def test_perfect_ranking_is_one(self):
        assert auprc(np.array([0.9, 0.8, 0.1]), np.array([1.0, 1.0, 0.0])) == 1.0

    def test_single_positive_ranked_second(self):
        # precision at the positive's rank = 1/2
        got = auprc(np.array([0.9, 0.5]), np.array([0.0, 1.0]))
        assert got == 0.5

    def test_all_scores_tied_equals_prevalence(self):
        scores = np.zeros(8)
        labels = np.array([1, 0, 0, 1, 0, 0, 0, 0], dtype=np.float64)
        assert abs(auprc(scores, labels) - 0.25) < 1e-15

    def test_worst_ranking(self):
        # positive ranked last among 4: AP = 1/4
        got = auprc(np.array([0.1, 0.5, 0.6, 0.7]), np.array([1.0, 0.0, 0.0, 0.0]))
        assert got == 0.25

    def test_undefined_without_both_classes(self):
        with pytest.raises(MetricUndefined):
            auprc(np.array([0.2, 0.3]), np.array([1.0, 1.0]))
        with pytest.raises(MetricUndefined):
            auprc(np.array([0.2, 0.3]), np.array([0.0, 0.0]))

    def test_shape_validation(self):
        with pytest.raises(MetricUndefined):
            auprc(np.zeros((2, 2)), np.zeros(4))
        with pytest.raises(MetricUndefined):
            auprc(np.zeros(3), np.zeros(4))


class TestMacroAuprc:
    def test_macro_averages_defined_classes(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.6]])
        labels = np.array([[1, 0], [0, 1], [1, 1]])
        mean, per_class, skipped = macro_auprc(scores, labels)
        a = auprc(scores[:, 0], labels[:, 0].astype(float))
        b = auprc(scores[:, 1], labels[:, 1].astype(float))
        assert mean == pytest.approx((a + b) / 2)
        assert per_class == [a, b]
        assert skipped == 0

    def test_macro_skips_single_class_columns(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.8]])
        labels = np.array([[1, 0], [0, 0]])  # second column has no positives
        mean, per_class, skipped = macro_auprc(scores, labels)
        assert skipped == 1
        assert per_class[1] is None
        assert mean == pytest.approx(auprc(scores[:, 0], labels[:, 0].astype(float)))

    def test_macro_undefined_when_all_skipped(self):
        with pytest.raises(MetricUndefined):
            macro_auprc(np.array([[0.5], [0.6]]), np.array([[1], [1]]))


class TestTaskAuprc:
    def test_binary_passthrough(self):
        probs = np.array([0.8, 0.2, 0.6])
        labels = np.array([1.0, 0.0, 1.0])
        assert task_auprc("binary", probs, labels) == auprc(probs, labels)

    def test_multiclass_one_vs_rest(self):
        probs = np.array([[0.7, 0.2, 0.1],
                          [0.1, 0.8, 0.1],
                          [0.2, 0.3, 0.5],
                          [0.6, 0.3, 0.1]])
        labels = np.array([0, 1, 2, 0], dtype=np.int64)
        expected = np.mean([auprc(probs[:, c], (labels == c).astype(float))
                            for c in range(3)])
        assert task_auprc("multiclass", probs, labels) == pytest.approx(expected)

    def test_multilabel_macro(self):
        probs = np.array([[0.9, 0.2], [0.1, 0.7], [0.8, 0.4]])
        labels = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float64)
        expected, _, _ = macro_auprc(probs, labels)
        assert task_auprc("multilabel", probs, labels) == pytest.approx(expected)


class TestStandardError:
    def test_matches_direct_formula(self):
        values = [0.51, 0.62, 0.55, 0.49, 0.58]
        direct = np.std(values, ddof=1) / np.sqrt(len(values))
        assert standard_error(values) == pytest.approx(direct)

    def test_degenerate_cases(self):
        assert standard_error([0.5]) == 0.0
        assert standard_error([]) == 0.0
