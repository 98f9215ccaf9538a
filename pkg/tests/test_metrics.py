"""F-score computation and its confusion-matrix/direct-count dual route."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellgraph.errors import ContractError
from cellgraph.metrics import confusion_matrix, format_report, fscores, fscores_from_confusion


def direct_count_oracle(preds, labels, num_classes):
    """Independent per-class TP/FP/FN counting with plain loops."""
    out = []
    for b in range(num_classes):
        tp = sum(1 for p, t in zip(preds, labels) if p == b and t == b)
        fp = sum(1 for p, t in zip(preds, labels) if p == b and t != b)
        fn = sum(1 for p, t in zip(preds, labels) if p != b and t == b)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        out.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return np.array(out), float(np.mean(out))


class TestFscores:
    def test_all_correct(self):
        per_class, favg = fscores([0, 1, 2, 1], [0, 1, 2, 1], 3)
        np.testing.assert_array_equal(per_class, [1.0, 1.0, 1.0])
        assert favg == 1.0

    def test_absent_class_scores_zero(self):
        per_class, favg = fscores([0, 0], [0, 0], 3)
        np.testing.assert_array_equal(per_class, [1.0, 0.0, 0.0])
        assert abs(favg - 1 / 3) <= 1e-12

    def test_hand_confusion_oracle(self):
        # truth [0,0,1,1], pred [0,1,1,1]:
        #   class 0: tp=1 fp=0 fn=1 -> P=1, R=1/2, F=2/3
        #   class 1: tp=2 fp=1 fn=0 -> P=2/3, R=1, F=4/5
        per_class, favg = fscores([0, 1, 1, 1], [0, 0, 1, 1], 2)
        np.testing.assert_allclose(per_class, [2 / 3, 0.8], atol=1e-12)
        assert abs(favg - 0.7333333333) <= 1e-9

    def test_bad_class_id_rejected(self):
        with pytest.raises(ContractError):
            fscores([0, 3], [0, 1], 3)
        with pytest.raises(ContractError):
            fscores([0, 1], [0, -1], 3)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            fscores([0, 1, 2], [0, 1], 3)

    @settings(max_examples=40, deadline=None)
    @given(
        data=st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60),
        seed=st.integers(0, 1000),
    )
    def test_matches_direct_counts_and_order_invariant(self, data, seed):
        preds = [p for p, _ in data]
        labels = [t for _, t in data]
        per_class, favg = fscores(preds, labels, 4)
        oracle_f, oracle_avg = direct_count_oracle(preds, labels, 4)
        np.testing.assert_allclose(per_class, oracle_f, atol=1e-12)
        assert abs(favg - oracle_avg) <= 1e-12
        order = np.random.default_rng(seed).permutation(len(data))
        shuffled, _ = fscores(np.array(preds)[order], np.array(labels)[order], 4)
        np.testing.assert_array_equal(per_class, shuffled)


class TestConfusionMatrix:
    def test_total_equals_input_count(self):
        cm = confusion_matrix([0, 1, 2, 2, 1], [0, 0, 2, 1, 1], 3)
        assert cm.total == 5

    def test_rows_are_true_class(self):
        cm = confusion_matrix([1, 1, 0], [0, 0, 0], 2)
        np.testing.assert_array_equal(cm.counts, [[1, 2], [0, 0]])


def test_report_formatting_is_stable():
    cm = confusion_matrix([0, 1, 1], [0, 0, 1], 2)
    per_class, favg = fscores_from_confusion(cm)
    a = format_report(per_class, favg, cm)
    b = format_report(per_class, favg, cm)
    assert a == b
    assert "F_avg" in a and "confusion_matrix" in a
