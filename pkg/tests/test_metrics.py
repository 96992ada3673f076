import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multibreath.errors import ShapeError, ValidationError
from multibreath.metrics import (confusion, confusion_from_classes, format_metrics, icbhi_metrics,
                                 parse_metrics)

# official test split sizes: Normal, Crackle, Wheeze, Crackle&Wheeze
TEST_ROWS = (1579, 649, 385, 143)


def matrix_with(correct_normal, correct_abnormal, rows=TEST_ROWS):
    """4x4 matrix with the given diagonal totals; misses go to column Normal / Crackle."""
    cm = np.zeros((4, 4), dtype=np.int64)
    cm[0, 0] = correct_normal
    cm[0, 1] = rows[0] - correct_normal
    left = correct_abnormal
    for i in (1, 2, 3):
        take = min(left, rows[i])
        cm[i, i] = take
        cm[i, 0] = rows[i] - take
        left -= take
    assert left == 0
    return cm


class TestConfusion:
    def test_perfect_is_diagonal(self):
        y = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [1, 1]])
        cm = confusion(y, y)
        assert np.array_equal(cm, np.diag([1, 1, 1, 2]))

    def test_both_predicted_crackle(self):
        cm = confusion([[1, 1]], [[1, 0]])
        assert cm[3, 1] == 1 and cm.sum() == 1

    def test_hand_counted(self):
        true = [[0, 0], [0, 0], [1, 0], [0, 1], [1, 1], [1, 0]]
        pred = [[0, 0], [1, 0], [1, 0], [0, 0], [1, 1], [1, 1]]
        expected = np.array([[1, 1, 0, 0],
                             [0, 1, 0, 1],
                             [1, 0, 0, 0],
                             [0, 0, 0, 1]])
        np.testing.assert_array_equal(confusion(true, pred), expected)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            confusion([[0, 0]], [[0, 0], [1, 1]])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60), st.randoms())
    def test_order_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = confusion_from_classes(*zip(*pairs))
        b = confusion_from_classes(*zip(*shuffled))
        np.testing.assert_array_equal(a, b)
        assert a.sum() == len(pairs)


class TestIcbhi:
    def test_se_hand_count(self):
        cm = np.zeros((4, 4), int)
        cm[0, 0] = 3
        cm[1] = [0, 1, 1, 0]
        cm[2] = [0, 0, 1, 0]
        cm[3] = [1, 0, 0, 0]
        r = icbhi_metrics(cm)
        assert r.se == 0.5 and r.sp == 1.0 and r.score == 0.75

    def test_published_pair_cnn14(self):
        cm = matrix_with(round(0.7809 * 1579), round(0.42 * 1177))
        r = icbhi_metrics(cm)
        assert r.sp == pytest.approx(0.7809, abs=5e-4) and r.se == pytest.approx(0.42, abs=5e-4)
        assert r.score == pytest.approx(0.6005, abs=5e-4)
        assert round(r.score, 1) == 0.6

    def test_published_pair_multihead(self):
        cm = matrix_with(round(0.73 * 1579), round(0.4537 * 1177))
        r = icbhi_metrics(cm)
        assert r.score == pytest.approx(0.5919, abs=5e-4)
        assert round(r.score, 3) == 0.592

    def test_score_formula_on_rates(self):
        assert (0.7809 + 0.42) / 2 == pytest.approx(0.60045, abs=1e-12)
        assert (0.73 + 0.4537) / 2 == pytest.approx(0.59185, abs=1e-12)
        assert round((0.6846 + 0.424) / 2, 4) == 0.5543

    def test_all_normal_baseline(self):
        cm = np.zeros((4, 4), int)
        cm[:, 0] = TEST_ROWS
        r = icbhi_metrics(cm)
        assert (r.sp, r.se, r.score) == (1.0, 0.0, 0.5)

    def test_binary_sensitivity_separate(self):
        cm = np.zeros((4, 4), int)
        cm[0, 0] = 2
        cm[1, 2] = 4  # crackle called wheeze: abnormal, but the wrong class
        r = icbhi_metrics(cm)
        assert r.se == 0.0 and r.binary_se == 1.0 and r.score == 0.5

    def test_missing_side_is_nan(self):
        cm = np.zeros((4, 4), int)
        cm[0, 0] = 5
        r = icbhi_metrics(cm)
        assert r.sp == 1.0 and math.isnan(r.se) and math.isnan(r.score)

    def test_invalid_matrices(self):
        with pytest.raises(ValidationError):
            icbhi_metrics(np.zeros((4, 4), int))
        with pytest.raises(ValidationError):
            icbhi_metrics(np.zeros((3, 3), int) + 1)
        with pytest.raises(ValidationError):
            icbhi_metrics(-np.eye(4, dtype=int))

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=16, max_size=16))
    def test_bounds_and_identities(self, flat):
        cm = np.array(flat).reshape(4, 4)
        rows = cm.sum(1)
        if rows[0] == 0 or rows[1:].sum() == 0:
            return
        r = icbhi_metrics(cm)
        assert 0 <= r.sp <= 1 and 0 <= r.se <= 1 and 0 <= r.score <= 1
        assert r.score == (r.sp + r.se) / 2
        wrong_abnormal = rows[1:].sum() - np.trace(cm[1:, 1:])
        assert r.se == pytest.approx(1 - wrong_abnormal / rows[1:].sum(), abs=1e-12)


def test_document_roundtrip():
    cm = matrix_with(1200, 500)
    r = icbhi_metrics(cm)
    text = format_metrics(r)
    assert "score = " in text and "specificity = " in text
    back = parse_metrics(text)
    assert back["score"] == round(r.score, 4)
    assert back["confusion.normal.crackle"] == 1579 - 1200
    assert back["total"] == sum(TEST_ROWS)
    assert all(len(line.split(" = ")) == 2 for line in text.strip().splitlines())
