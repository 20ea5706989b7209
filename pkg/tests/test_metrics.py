import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import accuracy_oracle, kappa_oracle, macro_f1_oracle, random_fixture
from painattn.errors import DomainError
from painattn.metrics import (MetricsReport, accuracy, chance_agreement, cohen_kappa,
                              confusion_matrix, macro_f1)


def test_accuracy_examples():
    assert accuracy(np.diag([3, 4, 5])) == 1.0
    assert accuracy([[3, 1], [1, 3]]) == 0.75
    with pytest.raises(DomainError):
        accuracy(np.zeros((2, 2)))


def test_macro_f1_examples():
    assert macro_f1(np.diag([2, 7])) == 1.0
    # class 0: P = 3/4, R = 3/4; class 1 likewise
    assert macro_f1([[3, 1], [1, 3]]) == pytest.approx(0.75, abs=1e-15)
    # class 1 never predicted: F1(0) = 2 * 0.5 * 1 / 1.5
    cm = [[4, 0], [4, 0]]
    assert macro_f1(cm) == pytest.approx((2 * 0.5 * 1.0 / 1.5) / 2, abs=1e-15)


def test_kappa_examples():
    assert cohen_kappa(np.diag([5, 5])) == 1.0
    assert cohen_kappa([[5, 0], [5, 0]]) == 0.0
    assert cohen_kappa([[9, 0], [0, 0]]) == 1.0


def test_confusion_orientation():
    cm = confusion_matrix([0, 0, 1], [1, 0, 1], 2)
    np.testing.assert_array_equal(cm, [[1, 1], [0, 1]])
    with pytest.raises(DomainError):
        confusion_matrix([0, 3], [0, 1], 2)


@pytest.mark.parametrize("k", [2, 5])
def test_random_fixtures_match_oracles(k):
    rng = np.random.default_rng(100 + k)
    for _ in range(100):
        truth, pred = random_fixture(rng, k)
        cm = confusion_matrix(truth, pred, k)
        assert accuracy(cm) == accuracy_oracle(truth, pred)
        assert abs(macro_f1(cm) - macro_f1_oracle(truth, pred, k)) <= 1e-12
        assert abs(cohen_kappa(cm) - kappa_oracle(truth, pred, k)) <= 1e-12


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60),
       st.permutations(range(5)))
def test_permuting_classes_preserves_metrics(pairs, perm):
    truth, pred = zip(*pairs)
    cm = confusion_matrix(truth, pred, 5)
    p = np.array(perm)
    cm2 = confusion_matrix(p[list(truth)], p[list(pred)], 5)
    assert accuracy(cm2) == pytest.approx(accuracy(cm), abs=1e-15)
    assert macro_f1(cm2) == pytest.approx(macro_f1(cm), abs=1e-12)
    assert cohen_kappa(cm2) == pytest.approx(cohen_kappa(cm), abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_perfect_iff_diagonal(pairs):
    truth, pred = zip(*pairs)
    cm = confusion_matrix(truth, pred, 3)
    diagonal = not (cm - np.diag(np.diag(cm))).any()
    assert (accuracy(cm) == 1.0) == diagonal
    if diagonal and (cm.sum(axis=0) > 0).all():
        assert macro_f1(cm) == 1.0


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_kappa_identity_and_ranges(pairs):
    truth, pred = zip(*pairs)
    report = MetricsReport.from_labels(truth, pred, 2)
    p_e = chance_agreement(report.confusion)
    if p_e < 1.0:
        assert report.kappa == (report.acc - p_e) / (1.0 - p_e)
    assert 0.0 <= report.acc <= 1.0 and 0.0 <= report.mf1 <= 1.0 and -1.0 <= report.kappa <= 1.0


def test_report_text_is_fixed_point():
    text = MetricsReport.from_confusion([[3, 1], [1, 3]]).to_text()
    assert "acc 0.750000" in text
    assert "kappa 0.500000" in text
    assert "confusion 0 3 1" in text
