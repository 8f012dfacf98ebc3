import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latte.metrics import accuracy, auc, softmax_scores


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    won = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return won / (len(pos) * len(neg))


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 1, 0, 0], [0, 1, 2, 3]) == 0.5


def test_accuracy_permutation_invariant(rng):
    p, y = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
    perm = rng.permutation(50)
    assert accuracy(p[perm], y[perm]) == accuracy(p, y)


@pytest.mark.parametrize("p,y", [([], []), ([1, 2], [1])])
def test_accuracy_errors(p, y):
    with pytest.raises(ValueError):
        accuracy(p, y)


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


@settings(max_examples=200, deadline=None)
@given(
    data=st.lists(st.tuples(st.integers(0, 6).map(lambda v: v / 2), st.integers(0, 1)), min_size=2, max_size=30).filter(
        lambda xs: len({y for _, y in xs}) == 2
    )
)
def test_auc_matches_pair_counting(data):
    scores, labels = zip(*data)
    assert auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)


@pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0], [0, 2, 1]])
def test_auc_errors(labels):
    with pytest.raises(ValueError):
        auc(np.arange(len(labels), dtype=float), labels)


def test_softmax_rows(rng):
    p = softmax_scores(rng.standard_normal((4, 3)) * 50)
    np.testing.assert_allclose(p.sum(-1), 1.0)
    assert np.all(p >= 0)
