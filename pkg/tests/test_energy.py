import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blindspot.energy import ClassifierHead, free_energy, head_energy, head_forward, logsumexp
from blindspot.errors import EmptyInput, ShapeError
from blindspot.linalg import null_space_of_transpose

finite = st.floats(-50, 50, allow_nan=False)


def test_logsumexp_examples():
    assert logsumexp([0.0, 0.0]) == pytest.approx(0.6931472, abs=1e-7)
    for a in (-3.5, 0.0, 7.25, 1e300):
        assert logsumexp([a]) == a
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2), abs=1e-12)
    assert math.isfinite(logsumexp([1e300, -1e300]))


def test_logsumexp_empty():
    with pytest.raises(EmptyInput):
        logsumexp([])


def test_free_energy_examples():
    assert free_energy([0.0, 0.0]) == pytest.approx(-0.6931472, abs=1e-7)
    assert free_energy([2.5]) == -2.5


def test_free_energy_matches_naive_sum():
    z = np.random.default_rng(10).standard_normal(10)
    naive = -math.log(sum(math.exp(v) for v in z))
    assert abs(free_energy(z) - naive) <= 1e-12


@settings(max_examples=100)
@given(st.lists(finite, min_size=1, max_size=12), st.floats(-100, 100))
def test_shift_covariance(z, c):
    z = np.array(z)
    assert abs(free_energy(z + c) - (free_energy(z) - c)) <= 1e-12 * max(1.0, abs(c), np.abs(z).max())


@settings(max_examples=100)
@given(st.lists(finite, min_size=1, max_size=12))
def test_energy_below_negative_max(z):
    assert free_energy(z) <= -max(z)


def test_head_forward_identity():
    eff, logits = head_forward(ClassifierHead(np.eye(2)), [3.0, -1.0])
    assert logits.tolist() == [3.0, -1.0]
    assert eff.tolist() == [3.0, -1.0]


def test_head_forward_drops_null_coordinate():
    _, logits = head_forward(ClassifierHead(np.array([[1.0, 0], [0, 1], [0, 0]])), [4.0, 5.0, 6.0])
    assert logits.tolist() == [4.0, 5.0]


def test_head_forward_with_nsr_is_composition():
    rng = np.random.default_rng(4)
    nsr, w = rng.standard_normal((4, 2)), rng.standard_normal((2, 2))
    x = rng.standard_normal(4)
    eff, logits = head_forward(ClassifierHead(w, nsr), x)
    composed = (nsr @ w).T @ x
    np.testing.assert_allclose(logits, composed, atol=1e-12)
    np.testing.assert_allclose(eff, nsr.T @ x, atol=1e-15)


def test_head_forward_batch_rows():
    rng = np.random.default_rng(1)
    head = ClassifierHead(rng.standard_normal((5, 3)))
    x = rng.standard_normal((7, 5))
    _, logits = head_forward(head, x)
    for i in range(7):
        np.testing.assert_allclose(logits[i], head_forward(head, x[i])[1], atol=1e-14)


def test_shape_errors_name_dimensions():
    head = ClassifierHead(np.eye(3)[:, :2])
    with pytest.raises(ShapeError, match="2.*3"):
        head_forward(head, [1.0, 2.0])
    with pytest.raises(ShapeError):
        ClassifierHead(np.eye(2), nsr=np.eye(2))  # NSR must reduce dimension
    with pytest.raises(ShapeError):
        ClassifierHead(np.eye(2), nsr=np.ones((4, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_null_space_invariance(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((9, 4))
    head = ClassifierHead(w)
    basis = null_space_of_transpose(w)
    x = rng.standard_normal(9)
    delta = basis.vectors @ rng.standard_normal(basis.dim) * 10
    assert abs(head_energy(head, x + delta) - head_energy(head, x)) <= 1e-9
