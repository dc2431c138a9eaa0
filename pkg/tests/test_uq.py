import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import legendre as npleg

from kec import uq

U11 = uq.UncertaintyLaw.uniform(-1.0, 1.0)


def test_constant_basis():
    b = uq.build_basis(U11, 0)
    assert np.all(b.psi == 1.0)
    np.testing.assert_allclose(b.gram(), [[1.0]], atol=1e-15)


def test_first_legendre_mode_is_sqrt3_z():
    b = uq.build_basis(U11, 1)
    np.testing.assert_allclose(b.psi[1], np.sqrt(3.0) * b.nodes, rtol=1e-14)
    np.testing.assert_allclose(b.weights @ b.psi[1] ** 2, 1.0, rtol=1e-14)


def test_order5_gram_uses_12_nodes():
    b = uq.build_basis(U11, 5)
    assert b.n_quad == 12
    np.testing.assert_allclose(b.gram(), np.eye(6), atol=1e-12)


def test_basis_matches_numpy_legendre():
    # oracle: numpy's classical Legendre series, normalized by sqrt(2h+1)
    b = uq.build_basis(uq.UncertaintyLaw.uniform(0.0, 1.0), 6)
    xi = 2.0 * b.nodes - 1.0
    for h in range(7):
        c = np.zeros(h + 1)
        c[h] = 1.0
        np.testing.assert_allclose(b.psi[h], np.sqrt(2 * h + 1) * npleg.legval(xi, c), atol=1e-12)


def test_quad_order_raises_node_count():
    b = uq.build_basis(uq.UncertaintyLaw.uniform(-1, 1, quad_order=30), 3)
    assert b.n_quad == 30
    np.testing.assert_allclose(b.gram(), np.eye(4), atol=1e-12)


def test_bernoulli_two_point_rule():
    law = uq.UncertaintyLaw.bernoulli(0.3)
    b = uq.build_basis(law, 1)
    np.testing.assert_array_equal(b.deltas, [-1.0, 1.0])
    np.testing.assert_allclose(b.weights, [0.3, 0.7])
    np.testing.assert_allclose(b.gram(), np.eye(2), atol=1e-14)


@pytest.mark.parametrize("bad", [
    lambda: uq.build_basis(uq.UncertaintyLaw.bernoulli(0.5), 2),
    lambda: uq.UncertaintyLaw.uniform(1.0, 1.0),
    lambda: uq.UncertaintyLaw.uniform(-2.0, 0.0),
    lambda: uq.UncertaintyLaw.bernoulli(1.5),
    lambda: uq.build_basis(U11, -1),
])
def test_invalid_laws_and_orders(bad):
    with pytest.raises(ValueError):
        bad()


def test_project_constant_and_linear():
    b = uq.build_basis(U11, 1)
    np.testing.assert_allclose(uq.project(np.full(b.n_quad, 2.5), b), [2.5, 0.0], atol=1e-15)
    np.testing.assert_allclose(uq.project(b.nodes, b), [0.0, 1.0 / np.sqrt(3.0)], atol=1e-15)


def test_project_length_mismatch():
    b = uq.build_basis(U11, 2)
    with pytest.raises(ValueError):
        uq.project(np.zeros(b.n_quad + 1), b)


def test_cubic_reconstruction_off_nodes():
    b = uq.build_basis(U11, 5)
    z = np.random.default_rng(1).uniform(-1, 1, 20)
    g = uq.project(b.nodes**3, b)
    np.testing.assert_allclose(uq.reconstruct(g, b, z), z**3, atol=1e-12)


def test_expectation_and_variance():
    assert uq.expectation_and_variance([3.0, 0.0, 0.0]) == (3.0, 0.0)
    assert uq.expectation_and_variance([0.0, 1.0]) == (0.0, 1.0)
    b = uq.build_basis(U11, 3)
    mean, var = uq.expectation_and_variance(uq.project(b.nodes, b))
    assert abs(mean) < 1e-15
    np.testing.assert_allclose(var, 1.0 / 3.0, rtol=1e-13)


def test_bernoulli_expectation_is_two_point_sum():
    law = uq.UncertaintyLaw.bernoulli(0.25)
    b = uq.build_basis(law, 1)
    g = lambda d: np.exp(d) + d**2
    mean, _ = uq.expectation_and_variance(uq.project(g(b.deltas), b))
    assert mean == pytest.approx(0.25 * g(-1.0) + 0.75 * g(1.0), rel=1e-15)


def test_degenerate_bernoulli_order_zero():
    b = uq.build_basis(uq.UncertaintyLaw.bernoulli(1.0), 0)
    assert b.weights.tolist() == [1.0, 0.0]


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-1.0, 0.9), width=st.floats(0.05, 1.0), M=st.integers(0, 10))
def test_gram_is_identity(a, width, M):
    b = min(a + width, 1.0)
    basis = uq.build_basis(uq.UncertaintyLaw.uniform(a, b), M)
    np.testing.assert_allclose(basis.gram(), np.eye(M + 1), atol=1e-12)
    assert basis.weights.sum() == pytest.approx(1.0, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(coeffs=st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_parseval_and_roundtrip(coeffs):
    c = np.array(coeffs)
    M = c.size - 1
    basis = uq.build_basis(U11, M)
    g = uq.reconstruct(c, basis)
    np.testing.assert_allclose(uq.project(g, basis), c, atol=1e-10)
    np.testing.assert_allclose(np.sum(c**2), basis.weights @ g**2, rtol=1e-10, atol=1e-10)
