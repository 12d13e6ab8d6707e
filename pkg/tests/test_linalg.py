import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmcr2.errors import NoConvergence, NotPositiveDefinite
from dmcr2.linalg import gram, logdet_and_solve, logdet_psd, singular_values, sym_eig

from conftest import random_spd


def test_logdet_of_zero_with_unit_shift_is_zero():
    assert logdet_psd(np.zeros((2, 2)), 1.0) == 0.0


def test_logdet_identity_shifted():
    assert logdet_psd(np.eye(2), 1.0) == pytest.approx(2 * np.log(2), abs=1e-15)


def test_logdet_matches_jacobi_eigenvalue_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        M = random_spd(rng, 5)
        oracle = float(np.sum(np.log(sym_eig(np.eye(5) + M).values)))
        assert logdet_psd(M, 1.0) == pytest.approx(oracle, abs=1e-10)


def test_logdet_rejects_singular():
    with pytest.raises(NotPositiveDefinite):
        logdet_psd(np.zeros((3, 3)))
    with pytest.raises(NotPositiveDefinite):
        logdet_psd(-np.eye(2), 0.5)


def test_logdet_and_solve_agrees_with_dense_solve():
    rng = np.random.default_rng(1)
    M = random_spd(rng, 6)
    B = rng.standard_normal((6, 4))
    ld, X = logdet_and_solve(M, 1.0, B)
    assert ld == pytest.approx(logdet_psd(M, 1.0), abs=1e-13)
    np.testing.assert_allclose((np.eye(6) + M) @ X, B, atol=1e-12)


def test_sym_eig_diagonal_input():
    spec = sym_eig(np.diag([3.0, 1.0]))
    np.testing.assert_array_equal(spec.values, [3.0, 1.0])
    np.testing.assert_allclose(np.abs(spec.vectors), np.eye(2))


def test_sym_eig_two_by_two_characteristic_polynomial():
    # (2 - x)^2 - 1 = 0 gives 3 and 1
    np.testing.assert_allclose(sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]])).values, [3.0, 1.0], atol=1e-14)


def test_sym_eig_reconstruction_and_orthonormality():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((8, 8))
    M = A + A.T
    spec = sym_eig(M)
    V = spec.vectors
    assert np.linalg.norm(V @ np.diag(spec.values) @ V.T - M) < 1e-8
    np.testing.assert_allclose(V.T @ V, np.eye(8), atol=1e-12)
    assert np.all(np.diff(spec.values) <= 0)


def test_sym_eig_agrees_with_lapack():
    rng = np.random.default_rng(3)
    M = random_spd(rng, 12)
    np.testing.assert_allclose(sym_eig(M).values, np.linalg.eigvalsh(M)[::-1], atol=1e-10)


def test_sym_eig_nearly_degenerate_converges():
    rng = np.random.default_rng(4)
    Q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    vals = np.array([1.0] * 5 + [1.0 + 1e-13] * 3 + [0.0, 0.0])
    spec = sym_eig(Q @ np.diag(vals) @ Q.T)
    np.testing.assert_allclose(spec.values, np.sort(vals)[::-1], atol=1e-10)


def test_sym_eig_raises_when_sweeps_exhausted():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((6, 6))
    with pytest.raises(NoConvergence):
        sym_eig(A + A.T, max_sweeps=0)


def test_gram_examples():
    np.testing.assert_array_equal(gram(np.array([[1.0], [0.0]])), [[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(gram(np.eye(2), 2.0), 0.5 * np.eye(2))


def test_gram_matches_triple_loop():
    rng = np.random.default_rng(6)
    Z = rng.standard_normal((4, 10))
    naive = np.zeros((4, 4))
    for a in range(4):
        for b in range(4):
            for c in range(10):
                naive[a, b] += Z[a, c] * Z[b, c]
    np.testing.assert_allclose(gram(Z), naive, atol=1e-12)


def test_singular_values_match_lapack():
    rng = np.random.default_rng(7)
    Z = rng.standard_normal((5, 9))
    np.testing.assert_allclose(singular_values(Z), np.linalg.svd(Z, compute_uv=False), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_logdet_additive_under_scaling(d, seed, c):
    # logdet(cA) = d log c + logdet(A)
    rng = np.random.default_rng(seed)
    A = np.eye(d) + random_spd(rng, d)
    assert logdet_psd(c * A) == pytest.approx(d * np.log(c) + logdet_psd(A), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_sym_eig_trace_preserved(d, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d))
    M = A + A.T
    assert np.sum(sym_eig(M).values) == pytest.approx(np.trace(M), abs=1e-10)
