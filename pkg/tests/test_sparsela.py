import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from stdisagg.baseline import Adjacency, besag_precision
from stdisagg.errors import DimensionMismatch, NotPositiveDefinite
from stdisagg.sparsela import (
    CholFactor,
    OrderingChoice,
    SparseSym,
    factorize,
    identity,
    kron,
    quad_form,
    sample_gmrf,
    sample_gmrf_many,
    solve,
)
from stdisagg.stmodel import ar1_precision


def random_spd(n, seed, density=0.2):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=density, random_state=rng)
    return SparseSym.from_matrix(A @ A.T + n * sp.identity(n))


def test_factorize_identity():
    F = factorize(identity(3))
    assert F.logdet() == pytest.approx(0.0, abs=1e-14)
    L = F.L.toarray()
    assert np.allclose(L, np.eye(3))


def test_factorize_2x2_logdet():
    Q = SparseSym.from_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert factorize(Q).logdet() == pytest.approx(np.log(3.0), abs=1e-12)


def test_ar1_closed_form_logdet():
    # covariance determinant (1 - rho^2)^{n-1} for the unit-variance AR(1)
    Q = ar1_precision(5, 0.5, unit_marginal=True)
    assert factorize(Q).logdet() == pytest.approx(-4 * np.log(0.75), abs=1e-12)


def test_solve_identity():
    F = factorize(identity(3))
    assert np.allclose(solve(F, np.array([1.0, 2.0, 3.0])), [1, 2, 3])


def test_solve_2x2_hand_inverse():
    Q = SparseSym.from_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    x = solve(factorize(Q), np.array([1.0, 0.0]))
    assert np.allclose(x, [2 / 3, -1 / 3], atol=1e-12)


def test_solve_against_dense_oracle():
    Q = random_spd(50, seed=0)
    b = np.random.default_rng(1).standard_normal(50)
    x = solve(factorize(Q), b)
    x_dense = np.linalg.solve(Q.dense(), b)
    assert np.max(np.abs(x - x_dense)) < 1e-9


def test_solve_residual_bound():
    for seed in range(5):
        Q = random_spd(80, seed=seed)
        b = np.random.default_rng(seed + 100).standard_normal(80)
        x = solve(factorize(Q), b)
        r = np.max(np.abs(Q.matvec(x) - b)) / np.max(np.abs(b))
        assert r < 1e-8


def test_factor_reconstructs_permuted_matrix():
    Q = random_spd(40, seed=3)
    F = factorize(Q)
    L = F.L.toarray()
    p = F.permutation
    Qd = Q.dense()
    assert np.max(np.abs(L @ L.T - Qd[np.ix_(p, p)])) < 1e-10 * np.max(np.abs(Qd))


def test_factor_diag_positive():
    Q = random_spd(30, seed=4)
    F = factorize(Q)
    assert np.all(F.L.diagonal() > 0)


def test_not_positive_definite_reports_pivot():
    A = np.eye(5)
    A[3, 3] = -2.0
    with pytest.raises(NotPositiveDefinite):
        factorize(SparseSym.from_matrix(A))


def test_dimension_mismatch():
    F = factorize(identity(3))
    with pytest.raises(DimensionMismatch):
        solve(F, np.ones(4))
    with pytest.raises(DimensionMismatch):
        quad_form(identity(3), np.ones(2))


def test_sample_gmrf_identity_variance():
    F = factorize(identity(2))
    X = sample_gmrf_many(F, seeds=range(20_000))
    v = X.var(axis=1, ddof=1)
    assert np.all(np.abs(v - 1.0) < 0.03)


def test_sample_gmrf_2x2_covariance():
    Q = SparseSym.from_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    F = factorize(Q)
    n = 20_000
    X = sample_gmrf_many(F, seeds=range(n))
    C = np.cov(X)
    target = np.array([[2 / 3, -1 / 3], [-1 / 3, 2 / 3]])
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / n)
    assert np.all(np.abs(C - target) < 3 * se)


def test_sample_gmrf_4x4_covariance_three_se():
    Q = random_spd(4, seed=9, density=0.8)
    F = factorize(Q)
    n = 20_000
    X = sample_gmrf_many(F, seeds=range(n))
    C = np.cov(X)
    target = np.linalg.inv(Q.dense())
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / n)
    assert np.all(np.abs(C - target) < 3 * se)


def test_sample_gmrf_deterministic():
    Q = random_spd(10, seed=5)
    F = factorize(Q)
    x1 = sample_gmrf(F, seed=42)
    x2 = sample_gmrf(F, seed=42)
    assert np.array_equal(x1, x2)
    x3 = sample_gmrf(F, seed=43)
    assert not np.array_equal(x1, x3)


def test_quad_form_trivial_and_psd():
    assert quad_form(identity(3), np.array([1.0, 2.0, 2.0])) == pytest.approx(9.0)
    Q = random_spd(20, seed=6)
    for s in range(5):
        x = np.random.default_rng(s).standard_normal(20)
        assert quad_form(Q, x) >= 0
        assert quad_form(Q, x) == pytest.approx(float(x @ Q.dense() @ x), rel=1e-12)


def test_kron_identity_blockdiag():
    B = SparseSym.from_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    K = kron(identity(2), B).dense()
    expect = np.block(
        [[B.dense(), np.zeros((2, 2))], [np.zeros((2, 2)), B.dense()]]
    )
    assert np.array_equal(K, expect)


def test_kron_ar1_besag_dense_oracle():
    At = ar1_precision(3, 0.5)
    path4 = Adjacency(4, np.array([[0, 1], [1, 2], [2, 3]]))
    Bs = besag_precision(path4)
    K = kron(At, Bs).dense()
    assert np.array_equal(K, np.kron(At.dense(), Bs.dense()))


@settings(max_examples=15, deadline=None)
@given(
    na=st.integers(min_value=2, max_value=20),
    nb=st.integers(min_value=2, max_value=20),
    seed=st.integers(min_value=0, max_value=1000),
)
def test_kron_logdet_identity(na, nb, seed):
    A = random_spd(na, seed=seed, density=0.5)
    B = random_spd(nb, seed=seed + 1, density=0.5)
    lhs = factorize(kron(A, B)).logdet()
    rhs = nb * factorize(A).logdet() + na * factorize(B).logdet()
    assert lhs == pytest.approx(rhs, abs=1e-8)


def test_single_triangle_storage_symmetry():
    rng = np.random.default_rng(7)
    M = rng.standard_normal((6, 6))
    Q = SparseSym.from_matrix(M @ M.T + 6 * np.eye(6))
    full = Q.full().toarray()
    assert np.array_equal(full, full.T)  # exact: one stored triangle
    assert Q.lower.nnz == np.count_nonzero(np.tril(full))


def test_natural_ordering_backend():
    Q = random_spd(30, seed=8)
    F_amd = factorize(Q, OrderingChoice.AMD)
    F_nat = factorize(Q, OrderingChoice.NATURAL)
    b = np.random.default_rng(0).standard_normal(30)
    assert np.allclose(F_amd.solve(b), F_nat.solve(b), atol=1e-9)
    assert F_nat.logdet() == pytest.approx(F_amd.logdet(), abs=1e-9)
    assert np.array_equal(F_nat.permutation, np.arange(30))
    with pytest.raises(NotPositiveDefinite):
        A = np.eye(4)
        A[2, 2] = -1.0
        CholFactor(SparseSym.from_matrix(A), OrderingChoice.NATURAL)
