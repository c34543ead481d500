"""Krylov, preconditioner, and Newton loop tests."""

import numpy as np
import pytest
import scipy.sparse as sp

from chnsfem.solver import (
    BreakdownError, KrylovConfig, NewtonConfig, NonConvergenceError,
    SolverError, bicgstab, block_lu_setup, fd_jacobian_check, gmres,
    krylov_solve, newton_solve,
)


def spd_system(n, seed=0):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    A = sp.csr_matrix(B @ B.T + n * np.eye(n))
    b = rng.standard_normal(n)
    return A, b


# ---------------------------------------------------------------------------
# Krylov methods
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("method", [bicgstab, gmres])
def test_identity_solves_in_one_iteration(method):
    A = sp.identity(10, format="csr")
    b = np.arange(10.0)
    x, it = method(A, b, None, KrylovConfig(rtol=1e-12, atol=1e-14))
    assert np.allclose(x, b, atol=1e-12)
    assert it <= 1


@pytest.mark.parametrize("method", [bicgstab, gmres])
def test_2x2_spd(method):
    A = sp.csr_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))
    b = np.array([1.0, 2.0])
    x, _ = method(A, b, None, KrylovConfig(rtol=1e-12, atol=1e-14))
    assert np.allclose(x, [1.0 / 11.0, 7.0 / 11.0], atol=1e-12)


@pytest.mark.parametrize("method", [bicgstab, gmres])
def test_zero_rhs(method):
    A, _ = spd_system(8)
    x, it = method(A, np.zeros(8), None, KrylovConfig())
    assert np.array_equal(x, np.zeros(8))
    assert it == 0


@pytest.mark.parametrize("method", ["bicgstab", "gmres"])
def test_residual_contract(method):
    A, b = spd_system(60, seed=3)
    cfg = KrylovConfig(method=method, rtol=1e-9, atol=1e-12)
    x, _ = krylov_solve(A, b, None, cfg)
    assert np.linalg.norm(b - A @ x) <= max(
        cfg.rtol * np.linalg.norm(b), cfg.atol) * (1 + 1e-12)


def test_bicgstab_nonconvergence_carries_best():
    A, b = spd_system(40, seed=1)
    with pytest.raises(NonConvergenceError) as err:
        bicgstab(A, b, None, KrylovConfig(rtol=1e-14, atol=1e-16, max_it=2))
    assert err.value.best.shape == b.shape
    assert err.value.iterations == 2


def test_bicgstab_breakdown():
    # rho = <r0hat, r1> hits zero for this skew system from this rhs
    A = sp.csr_matrix(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    b = np.array([1.0, 0.0])
    with pytest.raises((BreakdownError, NonConvergenceError)):
        bicgstab(A, b, None, KrylovConfig(rtol=1e-14, atol=1e-16, max_it=50))


@pytest.mark.parametrize("method", ["bicgstab", "gmres"])
def test_preconditioned_matches_unpreconditioned(method):
    A, b = spd_system(50, seed=2)
    cfg = KrylovConfig(method=method, rtol=1e-10, atol=1e-13)
    M = block_lu_setup(A, np.array([0, 25, 50]))
    x0, _ = krylov_solve(A, b, None, cfg)
    x1, _ = krylov_solve(A, b, M, cfg)
    assert np.linalg.norm(x0 - x1) <= 10 * cfg.rtol * np.linalg.norm(x0)


def test_determinism():
    A, b = spd_system(30, seed=4)
    cfg = KrylovConfig(rtol=1e-10, atol=1e-13)
    x1, _ = bicgstab(A, b, None, cfg)
    x2, _ = bicgstab(A, b, None, cfg)
    assert np.array_equal(x1, x2)


def test_config_validation():
    with pytest.raises(ValueError):
        KrylovConfig(method="cg")
    with pytest.raises(ValueError):
        KrylovConfig(method="gmres", restart=0)
    with pytest.raises(ValueError):
        NewtonConfig(rtol=0.0)


# ---------------------------------------------------------------------------
# Block preconditioner
# ---------------------------------------------------------------------------


def test_single_block_is_full_inverse():
    A, b = spd_system(20, seed=5)
    M = block_lu_setup(A, np.array([0, 20]))
    x, it = bicgstab(A, b, M, KrylovConfig(rtol=1e-12, atol=1e-14))
    assert it <= 1
    assert np.allclose(A @ x, b, atol=1e-9)


def test_diagonal_blocks_are_elementwise_division():
    d = np.array([2.0, 4.0, 5.0, 8.0])
    A = sp.diags(d).tocsr()
    M = block_lu_setup(A, np.array([0, 2, 4]))
    r = np.array([2.0, 8.0, 15.0, 16.0])
    assert np.allclose(M.apply(r), r / d, atol=1e-14)


def test_two_blocks_match_dense_oracle():
    n = 9
    A = sp.diags([np.full(n - 1, -1.0), np.full(n, 4.0),
                  np.full(n - 1, -1.0)], [-1, 0, 1]).tocsr()
    cuts = np.array([0, 4, 9])
    M = block_lu_setup(A, cuts)
    D = np.zeros((n, n))
    for a, b_ in zip(cuts, cuts[1:]):
        D[a:b_, a:b_] = A[a:b_, a:b_].toarray()
    r = np.arange(1.0, n + 1.0)
    assert np.allclose(M.apply(r), np.linalg.solve(D, r), atol=1e-13)


def test_singular_block_named():
    A = sp.csr_matrix(np.array([[1.0, 0.0, 0.0],
                                [0.0, 0.0, 0.0],
                                [0.0, 0.0, 1.0]]))
    with pytest.raises(SolverError) as err:
        block_lu_setup(A, np.array([0, 1, 3]))
    assert "block 1" in str(err.value)


def test_bad_cuts_rejected():
    A = sp.identity(4, format="csr")
    with pytest.raises(ValueError):
        block_lu_setup(A, np.array([0, 2, 2, 4]))


# ---------------------------------------------------------------------------
# Newton
# ---------------------------------------------------------------------------


def test_newton_linear_in_one_iteration():
    A, b = spd_system(12, seed=6)
    resid = lambda U: A @ U - b
    jac = lambda U: A
    U, it, lins = newton_solve(resid, jac, np.zeros(12),
                               NewtonConfig(rtol=1e-10, atol=1e-12,
                                            stol=1e-14),
                               KrylovConfig(rtol=1e-13, atol=1e-15))
    assert it == 1
    assert np.allclose(A @ U, b, atol=1e-8)


def test_newton_cubic_iterates():
    # u^3 = 8 from u0 = 3: the classical quadratic contraction
    resid = lambda U: U ** 3 - 8.0
    jac = lambda U: sp.csr_matrix([[3.0 * float(U[0]) ** 2]])
    seen = []
    def recording_resid(U):
        seen.append(float(U[0]))
        return resid(U)
    U, it, _ = newton_solve(recording_resid, jac, np.array([3.0]),
                            NewtonConfig(rtol=1e-14, atol=1e-12, stol=1e-14),
                            KrylovConfig(rtol=1e-14, atol=1e-16))
    expect = [3.0]
    for _ in range(4):
        u = expect[-1]
        expect.append(u - (u ** 3 - 8.0) / (3.0 * u ** 2))
    assert np.allclose(seen[:4], expect[:4], atol=1e-9)
    assert abs(expect[1] - 2.2962962962962963) < 1e-12
    assert abs(float(U[0]) - 2.0) < 1e-10


def test_newton_zero_residual_returns_immediately():
    A, _ = spd_system(5, seed=7)
    U0 = np.ones(5)
    b = A @ U0
    U, it, lins = newton_solve(lambda U: A @ U - b, lambda U: A, U0)
    assert it == 0 and lins == []
    assert np.array_equal(U, U0)


def test_newton_nonconvergence_carries_best():
    resid = lambda U: np.array([U[0] ** 2 + 1.0, U[1]])   # no real root
    jac = lambda U: sp.csr_matrix(np.diag([2.0 * float(U[0]), 1.0]))
    with pytest.raises(NonConvergenceError) as err:
        newton_solve(resid, jac, np.array([2.0, 1.0]),
                     NewtonConfig(rtol=1e-12, atol=1e-12, stol=1e-300,
                                  max_it=5))
    assert err.value.best.shape == (2,)


def test_newton_superlinear_contraction():
    rng = np.random.default_rng(8)
    A = sp.csr_matrix(np.diag(np.linspace(1.0, 2.0, 6)))
    b = rng.standard_normal(6)
    def resid(U):
        return A @ U + 0.1 * U ** 3 - b
    def jac(U):
        return A + sp.diags(0.3 * U ** 2)
    steps = []
    U = np.zeros(6)
    for _ in range(6):
        F = resid(U)
        dU = np.asarray(sp.linalg.spsolve(jac(U).tocsc(), -F))
        steps.append(np.linalg.norm(dU))
        U = U + dU
    assert steps[4] / steps[3] < steps[1] / steps[0]


# ---------------------------------------------------------------------------
# FD Jacobian check
# ---------------------------------------------------------------------------


def test_fd_check_linear_exact():
    A, b = spd_system(15, seed=9)
    err = fd_jacobian_check(lambda U: A @ U - b, A, np.zeros(15))
    assert err <= 1e-10


def test_fd_check_quadratic_truncation():
    n = 10
    rng = np.random.default_rng(10)
    c = rng.standard_normal(n)
    resid = lambda U: 0.5 * U ** 2 + c
    U = rng.standard_normal(n)
    J = sp.diags(U).tocsr()
    assert fd_jacobian_check(resid, J, U, eps=1e-6) <= 1e-9


def test_fd_check_catches_corruption():
    A, b = spd_system(15, seed=11)
    J = A.toarray()
    J[3, 4] += 0.5
    err = fd_jacobian_check(lambda U: A @ U - b, sp.csr_matrix(J),
                            np.zeros(15))
    assert err > 1e-3
