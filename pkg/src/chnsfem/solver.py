"""Krylov solvers, block-LU preconditioning, and the Newton loop.

Matrices are scipy CSR (sorted, duplicate-free columns; see
:func:`chnsfem.fem.make_csr`).  The Krylov methods are written out
explicitly with fixed reduction order so repeated solves of identical
inputs are bitwise identical.  The preconditioner is zero-overlap
additive Schwarz: one LU factor per partition dof block.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla

__all__ = [
    "NewtonConfig",
    "KrylovConfig",
    "BlockPreconditioner",
    "SolverError",
    "BreakdownError",
    "NonConvergenceError",
    "bicgstab",
    "gmres",
    "krylov_solve",
    "block_lu_setup",
    "newton_solve",
    "fd_jacobian_check",
]

_DENSE_BLOCK_MAX = 2000


class SolverError(RuntimeError):
    pass


class BreakdownError(SolverError):
    pass


class NonConvergenceError(SolverError):
    """Iteration cap hit; carries the best iterate found."""

    def __init__(self, msg: str, best: np.ndarray, iterations: int):
        super().__init__(msg)
        self.best = best
        self.iterations = iterations


@dataclass
class NewtonConfig:
    rtol: float = 1e-6
    atol: float = 1e-5
    stol: float = 1e-5
    max_it: int = 40

    def __post_init__(self):
        if min(self.rtol, self.atol, self.stol) <= 0.0:
            raise ValueError("Newton tolerances must be positive")


@dataclass
class KrylovConfig:
    method: str = "bicgstab"        # "bicgstab" or "gmres"
    rtol: float = 1e-5
    atol: float = 1e-6
    max_it: int = 500
    restart: int = 50

    def __post_init__(self):
        if self.method not in ("bicgstab", "gmres"):
            raise ValueError(f"unknown Krylov method {self.method!r}")
        if self.restart < 1:
            raise ValueError("gmres restart must be >= 1")


# ---------------------------------------------------------------------------
# Block-LU preconditioner
# ---------------------------------------------------------------------------


@dataclass
class BlockPreconditioner:
    """Per-partition LU factors of the diagonal blocks of A."""

    cuts: np.ndarray
    factors: List = field(default_factory=list)   # (kind, data) per block

    def apply(self, r: np.ndarray) -> np.ndarray:
        z = np.empty_like(r)
        for i, (kind, data) in enumerate(self.factors):
            lo, hi = self.cuts[i], self.cuts[i + 1]
            if kind == "dense":
                z[lo:hi] = sla.lu_solve(data, r[lo:hi])
            else:
                z[lo:hi] = data.solve(r[lo:hi])
        return z

    __call__ = apply


def block_lu_setup(A: sp.csr_matrix, cuts: np.ndarray) -> BlockPreconditioner:
    """Factor the diagonal blocks defined by consecutive cut pairs.

    Blocks of dimension at most 2000 use dense LU, larger blocks sparse
    LU.  A singular block raises a factorization error naming the block.
    """
    cuts = np.asarray(cuts, dtype=np.int64)
    n = A.shape[0]
    if cuts[0] != 0 or cuts[-1] != n or np.any(np.diff(cuts) <= 0):
        raise ValueError("cuts must partition the dof range")
    M = BlockPreconditioner(cuts)
    for i in range(len(cuts) - 1):
        lo, hi = int(cuts[i]), int(cuts[i + 1])
        blk = A[lo:hi, lo:hi]
        try:
            if hi - lo <= _DENSE_BLOCK_MAX:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", sla.LinAlgWarning)
                    lu, piv = sla.lu_factor(blk.toarray())
                if not np.all(np.isfinite(lu)) or np.any(np.diag(lu) == 0.0):
                    raise ValueError
                M.factors.append(("dense", (lu, piv)))
            else:
                M.factors.append(("sparse", spla.splu(blk.tocsc())))
        except (ValueError, RuntimeError) as exc:
            raise SolverError(f"singular preconditioner block {i} "
                              f"(dofs {lo}:{hi})") from exc
    return M


def _identity(r: np.ndarray) -> np.ndarray:
    return r


# ---------------------------------------------------------------------------
# Krylov methods
# ---------------------------------------------------------------------------


def bicgstab(A, b: np.ndarray, M=None,
             cfg: Optional[KrylovConfig] = None) -> Tuple[np.ndarray, int]:
    """Right-preconditioned BiCGStab.

    Converges when the true residual satisfies
    ``norm(b - A x) <= max(rtol * norm(b), atol)``.
    """
    cfg = cfg or KrylovConfig()
    apply_M = M.apply if hasattr(M, "apply") else (M or _identity)
    b = np.asarray(b, dtype=float)
    nb = float(np.linalg.norm(b))
    tol = max(cfg.rtol * nb, cfg.atol)
    x = np.zeros_like(b)
    if nb == 0.0:
        return x, 0
    r = b.copy()
    r0 = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    for it in range(1, cfg.max_it + 1):
        rho_new = float(r0 @ r)
        if abs(rho_new) < 1e-300 or (it > 1 and abs(omega) < 1e-300):
            raise BreakdownError(f"bicgstab breakdown at iteration {it} "
                                 f"(rho={rho_new:.3e}, omega={omega:.3e})")
        beta = (rho_new / rho) * (alpha / omega) if it > 1 else 0.0
        rho = rho_new
        p = r + beta * (p - omega * v)
        ph = apply_M(p)
        v = A @ ph
        denom = float(r0 @ v)
        if abs(denom) < 1e-300:
            raise BreakdownError(f"bicgstab breakdown at iteration {it} "
                                 "(r0.v = 0)")
        alpha = rho / denom
        s = r - alpha * v
        x = x + alpha * ph
        if float(np.linalg.norm(b - A @ x)) <= tol:
            return x, it
        sh = apply_M(s)
        t = A @ sh
        tt = float(t @ t)
        if tt == 0.0:
            raise BreakdownError(f"bicgstab breakdown at iteration {it} "
                                 "(t = 0)")
        omega = float(t @ s) / tt
        x = x + omega * sh
        r = s - omega * t
        if float(np.linalg.norm(b - A @ x)) <= tol:
            return x, it
    raise NonConvergenceError(
        f"bicgstab: no convergence in {cfg.max_it} iterations "
        f"(residual {np.linalg.norm(b - A @ x):.3e}, target {tol:.3e})",
        x, cfg.max_it)


def gmres(A, b: np.ndarray, M=None,
          cfg: Optional[KrylovConfig] = None) -> Tuple[np.ndarray, int]:
    """Right-preconditioned restarted GMRES with Givens rotations."""
    cfg = cfg or KrylovConfig(method="gmres")
    apply_M = M.apply if hasattr(M, "apply") else (M or _identity)
    b = np.asarray(b, dtype=float)
    nb = float(np.linalg.norm(b))
    tol = max(cfg.rtol * nb, cfg.atol)
    x = np.zeros_like(b)
    if nb == 0.0:
        return x, 0
    m = cfg.restart
    total = 0
    while total < cfg.max_it:
        r = b - A @ x
        beta = float(np.linalg.norm(r))
        if beta <= tol:
            return x, total
        V = np.zeros((m + 1, len(b)))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        for j in range(m):
            if total >= cfg.max_it:
                break
            w = A @ apply_M(V[j])
            for i in range(j + 1):
                H[i, j] = float(V[i] @ w)
                w = w - H[i, j] * V[i]
            H[j + 1, j] = float(np.linalg.norm(w))
            if H[j + 1, j] > 1e-300:
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                h0 = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = h0
            d = np.hypot(H[j, j], H[j + 1, j])
            if d == 0.0:
                raise BreakdownError(f"gmres breakdown at iteration "
                                     f"{total + 1}")
            cs[j], sn[j] = H[j, j] / d, H[j + 1, j] / d
            H[j, j] = d
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            k = j + 1
            if abs(g[k]) <= tol:
                break
        y = sla.solve_triangular(H[:k, :k], g[:k], lower=False)
        x = x + apply_M(V[:k].T @ y)
        if float(np.linalg.norm(b - A @ x)) <= tol:
            return x, total
    raise NonConvergenceError(
        f"gmres: no convergence in {cfg.max_it} iterations "
        f"(residual {np.linalg.norm(b - A @ x):.3e}, target {tol:.3e})",
        x, cfg.max_it)


def krylov_solve(A, b, M=None, cfg: Optional[KrylovConfig] = None):
    cfg = cfg or KrylovConfig()
    fn = bicgstab if cfg.method == "bicgstab" else gmres
    return fn(A, b, M, cfg)


# ---------------------------------------------------------------------------
# Newton
# ---------------------------------------------------------------------------


def newton_solve(residual_fn: Callable, jacobian_fn: Callable,
                 U0: np.ndarray, cfg: Optional[NewtonConfig] = None,
                 krylov_cfg: Optional[KrylovConfig] = None,
                 preconditioner_fn: Optional[Callable] = None,
                 cuts: Optional[np.ndarray] = None):
    """Newton iteration J dU = -F with Krylov inner solves.

    Stops when either ``norm(F) <= max(rtol * norm(F(U0)), atol)`` or the
    last update satisfied ``norm(dU) <= stol``.  Returns
    ``(U, newton_iters, linear_iters_per_step)``.

    The preconditioner comes from ``preconditioner_fn(A)`` if given, else
    from :func:`block_lu_setup` with ``cuts``, else the first Jacobian of
    the solve is factored once and reused.
    """
    cfg = cfg or NewtonConfig()
    krylov_cfg = krylov_cfg or KrylovConfig()
    U = np.asarray(U0, dtype=float).copy()
    F = residual_fn(U)
    f0 = float(np.linalg.norm(F))
    ftol = max(cfg.rtol * f0, cfg.atol)
    lin_iters: List[int] = []
    if f0 <= ftol:
        return U, 0, lin_iters
    M = None
    for it in range(1, cfg.max_it + 1):
        A = jacobian_fn(U)
        if preconditioner_fn is not None:
            M = preconditioner_fn(A)
        elif M is None:
            M = block_lu_setup(A, cuts if cuts is not None
                               else np.array([0, A.shape[0]]))
        dU, k = krylov_solve(A, -F, M, krylov_cfg)
        lin_iters.append(k)
        U = U + dU
        F = residual_fn(U)
        fn = float(np.linalg.norm(F))
        if fn <= ftol or float(np.linalg.norm(dU)) <= cfg.stol:
            return U, it, lin_iters
    raise NonConvergenceError(
        f"newton: no convergence in {cfg.max_it} iterations "
        f"(|F| {fn:.3e}, target {ftol:.3e}, last |dU| "
        f"{np.linalg.norm(dU):.3e})", U, cfg.max_it)


def fd_jacobian_check(residual_fn: Callable, J, U: np.ndarray,
                      n_directions: int = 5, eps: float = 1e-6,
                      seed: int = 0) -> float:
    """Worst relative mismatch of J.w vs central differences of F.

    Directions are random unit vectors from a seeded generator, so the
    check is deterministic.
    """
    rng = np.random.default_rng(seed)
    U = np.asarray(U, dtype=float)
    worst = 0.0
    for _ in range(n_directions):
        w = rng.standard_normal(len(U))
        w /= np.linalg.norm(w)
        fd = (residual_fn(U + eps * w) - residual_fn(U - eps * w)) / (2 * eps)
        jw = J @ w
        denom = max(float(np.linalg.norm(jw)), 1e-300)
        worst = max(worst, float(np.linalg.norm(fd - jw)) / denom)
    return worst
