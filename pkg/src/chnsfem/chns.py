"""Cahn-Hilliard Navier-Stokes mixture model and discrete operators.

The state vector holds, per free node, the dofs
``(v_0 .. v_{d-1}, p, phi, mu)``.  One time step couples two such states
through a Crank-Nicolson discretization: tilde quantities are arithmetic
midpoints ``(U^k + U^{k+1})/2`` and time derivatives are the quotients
``(U^{k+1} - U^k)/dt``.  The weak form is residual-based variational
multiscale: coarse-scale Galerkin terms plus fine-scale closures
``rho v' = -tau_m R_m``, ``p' = -rho tau_c R_c``, ``phi' = -tau_phi
R_phi`` built from the strong residuals, plus the 1/2-weighted continuity
consistency term in momentum that the energy estimate requires.

Density and viscosity are affine in the saturated order parameter
``phi* = clamp(phi, [-1, 1])``; the double-well potential and the surface
tension term use the raw ``phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import DirichletSet, basis_set, make_csr
from .octmesh import MeshTopology

__all__ = [
    "Params",
    "StatePair",
    "QuadState",
    "TimestepBoundInputs",
    "state_ndof",
    "mixture_density",
    "mixture_viscosity",
    "saturate",
    "free_energy",
    "free_energy_prime",
    "peclet_from_cahn",
    "stabilization_taus",
    "strong_residuals",
    "chns_residual",
    "chns_jacobian",
    "total_energy",
    "timestep_bound",
    "verify_evolution_identity",
    "trilinear_b1",
    "trilinear_b2",
]


# ---------------------------------------------------------------------------
# Model parameters and closed-form coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Params:
    """Dimensionless numbers and mixture coefficients.

    ``rho_ratio`` and ``nu_ratio`` are the plus-to-minus phase ratios;
    the plus phase is the normalization, so ``rho(+1) = 1``.  Density is
    ``alpha phi* + beta`` and viscosity ``gamma phi* + xi``.
    """

    Re: float
    We: float
    Cn: float
    Pe: float
    Fr: float = 1.0
    rho_ratio: float = 1.0
    nu_ratio: float = 1.0
    mobility: float = 1.0
    C_I: float = 6.0
    C_phi: float = 6.0
    gravity_dir: Tuple[float, ...] = (0.0, -1.0)
    gravity: bool = True

    def __post_init__(self):
        for name in ("Re", "We", "Cn", "Pe", "Fr", "rho_ratio", "nu_ratio"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        g = np.asarray(self.gravity_dir, dtype=float)
        if abs(np.linalg.norm(g) - 1.0) > 1e-12:
            raise ValueError("gravity_dir must be a unit vector")
        if abs(self.alpha) >= self.beta or abs(self.gamma) >= self.xi:
            raise ValueError("phase ratios give non-positive density "
                             "or viscosity")

    @property
    def alpha(self) -> float:
        return 0.5 * (1.0 - 1.0 / self.rho_ratio)

    @property
    def beta(self) -> float:
        return 0.5 * (1.0 + 1.0 / self.rho_ratio)

    @property
    def gamma(self) -> float:
        return 0.5 * (1.0 - 1.0 / self.nu_ratio)

    @property
    def xi(self) -> float:
        return 0.5 * (1.0 + 1.0 / self.nu_ratio)

    @property
    def flux_coeff(self) -> float:
        """J_i = flux_coeff * m * d(mu)/dx_i (thermodynamic mass flux)."""
        return (1.0 / self.rho_ratio - 1.0) / (2.0 * self.Cn)

    @property
    def ghat(self) -> np.ndarray:
        return np.asarray(self.gravity_dir, dtype=float)


@dataclass
class StatePair:
    """Two consecutive flat states and the step connecting them."""

    U_k: np.ndarray
    U_next: np.ndarray
    dt: float
    t_k: float = 0.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.U_k.shape != self.U_next.shape:
            raise ValueError("states must share a topology")


@dataclass
class TimestepBoundInputs:
    C_m: float
    L_phi_max: float
    L_v_max: float
    P_max: float
    visc_dissipation: float
    mu_dissipation: float

    def __post_init__(self):
        vals = (self.C_m, self.L_phi_max, self.L_v_max, self.P_max,
                self.visc_dissipation, self.mu_dissipation)
        if any(v < 0.0 for v in vals):
            raise ValueError("timestep bound inputs must be non-negative")


def state_ndof(dim: int) -> int:
    return dim + 3


def saturate(phi):
    """Pull phi back to [-1, 1] for density/viscosity evaluation."""
    return np.clip(phi, -1.0, 1.0)


def mixture_density(phi_star, params: Params):
    return params.alpha * phi_star + params.beta


def mixture_viscosity(phi_star, params: Params):
    return params.gamma * phi_star + params.xi


def free_energy(phi):
    """Double-well potential (phi^2 - 1)^2 / 4."""
    phi = np.asarray(phi, dtype=float)
    return 0.25 * (phi * phi - 1.0) ** 2


def free_energy_prime(phi):
    phi = np.asarray(phi, dtype=float)
    return phi ** 3 - phi


def peclet_from_cahn(Cn: float) -> float:
    """Diffusion scaling 1/Pe = 3 Cn^2."""
    if Cn <= 0.0:
        raise ValueError("Cn must be positive")
    return 1.0 / (3.0 * Cn * Cn)


def stabilization_taus(params: Params, dt: float, G, v_mid, J_mid,
                       rho_mid, eta_mid):
    """Residual-based stabilization parameters (tau_m, tau_c, tau_phi).

    ``G`` is the element metric: either diagonal entries with shape
    (..., d) or full matrices (..., d, d).  All other arguments broadcast
    over leading axes.
    """
    G = np.asarray(G, dtype=float)
    v = np.asarray(v_mid, dtype=float)
    J = np.asarray(J_mid, dtype=float)
    rho = np.asarray(rho_mid, dtype=float)
    eta = np.asarray(eta_mid, dtype=float)
    d = v.shape[-1]
    if G.ndim >= 2 and G.shape[-1] == d and G.shape[-2] == d:
        vGv = np.einsum("...i,...ij,...j->...", v, G, v)
        vGJ = np.einsum("...i,...ij,...j->...", v, G, J)
        GG = np.einsum("...ij,...ij->...", G, G)
        trG = np.einsum("...ii->...", G)
    else:
        vGv = np.einsum("...i,...i,...i->...", v, G, v)
        vGJ = np.einsum("...i,...i,...i->...", v, G, J)
        GG = np.einsum("...i,...i->...", G, G)
        trG = G.sum(axis=-1)
    base = 4.0 / dt ** 2
    tau_m = (base + vGv + vGJ / (rho * params.Pe)
             + params.C_I * (eta / (rho * params.Re)) ** 2 * GG) ** -0.5
    tau_c = 1.0 / (trG * tau_m)
    tau_phi = (base + vGv
               + params.C_phi * (1.0 / (params.Pe * params.Cn)) ** 2
               * GG) ** -0.5
    return tau_m, tau_c, tau_phi


# ---------------------------------------------------------------------------
# Quadrature-point state
# ---------------------------------------------------------------------------


@dataclass
class QuadState:
    """Midpoint fields, gradients, and time quotients at points.

    All arrays broadcast over leading axes; trailing axes are the spatial
    dimension ``d``.  Second-derivative entries are zero for order-1
    elements (element-interior Lagrange regularity).
    """

    vm: np.ndarray        # (..., d) midpoint velocity
    gvm: np.ndarray       # (..., d, d) gvm[..., i, a] = d v_i / d x_a
    lapv: np.ndarray      # (..., d)
    pm: np.ndarray        # (...)
    gpm: np.ndarray       # (..., d)
    phm: np.ndarray       # (...)
    gphm: np.ndarray      # (..., d)
    Hph: np.ndarray       # (..., d, d)
    mum: np.ndarray       # (...)
    gmum: np.ndarray      # (..., d)
    lapmu: np.ndarray     # (...)
    qv: np.ndarray        # (..., d) (v^{k+1} - v^k)/dt
    qph: np.ndarray       # (...)
    divv1: np.ndarray     # (...) divergence of v^{k+1}
    drho: np.ndarray      # (...) (rho(phi*^{k+1}) - rho(phi*^k))/dt
    sat1: np.ndarray      # (...) saturation slope at phi^{k+1}
    v_k: Optional[np.ndarray] = None    # (..., d) k-state fields that
    ph_k: Optional[np.ndarray] = None   # feed the frozen taus; default
    gmu_k: Optional[np.ndarray] = None  # to the midpoint fields

    @property
    def lapph(self):
        return np.einsum("...aa->...", self.Hph)


def strong_residuals(qs: QuadState, params: Params,
                     f_mom=None, f_phi=None):
    """Point-wise strong residuals (R_m, R_c, R_phi) of the midpoint PDE.

    Any supplied forcing values (same leading shape as the state) are
    subtracted, so an exact manufactured state drives these to zero.
    """
    p = params
    phs = saturate(qs.phm)
    rho = mixture_density(phs, p)
    eta = mixture_viscosity(phs, p)
    sat = (np.abs(qs.phm) < 1.0).astype(float)
    eta_p = p.gamma * sat
    J = p.flux_coeff * p.mobility * qs.gmum
    adv = np.einsum("...ia,...a->...i", qs.gvm, qs.vm)
    Jadv = np.einsum("...a,...ia->...i", J, qs.gvm) / p.Pe
    st = (np.einsum("...ia,...a->...i", qs.Hph, qs.gphm)
          + qs.gphm * qs.lapph[..., None]) * (p.Cn / p.We)
    visc = (eta[..., None] * qs.lapv
            + eta_p[..., None]
            * np.einsum("...a,...ia->...i", qs.gphm, qs.gvm)) / p.Re
    R_m = (rho[..., None] * (qs.qv + adv) + Jadv + st
           + qs.gpm / p.We - visc)
    if p.gravity:
        R_m = R_m - rho[..., None] * p.ghat / p.Fr
    if f_mom is not None:
        R_m = R_m - f_mom
    R_c = np.einsum("...aa->...", qs.gvm)
    R_phi = (qs.qph + np.einsum("...a,...a->...", qs.vm, qs.gphm)
             + qs.phm * R_c
             - p.mobility * qs.lapmu / (p.Pe * p.Cn))
    if f_phi is not None:
        R_phi = R_phi - f_phi
    return R_m, R_c, R_phi


# ---------------------------------------------------------------------------
# Assembly of the coupled residual and Jacobian
# ---------------------------------------------------------------------------


def _point_fields(ctx, Uloc, dim, with_hess):
    """Values, gradients, and (optionally) Hessians at quadrature points."""
    val = np.einsum("qs,esf->eqf", ctx.basis.N, Uloc)
    grad = np.einsum("qsa,esf->eqfa", ctx.dNx, Uloc)
    hess = None
    if with_hess:
        hess = np.einsum("qsab,esf->eqfab", ctx.d2Nx, Uloc)
    return val, grad, hess


def _quad_state(ctx, pair: StatePair, params: Params, dim: int) -> QuadState:
    with_hess = ctx.basis.order >= 2
    U0 = pair.U_k.reshape(-1, state_ndof(dim))
    U1 = pair.U_next.reshape(-1, state_ndof(dim))
    loc0 = ctx.local(U0)
    loc1 = ctx.local(U1)
    v0, g0, h0 = _point_fields(ctx, loc0, dim, with_hess)
    v1, g1, h1 = _point_fields(ctx, loc1, dim, with_hess)
    vm_all = 0.5 * (v0 + v1)
    gm_all = 0.5 * (g0 + g1)
    iv = slice(0, dim)
    ip, iph, imu = dim, dim + 1, dim + 2
    shape = vm_all.shape[:2]
    if with_hess:
        hm_all = 0.5 * (h0 + h1)
        lapv = np.einsum("eqiaa->eqi", hm_all[:, :, iv])
        Hph = hm_all[:, :, iph]
        lapmu = np.einsum("eqaa->eq", hm_all[:, :, imu])
    else:
        lapv = np.zeros(shape + (dim,))
        Hph = np.zeros(shape + (dim, dim))
        lapmu = np.zeros(shape)
    drho = (mixture_density(saturate(v1[:, :, iph]), params)
            - mixture_density(saturate(v0[:, :, iph]), params)) / pair.dt
    return QuadState(
        vm=vm_all[:, :, iv],
        gvm=gm_all[:, :, iv],
        lapv=lapv,
        pm=vm_all[:, :, ip],
        gpm=gm_all[:, :, ip],
        phm=vm_all[:, :, iph],
        gphm=gm_all[:, :, iph],
        Hph=Hph,
        mum=vm_all[:, :, imu],
        gmum=gm_all[:, :, imu],
        lapmu=lapmu,
        qv=(v1[:, :, iv] - v0[:, :, iv]) / pair.dt,
        qph=(v1[:, :, iph] - v0[:, :, iph]) / pair.dt,
        divv1=np.einsum("eqaa->eq", g1[:, :, iv]),
        drho=drho,
        sat1=(np.abs(v1[:, :, iph]) < 1.0).astype(float),
        v_k=v0[:, :, iv],
        ph_k=v0[:, :, iph],
        gmu_k=g0[:, :, imu],
    )


class _Coeffs:
    """Shared per-point coefficients for residual and Jacobian terms."""

    def __init__(self, ctx, qs: QuadState, params: Params, dt: float,
                 f_mom, f_phi):
        p = params
        d = ctx.topology.dim
        self.qs, self.p, self.d, self.dt = qs, p, d, dt
        phs = saturate(qs.phm)
        sat = (np.abs(qs.phm) < 1.0).astype(float)
        self.rho = mixture_density(phs, p)
        self.eta = mixture_viscosity(phs, p)
        self.rho_p = p.alpha * sat
        self.eta_p = p.gamma * sat
        self.J = p.flux_coeff * p.mobility * qs.gmum
        self.divJ = p.flux_coeff * p.mobility * qs.lapmu
        self.adv = np.einsum("eqia,eqa->eqi", qs.gvm, qs.vm)
        self.Rm, self.Rc, self.Rphi = strong_residuals(qs, p, f_mom, f_phi)
        # taus frozen at the k-state so the analytic Jacobian is exact
        Gd = np.broadcast_to(4.0 / ctx.h ** 2, qs.vm.shape)
        v_k = qs.v_k if qs.v_k is not None else qs.vm
        ph_k = qs.ph_k if qs.ph_k is not None else qs.phm
        gmu_k = qs.gmu_k if qs.gmu_k is not None else qs.gmum
        phs_k = saturate(ph_k)
        J_k = p.flux_coeff * p.mobility * gmu_k
        self.tau_m, self.tau_c, self.tau_phi = stabilization_taus(
            p, dt, Gd, v_k, J_k,
            mixture_density(phs_k, p), mixture_viscosity(phs_k, p))
        self.f_mom, self.f_phi = f_mom, f_phi


def _weak_parts(c: _Coeffs):
    """A (test-value) and B (test-gradient) parts of every equation.

    Returns ``A`` with shape (ne, nq, neq) and ``B`` with shape
    (ne, nq, neq, d), where equations are ordered (momentum_i, pressure,
    phi, mu).
    """
    qs, p, d = c.qs, c.p, c.d
    ne, nq = qs.pm.shape
    neq = d + 3
    A = np.zeros((ne, nq, neq))
    B = np.zeros((ne, nq, neq, d))

    # momentum rows
    consist = 0.5 * (qs.drho
                     + c.rho_p * np.einsum("eqa,eqa->eq", qs.gphm, qs.vm)
                     + c.rho * c.Rc
                     + c.divJ / p.Pe)
    A_m = (c.rho[..., None] * (qs.qv + c.adv)
           + np.einsum("eqa,eqia->eqi", c.J, qs.gvm) / p.Pe
           - c.tau_m[..., None] * np.einsum("eqa,eqia->eqi", c.Rm, qs.gvm)
           + consist[..., None] * qs.vm)
    if p.gravity:
        A_m = A_m - (c.rho / p.Fr)[..., None] * p.ghat
    if c.f_mom is not None:
        A_m = A_m - c.f_mom
    A[:, :, :d] = A_m

    B_m = (c.tau_m[..., None, None]
           * np.einsum("eqj,eqi->eqij", qs.vm, c.Rm)
           - (c.tau_m ** 2 / c.rho)[..., None, None]
           * np.einsum("eqi,eqj->eqij", c.Rm, c.Rm)
           + (c.tau_m / (c.rho * p.Pe))[..., None, None]
           * np.einsum("eqi,eqj->eqij", c.Rm, c.J)
           - (p.Cn / p.We) * np.einsum("eqi,eqj->eqij", qs.gphm, qs.gphm)
           + np.einsum("eq,ij->eqij",
                       c.rho * c.tau_c * c.Rc / p.We - qs.pm / p.We,
                       np.eye(d))
           + (c.eta / p.Re)[..., None, None] * qs.gvm)
    B[:, :, :d, :] = B_m

    # pressure row
    A[:, :, d] = qs.divv1
    B[:, :, d, :] = (c.tau_m / c.rho)[..., None] * c.Rm

    # phi row
    A[:, :, d + 1] = qs.qph
    if c.f_phi is not None:
        A[:, :, d + 1] -= c.f_phi
    B[:, :, d + 1, :] = (
        -qs.vm * qs.phm[..., None]
        + (c.tau_m * qs.phm / c.rho)[..., None] * c.Rm
        + c.tau_phi[..., None] * c.Rphi[..., None] * qs.vm
        + (p.mobility / (p.Pe * p.Cn)) * qs.gmum)

    # chemical potential row
    A[:, :, d + 2] = free_energy_prime(qs.phm) - qs.mum
    B[:, :, d + 2, :] = p.Cn ** 2 * qs.gphm
    return A, B


def _forcing_at(ctx, forcing, t_mid, dim):
    if forcing is None:
        return None, None
    x = ctx.xq.reshape(-1, dim)
    fm = np.asarray(forcing.momentum(x, t_mid), dtype=float)
    fp = np.asarray(forcing.phase(x, t_mid), dtype=float)
    ne, nq = ctx.xq.shape[:2]
    return fm.reshape(ne, nq, dim), fp.reshape(ne, nq)


def chns_residual(pair: StatePair, topology: MeshTopology, params: Params,
                  bc: Optional[DirichletSet] = None,
                  forcing=None) -> np.ndarray:
    """Weak residual F(U^{k+1}) of one Crank-Nicolson step.

    ``forcing``, if given, provides ``momentum(x, t)`` and ``phase(x, t)``
    evaluated at the step midpoint time; Dirichlet rows are replaced by
    ``U^{k+1} - g``.
    """
    d = topology.dim
    ndof = state_ndof(d)
    t_mid = pair.t_k + 0.5 * pair.dt

    def kernel(ctx):
        qs = _quad_state(ctx, pair, params, d)
        fm, fp = _forcing_at(ctx, forcing, t_mid, d)
        c = _Coeffs(ctx, qs, params, pair.dt, fm, fp)
        A, B = _weak_parts(c)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            bad = np.nonzero(~(np.isfinite(A).all(axis=(1, 2))
                               & np.isfinite(B).all(axis=(1, 2, 3))))[0][0]
            eq = int(np.nonzero(~np.isfinite(
                A[bad]).all(axis=0))[0][0]) if not np.all(
                np.isfinite(A[bad])) else -1
            raise fem.AssemblyError(
                f"non-finite residual on element {ctx.elems[bad]}, "
                f"equation row {eq}")
        Fe = (np.einsum("q,qs,eqE->esE", ctx.qw_detJ, ctx.basis.N, A)
              + np.einsum("q,qsb,eqEb->esE", ctx.qw_detJ, ctx.dNx, B))
        return Fe.reshape(len(ctx.elems), -1), None

    F = fem.assemble(topology, kernel, ndof=ndof, want_vector=True)
    if bc is not None and len(bc):
        idx = bc.flat_index()
        F[idx] = pair.U_next[idx] - bc.values
    return F


class _Chain:
    """Accumulates d(weak part)/d(trial dof) into channel coefficients.

    ``C[e, q, eq, P, f, ch]`` multiplies test channel P (value or gradient
    component) and trial channel ch (value, gradient, or second
    derivative of the trial shape function) for trial dof component f.
    """

    def __init__(self, ne, nq, neq, d, dt, sat1, alpha, order):
        self.d, self.dt = d, dt
        self.nch = 1 + d + d * d
        self.C = np.zeros((ne, nq, neq, 1 + d, neq, self.nch))
        self.drho_fac = alpha * sat1 / dt
        self.hess = order >= 2

    # trial channel indices
    def _v(self):
        return 0

    def _g(self, a):
        return 1 + a

    def _h(self, a, b):
        return 1 + self.d + a * self.d + b

    def vm(self, eq, P, i, val):
        self.C[:, :, eq, P, i, 0] += 0.5 * val

    def qv(self, eq, P, i, val):
        self.C[:, :, eq, P, i, 0] += val / self.dt

    def gvm(self, eq, P, i, a, val):
        self.C[:, :, eq, P, i, 1 + a] += 0.5 * val

    def lapv(self, eq, P, i, val):
        if self.hess:
            for a in range(self.d):
                self.C[:, :, eq, P, i, self._h(a, a)] += 0.5 * val

    def pm(self, eq, P, val):
        self.C[:, :, eq, P, self.d, 0] += 0.5 * val

    def gpm(self, eq, P, a, val):
        self.C[:, :, eq, P, self.d, 1 + a] += 0.5 * val

    def phm(self, eq, P, val):
        self.C[:, :, eq, P, self.d + 1, 0] += 0.5 * val

    def qph(self, eq, P, val):
        self.C[:, :, eq, P, self.d + 1, 0] += val / self.dt

    def drho(self, eq, P, val):
        self.C[:, :, eq, P, self.d + 1, 0] += val * self.drho_fac

    def gphm(self, eq, P, a, val):
        self.C[:, :, eq, P, self.d + 1, 1 + a] += 0.5 * val

    def Hph(self, eq, P, a, b, val):
        if self.hess:
            self.C[:, :, eq, P, self.d + 1, self._h(a, b)] += 0.5 * val

    def mum(self, eq, P, val):
        self.C[:, :, eq, P, self.d + 2, 0] += 0.5 * val

    def gmum(self, eq, P, a, val):
        self.C[:, :, eq, P, self.d + 2, 1 + a] += 0.5 * val

    def lapmu(self, eq, P, val):
        if self.hess:
            for a in range(self.d):
                self.C[:, :, eq, P, self.d + 2, self._h(a, a)] += 0.5 * val

    def divv1(self, eq, P, val):
        for a in range(self.d):
            self.C[:, :, eq, P, a, 1 + a] += val


def _add_Rm_deriv(ch: _Chain, c: _Coeffs, eq, P, i, coeff):
    """Chain rule through the strong momentum residual R_m[i]."""
    qs, p, d = c.qs, c.p, c.d
    cJm = p.flux_coeff * p.mobility
    ch.qv(eq, P, i, coeff * c.rho)
    for j in range(d):
        ch.vm(eq, P, j, coeff * c.rho * qs.gvm[:, :, i, j])
        ch.gvm(eq, P, i, j, coeff * (c.rho * qs.vm[:, :, j]
                                     + c.J[:, :, j] / p.Pe
                                     - c.eta_p * qs.gphm[:, :, j] / p.Re))
        ch.gmum(eq, P, j, coeff * cJm * qs.gvm[:, :, i, j] / p.Pe)
    ch.lapv(eq, P, i, coeff * (-c.eta / p.Re))
    ch.gpm(eq, P, i, coeff / p.We)
    dphi = c.rho_p * (qs.qv[:, :, i] + c.adv[:, :, i]) \
        - c.eta_p * qs.lapv[:, :, i] / p.Re
    if p.gravity:
        dphi = dphi - c.rho_p * p.ghat[i] / p.Fr
    ch.phm(eq, P, dphi * coeff)
    lapph = qs.lapph
    for a in range(d):
        ch.gphm(eq, P, a, coeff * ((p.Cn / p.We)
                                   * (qs.Hph[:, :, i, a]
                                      + (lapph if a == i else 0.0))
                                   - c.eta_p * qs.gvm[:, :, i, a] / p.Re))
        for b in range(d):
            val = qs.gphm[:, :, b] if a == i else 0.0
            if a == b:
                val = val + qs.gphm[:, :, i]
            if not np.isscalar(val):
                ch.Hph(eq, P, a, b, coeff * (p.Cn / p.We) * val)


def _add_Rphi_deriv(ch: _Chain, c: _Coeffs, eq, P, coeff):
    qs, p, d = c.qs, c.p, c.d
    ch.qph(eq, P, coeff)
    ch.phm(eq, P, coeff * c.Rc)
    ch.lapmu(eq, P, coeff * (-p.mobility / (p.Pe * p.Cn)))
    for a in range(d):
        ch.vm(eq, P, a, coeff * qs.gphm[:, :, a])
        ch.gphm(eq, P, a, coeff * qs.vm[:, :, a])
        ch.gvm(eq, P, a, a, coeff * qs.phm)


def _jacobian_channels(ctx, c: _Coeffs) -> np.ndarray:
    """All analytic derivative channels for one element group."""
    qs, p, d = c.qs, c.p, c.d
    ne, nq = qs.pm.shape
    neq = d + 3
    ch = _Chain(ne, nq, neq, d, c.dt, qs.sat1, p.alpha, ctx.basis.order)
    rho, eta, rho_p, eta_p = c.rho, c.eta, c.rho_p, c.eta_p
    tau_m, tau_c, tau_phi = c.tau_m, c.tau_c, c.tau_phi
    Rm, Rc, Rphi, J = c.Rm, c.Rc, c.Rphi, c.J
    cJm = p.flux_coeff * p.mobility

    # --- momentum rows, test-value part (P = 0) -----------------------
    for i in range(d):
        ch.qv(i, 0, i, rho)
        dphi = rho_p * (qs.qv[:, :, i] + c.adv[:, :, i])
        if p.gravity:
            dphi = dphi - rho_p * p.ghat[i] / p.Fr
        for j in range(d):
            ch.vm(i, 0, j, rho * qs.gvm[:, :, i, j])
            ch.gvm(i, 0, i, j, rho * qs.vm[:, :, j] + J[:, :, j] / p.Pe)
            ch.gmum(i, 0, j, cJm * qs.gvm[:, :, i, j] / p.Pe)
            # VMS cross-stress -tau_m R_m . grad(v_i)
            ch.gvm(i, 0, i, j, -tau_m * Rm[:, :, j])
            _add_Rm_deriv(ch, c, i, 0, j, -tau_m * qs.gvm[:, :, i, j])
        ch.phm(i, 0, dphi)
        # 1/2-continuity consistency term
        S = (qs.drho + rho_p * np.einsum("eqa,eqa->eq", qs.gphm, qs.vm)
             + rho * Rc + c.divJ / p.Pe)
        ch.vm(i, 0, i, 0.5 * S)
        ch.drho(i, 0, 0.5 * qs.vm[:, :, i])
        ch.lapmu(i, 0, 0.5 * cJm * qs.vm[:, :, i] / p.Pe)
        ch.phm(i, 0, 0.5 * rho_p * Rc * qs.vm[:, :, i])
        for a in range(d):
            ch.vm(i, 0, a, 0.5 * rho_p * qs.gphm[:, :, a] * qs.vm[:, :, i])
            ch.gphm(i, 0, a, 0.5 * rho_p * qs.vm[:, :, a] * qs.vm[:, :, i])
            ch.gvm(i, 0, a, a, 0.5 * rho * qs.vm[:, :, i])

    # --- momentum rows, test-gradient part (P = 1 + j) ----------------
    for i in range(d):
        for j in range(d):
            P = 1 + j
            ch.vm(i, P, j, tau_m * Rm[:, :, i])
            _add_Rm_deriv(ch, c, i, P, i,
                          tau_m * qs.vm[:, :, j]
                          - (tau_m ** 2 / rho) * Rm[:, :, j]
                          + (tau_m / (rho * p.Pe)) * J[:, :, j])
            _add_Rm_deriv(ch, c, i, P, j,
                          -(tau_m ** 2 / rho) * Rm[:, :, i])
            ch.gmum(i, P, j, cJm * (tau_m / (rho * p.Pe)) * Rm[:, :, i])
            ch.phm(i, P,
                   (tau_m ** 2 / rho ** 2) * rho_p
                   * Rm[:, :, i] * Rm[:, :, j]
                   - (tau_m * rho_p / (rho ** 2 * p.Pe))
                   * J[:, :, j] * Rm[:, :, i])
            ch.gphm(i, P, i, -(p.Cn / p.We) * qs.gphm[:, :, j])
            ch.gphm(i, P, j, -(p.Cn / p.We) * qs.gphm[:, :, i])
            ch.gvm(i, P, i, j, eta / p.Re)
            ch.phm(i, P, eta_p * qs.gvm[:, :, i, j] / p.Re)
            if i == j:
                ch.pm(i, P, np.full((ne, nq), -1.0 / p.We))
                ch.phm(i, P, rho_p * tau_c * Rc / p.We)
                for a in range(d):
                    ch.gvm(i, P, a, a, rho * tau_c / p.We)

    # --- pressure row --------------------------------------------------
    ch.divv1(d, 0, np.ones((ne, nq)))
    for a in range(d):
        P = 1 + a
        _add_Rm_deriv(ch, c, d, P, a, tau_m / rho)
        ch.phm(d, P, -(tau_m * rho_p / rho ** 2) * Rm[:, :, a])

    # --- phi row --------------------------------------------------------
    ch.qph(d + 1, 0, np.ones((ne, nq)))
    for a in range(d):
        P = 1 + a
        ch.vm(d + 1, P, a, -qs.phm + tau_phi * Rphi)
        ch.phm(d + 1, P, -qs.vm[:, :, a]
               + (tau_m / rho) * Rm[:, :, a]
               - (tau_m * rho_p / rho ** 2) * qs.phm * Rm[:, :, a])
        _add_Rm_deriv(ch, c, d + 1, P, a, (tau_m / rho) * qs.phm)
        _add_Rphi_deriv(ch, c, d + 1, P, tau_phi * qs.vm[:, :, a])
        ch.gmum(d + 1, P, a,
                np.full((ne, nq), p.mobility / (p.Pe * p.Cn)))

    # --- mu row ----------------------------------------------------------
    ch.mum(d + 2, 0, np.full((ne, nq), -1.0))
    ch.phm(d + 2, 0, 3.0 * qs.phm ** 2 - 1.0)
    for a in range(d):
        ch.gphm(d + 2, 1 + a, a, np.full((ne, nq), p.Cn ** 2))
    return ch.C


def chns_jacobian(pair: StatePair, topology: MeshTopology, params: Params,
                  bc: Optional[DirichletSet] = None,
                  forcing=None) -> sp.csr_matrix:
    """Analytic Jacobian dF/dU^{k+1} with frozen stabilization taus.

    Dirichlet rows are replaced by identity rows; columns are left in
    place, so the matrix is the exact derivative of
    :func:`chns_residual`.
    """
    d = topology.dim
    ndof = state_ndof(d)
    t_mid = pair.t_k + 0.5 * pair.dt
    basis = basis_set(topology.order, d)
    nq = len(basis.qw)
    nslots = basis.n_slots
    # test channels (value, gradient components) per element level filled
    # inside the kernel; trial channels include second derivatives
    Svals = {}

    def kernel(ctx):
        qs = _quad_state(ctx, pair, params, d)
        fm, fp = _forcing_at(ctx, forcing, t_mid, d)
        c = _Coeffs(ctx, qs, params, pair.dt, fm, fp)
        C = _jacobian_channels(ctx, c)
        lev = ctx.level
        if lev not in Svals:
            T = np.zeros((nq, nslots, 1 + d))
            T[:, :, 0] = basis.N
            T[:, :, 1:] = ctx.dNx
            S = np.zeros((nq, nslots, 1 + d + d * d))
            S[:, :, 0] = basis.N
            S[:, :, 1:1 + d] = ctx.dNx
            S[:, :, 1 + d:] = ctx.d2Nx.reshape(nq, nslots, d * d)
            Svals[lev] = (T, S)
        T, S = Svals[lev]
        Ke = np.einsum("q,qnP,eqEPFc,qMc->enEMF", ctx.qw_detJ, T, C, S,
                       optimize=True)
        ne = len(ctx.elems)
        Ke = Ke.reshape(ne, nslots * ndof, nslots * ndof)
        if not np.all(np.isfinite(Ke)):
            bad = ctx.elems[~np.isfinite(Ke).all(axis=(1, 2))][0]
            raise fem.AssemblyError(f"non-finite Jacobian on element {bad}")
        return None, Ke

    A = fem.assemble(topology, kernel, ndof=ndof,
                     want_vector=False, want_matrix=True)
    if bc is not None and len(bc):
        n = A.shape[0]
        keep = np.ones(n)
        keep[bc.flat_index()] = 0.0
        A = (sp.diags(keep) @ A + sp.diags(1.0 - keep)).tocsr()
        A.sort_indices()
    return A


# ---------------------------------------------------------------------------
# Energy, time-step bound, and proof-identity checks
# ---------------------------------------------------------------------------


def total_energy(U: np.ndarray, topology: MeshTopology,
                 params: Params) -> float:
    """Kinetic + interfacial + gravitational energy of a state."""
    d = topology.dim
    p = params
    Um = U.reshape(-1, state_ndof(d))
    basis = basis_set(topology.order, d, topology.order + 2)
    total = 0.0
    for level, elems in topology.level_groups():
        ctx = fem._group_context(topology, basis, level, elems)
        loc = ctx.local(Um)
        val = np.einsum("qs,esf->eqf", basis.N, loc)
        gph = np.einsum("qsa,es->eqa", ctx.dNx, loc[:, :, d + 1])
        v2 = (val[:, :, :d] ** 2).sum(axis=2)
        phi = val[:, :, d + 1]
        rho = mixture_density(saturate(phi), p)
        dens = 0.5 * rho * v2 + (free_energy(phi)
                                 + 0.5 * p.Cn ** 2 * (gph ** 2).sum(axis=2)
                                 ) / (p.Cn * p.We)
        if p.gravity:
            y_eff = -np.einsum("eqa,a->eq", ctx.xq, p.ghat)
            dens = dens + rho * y_eff / (p.Fr * p.Cn * p.We)
        total += float(np.einsum("eq,q->", dens, ctx.qw_detJ))
    return total


def timestep_bound(pair: StatePair, topology: MeshTopology,
                   params: Params) -> float:
    """Largest energy-stable dt per the midpoint dissipation estimate.

    Lipschitz factors are estimated from the realized step: max nodal
    |dphi|/dt and max nodal |dv|/dt.  Returns +inf when the denominator
    vanishes (no motion).
    """
    d = topology.dim
    p = params
    U0 = pair.U_k.reshape(-1, state_ndof(d))
    U1 = pair.U_next.reshape(-1, state_ndof(d))
    L_phi = float(np.abs(U1[:, d + 1] - U0[:, d + 1]).max()) / pair.dt
    L_v = float(np.linalg.norm(U1[:, :d] - U0[:, :d], axis=1).max()) / pair.dt
    P_max = 0.25 * float(np.maximum(np.abs(U0[:, d + 1]),
                                    np.abs(U1[:, d + 1])).max())
    C_m = topology.tree.retained_volume()

    basis = basis_set(topology.order, d)
    visc = 0.0
    mu_diss = 0.0
    Um = 0.5 * (U0 + U1)
    for level, elems in topology.level_groups():
        ctx = fem._group_context(topology, basis, level, elems)
        loc = ctx.local(Um)
        grad = np.einsum("qsa,esf->eqfa", ctx.dNx, loc)
        phi = np.einsum("qs,es->eq", basis.N, loc[:, :, d + 1])
        eta = mixture_viscosity(saturate(phi), p)
        gv2 = (grad[:, :, :d, :] ** 2).sum(axis=(2, 3))
        gmu2 = (grad[:, :, d + 2, :] ** 2).sum(axis=2)
        visc += float(np.einsum("eq,q->", eta * gv2, ctx.qw_detJ))
        mu_diss += float(np.einsum("eq,q->", gmu2, ctx.qw_detJ))
    inputs = TimestepBoundInputs(
        C_m=C_m, L_phi_max=L_phi, L_v_max=L_v, P_max=P_max,
        visc_dissipation=visc / p.Re,
        mu_dissipation=mu_diss / (p.Pe * p.Cn ** 2 * p.We))
    num = inputs.visc_dissipation + inputs.mu_dissipation
    den = (inputs.C_m * inputs.L_phi_max ** 3 * inputs.P_max
           / (p.We * p.Cn)
           + inputs.C_m * p.alpha * inputs.L_phi_max * inputs.L_v_max / 8.0)
    if den == 0.0:
        return float("inf")
    return float(np.sqrt(num / den))


def verify_evolution_identity(v_k, v_next, phi_k, phi_next,
                              topology: MeshTopology,
                              params: Params) -> float:
    """Defect of the kinetic-energy evolution identity (pure algebra).

    Both sides use the unsaturated affine density; the identity holds for
    arbitrary fields, so a nonzero defect indicates a quadrature or
    algebra bug, not a modeling condition.
    """
    d = topology.dim
    p = params
    basis = basis_set(topology.order, d, topology.order + 2)
    lhs = 0.0
    rhs = 0.0
    fields = np.concatenate([np.asarray(v_k, dtype=float),
                             np.asarray(v_next, dtype=float),
                             np.asarray(phi_k, dtype=float)[:, None],
                             np.asarray(phi_next, dtype=float)[:, None]],
                            axis=1)
    for level, elems in topology.level_groups():
        ctx = fem._group_context(topology, basis, level, elems)
        loc = ctx.local(fields)
        val = np.einsum("qs,esf->eqf", basis.N, loc)
        v0, v1 = val[:, :, :d], val[:, :, d:2 * d]
        rho0 = p.alpha * val[:, :, 2 * d] + p.beta
        rho1 = p.alpha * val[:, :, 2 * d + 1] + p.beta
        rhom = 0.5 * (rho0 + rho1)
        vt = 0.5 * (v0 + v1)
        dv = v1 - v0
        lhs_d = (rhom * np.einsum("eqi,eqi->eq", dv, vt)
                 + 0.5 * (rho1 - rho0) * (vt ** 2).sum(axis=2))
        rhs_d = (0.5 * (rho1 * (v1 ** 2).sum(axis=2)
                        - rho0 * (v0 ** 2).sum(axis=2))
                 - 0.125 * (rho1 - rho0) * (dv ** 2).sum(axis=2))
        lhs += float(np.einsum("eq,q->", lhs_d, ctx.qw_detJ))
        rhs += float(np.einsum("eq,q->", rhs_d, ctx.qw_detJ))
    return abs(lhs - rhs)


def _trilinear(coef_fn, div_fn, w_grad_fn, w_fn, u_fn,
               topology: MeshTopology, nq_axis: int) -> float:
    d = topology.dim
    basis = basis_set(topology.order, d, nq_axis)
    total = 0.0
    for level, elems in topology.level_groups():
        ctx = fem._group_context(topology, basis, level, elems)
        x = ctx.xq.reshape(-1, d)
        a = np.asarray(coef_fn(x), dtype=float)          # (n, d)
        gw = np.asarray(w_grad_fn(x), dtype=float)       # (n, d, d)
        w = np.asarray(w_fn(x), dtype=float)             # (n, d)
        u = np.asarray(u_fn(x), dtype=float)             # (n, d)
        dv = np.asarray(div_fn(x), dtype=float)          # (n,)
        integ = (np.einsum("nj,nij,ni->n", a, gw, u)
                 + 0.5 * dv * np.einsum("ni,ni->n", w, u))
        integ = integ.reshape(ctx.xq.shape[:2])
        total += float(np.einsum("eq,q->", integ, ctx.qw_detJ))
    return total


def trilinear_b1(v_fn, div_rho_v_fn, w_grad_fn, w_fn, u_fn, rho_fn,
                 topology: MeshTopology, nq_axis: int = 6) -> float:
    """b1(v, w, u) = (rho v_j dw_i/dx_j, u_i) + 1/2 (w_i d(rho v_j)/dx_j, u_i).

    All arguments are callables of point coordinates returning analytic
    field values; the form is evaluated by element quadrature.
    """
    def coef(x):
        return np.asarray(rho_fn(x), dtype=float)[:, None] \
            * np.asarray(v_fn(x), dtype=float)
    return _trilinear(coef, div_rho_v_fn, w_grad_fn, w_fn, u_fn,
                      topology, nq_axis)


def trilinear_b2(J_fn, div_J_fn, w_grad_fn, w_fn, u_fn,
                 topology: MeshTopology, nq_axis: int = 6) -> float:
    """b2(w, J, u) = (J_j dw_i/dx_j, u_i) + 1/2 (w_i dJ_j/dx_j, u_i)."""
    return _trilinear(lambda x: np.asarray(J_fn(x), dtype=float),
                      div_J_fn, w_grad_fn, w_fn, u_fn, topology, nq_axis)
