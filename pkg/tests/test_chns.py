"""Mixture model, residual/Jacobian, energy, and identity tests."""

import numpy as np
import pytest

from chnsfem import chns, fem, octmesh
from chnsfem.chns import (
    Params, StatePair, chns_jacobian, chns_residual, free_energy,
    free_energy_prime, mixture_density, mixture_viscosity,
    peclet_from_cahn, saturate, stabilization_taus, state_ndof,
    timestep_bound, total_energy, trilinear_b1, trilinear_b2,
    verify_evolution_identity,
)
from chnsfem.fem import DirichletSet
from chnsfem.octmesh import build_topology, build_tree
from chnsfem.solver import fd_jacobian_check


def uniform_topo(level, order=1, scale=(1.0, 1.0)):
    tree = build_tree(lambda x: 1.0, None, level, level, scale, dim=2)
    return build_topology(tree, order=order)


def default_params(**kw):
    base = dict(Re=10.0, We=1.0, Cn=0.1, Pe=100.0, Fr=1.0)
    base.update(kw)
    return Params(**base)


def empty_bc():
    return DirichletSet(np.zeros(0), np.zeros(0), np.zeros(0), ndof=5)


def make_state(topo, v0=None, v1=None, p=None, phi=None, mu=None):
    x = topo.node_coords
    zero = np.zeros(topo.n_nodes)
    cols = [fn(x) if fn is not None else zero
            for fn in (v0, v1, p, phi, mu)]
    return np.stack(cols, axis=1).ravel()


# ---------------------------------------------------------------------------
# Mixture model
# ---------------------------------------------------------------------------


def test_density_case1_ratios():
    p = default_params(rho_ratio=10.0)
    assert mixture_density(1.0, p) == pytest.approx(1.0, abs=1e-15)
    assert mixture_density(-1.0, p) == pytest.approx(0.1, abs=1e-15)
    assert mixture_density(0.0, p) == pytest.approx(0.55, abs=1e-15)


def test_viscosity_ratio():
    p = default_params(nu_ratio=10.0)
    assert mixture_viscosity(1.0, p) == pytest.approx(1.0, abs=1e-15)
    assert mixture_viscosity(-1.0, p) == pytest.approx(0.1, abs=1e-15)


def test_params_invariants():
    with pytest.raises(ValueError):
        default_params(Re=-1.0)
    with pytest.raises(ValueError):
        default_params(gravity_dir=(0.0, -2.0))


def test_saturate():
    assert saturate(0.5) == 0.5
    assert saturate(-1.2) == -1.0
    assert saturate(1.0) == 1.0
    assert np.array_equal(saturate(np.array([2.0, -0.3])),
                          np.array([1.0, -0.3]))


def test_free_energy():
    assert free_energy(1.0) == 0.0 and free_energy(-1.0) == 0.0
    assert free_energy_prime(1.0) == 0.0 and free_energy_prime(-1.0) == 0.0
    assert free_energy(0.0) == 0.25
    h = 1e-5
    fd = (free_energy(0.37 + h) - free_energy(0.37 - h)) / (2 * h)
    assert abs(free_energy_prime(0.37) - fd) < 1e-8


def test_peclet_from_cahn():
    assert peclet_from_cahn(0.005) == pytest.approx(13333.333333, rel=1e-9)
    assert peclet_from_cahn(1.0) == pytest.approx(1.0 / 3.0, rel=1e-14)
    assert peclet_from_cahn(0.0025) == pytest.approx(160000.0 / 3.0,
                                                     rel=1e-12)


def test_flux_coefficient_sign():
    p = default_params(rho_ratio=10.0)
    # heavier plus phase: diffusive flux opposes the mu gradient
    assert p.flux_coeff == pytest.approx(-p.alpha / p.Cn, rel=1e-14)
    assert p.flux_coeff < 0.0


# ---------------------------------------------------------------------------
# Stabilization
# ---------------------------------------------------------------------------


def test_tau_m_transient_limit():
    p = default_params(Re=1e12)
    G = np.array([16.0, 16.0])           # 2D uniform h = 0.5
    z = np.zeros(2)
    tm, tc, tph = stabilization_taus(p, 0.1, G, z, z, 1.0, 1.0)
    assert tm == pytest.approx(0.05, rel=1e-9)
    assert tc == pytest.approx(0.625, rel=1e-9)


def test_tau_m_monotone_in_velocity():
    p = default_params()
    G = np.array([64.0, 64.0])
    z = np.zeros(2)
    last = np.inf
    for s in np.linspace(0.0, 10.0, 11):
        v = np.array([s, 0.5 * s])
        tm, _, _ = stabilization_taus(p, 0.05, G, v, z, 1.0, 1.0)
        assert tm <= last + 1e-15
        last = tm


def test_taus_positive_finite():
    p = default_params(rho_ratio=10.0, nu_ratio=10.0)
    rng = np.random.default_rng(0)
    G = np.array([100.0, 400.0])
    for _ in range(20):
        v = rng.standard_normal(2) * 5
        J = rng.standard_normal(2)
        rho = rng.uniform(0.1, 1.0)
        eta = rng.uniform(0.1, 1.0)
        taus = stabilization_taus(p, 0.01, G, v, J, rho, eta)
        for t in taus:
            assert np.isfinite(t) and t > 0.0


# ---------------------------------------------------------------------------
# Residual
# ---------------------------------------------------------------------------


def test_zero_state_zero_residual():
    topo = uniform_topo(2)
    p = default_params(gravity=False)
    U = np.zeros(topo.n_nodes * 5)
    F = chns_residual(StatePair(U, U, 1e-2), topo, p, empty_bc())
    assert np.max(np.abs(F)) == 0.0


def test_hydrostatic_balance():
    topo = uniform_topo(3)
    p = default_params(rho_ratio=10.0)
    assert p.gravity
    state = make_state(
        topo,
        p=lambda x: -(p.We / p.Fr) * x[:, 1] + 0.7,
        phi=lambda x: np.ones(len(x)),
    )
    F = chns_residual(StatePair(state, state, 1e-2), topo, p, empty_bc())
    Fm = F.reshape(-1, 5)
    assert np.max(np.abs(Fm[:, :2])) < 1e-12   # momentum balance
    assert np.max(np.abs(Fm)) < 1e-12          # nothing else moves either


def test_residual_names_element_on_nonfinite():
    topo = uniform_topo(1)
    p = default_params()
    U = np.zeros(topo.n_nodes * 5)
    U[3] = np.inf
    with pytest.raises(fem.AssemblyError):
        chns_residual(StatePair(U, U, 1e-2), topo, p, empty_bc())


def test_dirichlet_rows_are_boundary_residuals():
    topo = uniform_topo(2)
    p = default_params(gravity=False)
    U = np.zeros(topo.n_nodes * 5)
    bc = DirichletSet(np.array([0, 1]), np.array([0, 1]),
                      np.array([0.25, -0.5]), ndof=5)
    F = chns_residual(StatePair(U, U, 1e-2), topo, p, bc)
    assert F[0 * 5 + 0] == pytest.approx(-0.25)
    assert F[1 * 5 + 1] == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# Jacobian
# ---------------------------------------------------------------------------


def random_state(topo, rng, amp=0.8):
    n = topo.n_nodes
    U = rng.standard_normal(n * 5) * amp
    return U


@pytest.mark.parametrize("rho_ratio,nu_ratio", [(1.0, 1.0), (10.0, 10.0)])
def test_jacobian_matches_fd(rho_ratio, nu_ratio):
    topo = uniform_topo(2)
    p = default_params(rho_ratio=rho_ratio, nu_ratio=nu_ratio)
    rng = np.random.default_rng(42)
    bc = empty_bc()
    for trial in range(3):
        U_k = random_state(topo, rng)
        U1 = random_state(topo, rng)
        pair = StatePair(U_k, U1, 5e-3)
        J = chns_jacobian(pair, topo, p, bc)
        res = lambda V: chns_residual(StatePair(U_k, V, 5e-3), topo, p, bc)
        assert fd_jacobian_check(res, J, U1, n_directions=3) <= 1e-5


def test_jacobian_matches_fd_clamped_phase():
    # |phi| > 1 regions exercise the saturation chain rule
    topo = uniform_topo(2)
    p = default_params(rho_ratio=10.0, nu_ratio=5.0)
    rng = np.random.default_rng(7)
    U_k = random_state(topo, rng)
    U1 = random_state(topo, rng)
    U1m = U1.reshape(-1, 5)
    U1m[::3, 3] = 1.3          # clamped high
    U1m[1::3, 3] = -1.4        # clamped low
    pair = StatePair(U_k, U1, 5e-3)
    bc = empty_bc()
    J = chns_jacobian(pair, topo, p, bc)
    res = lambda V: chns_residual(StatePair(U_k, V, 5e-3), topo, p, bc)
    assert fd_jacobian_check(res, J, U1, n_directions=3) <= 1e-5


def test_jacobian_matches_fd_with_dirichlet():
    topo = uniform_topo(2)
    p = default_params()
    rng = np.random.default_rng(3)
    bdry = np.nonzero(topo.boundary_flags)[0][:6]
    bc = DirichletSet(bdry, np.zeros(len(bdry), dtype=np.int64),
                      np.zeros(len(bdry)), ndof=5)
    U_k = random_state(topo, rng)
    U1 = random_state(topo, rng)
    pair = StatePair(U_k, U1, 5e-3)
    J = chns_jacobian(pair, topo, p, bc)
    res = lambda V: chns_residual(StatePair(U_k, V, 5e-3), topo, p, bc)
    assert fd_jacobian_check(res, J, U1, n_directions=3) <= 1e-5


def test_jacobian_sparsity_within_adjacency():
    topo = uniform_topo(2)
    p = default_params()
    rng = np.random.default_rng(1)
    U = random_state(topo, rng)
    J = chns_jacobian(StatePair(U, U, 1e-2), topo, p, empty_bc()).tocoo()
    allowed = set()
    for e in range(topo.n_elements):
        nodes = np.unique(topo.parents[e][topo.weights[e] != 0.0])
        for a in nodes:
            for b in nodes:
                allowed.add((int(a), int(b)))
    for r, c in zip(J.row, J.col):
        assert (r // 5, c // 5) in allowed


# ---------------------------------------------------------------------------
# Energy and time-step bound
# ---------------------------------------------------------------------------


def test_energy_gravity_column():
    topo = uniform_topo(3, scale=(2.0, 4.0))
    p = default_params(Cn=1.0, We=1.0, Fr=1.0, Pe=1.0)
    U = make_state(topo, phi=lambda x: np.ones(len(x)))
    assert total_energy(U, topo, p) == pytest.approx(16.0, rel=1e-12)


def test_energy_kinetic_plus_gravity():
    topo = uniform_topo(3)
    p = default_params(Cn=1.0, We=1.0, Fr=1.0, Pe=1.0)
    U = make_state(topo, v0=lambda x: np.ones(len(x)),
                   phi=lambda x: np.ones(len(x)))
    assert total_energy(U, topo, p) == pytest.approx(1.0, rel=1e-12)


def test_energy_interfacial():
    topo = uniform_topo(3)
    p = default_params(Cn=1.0, We=1.0, Pe=1.0, gravity=False)
    U = make_state(topo, phi=lambda x: x[:, 0])
    assert total_energy(U, topo, p) == pytest.approx(2.0 / 15.0 + 0.5,
                                                     rel=1e-12)


def test_timestep_bound_no_motion_is_infinite():
    topo = uniform_topo(2)
    p = default_params(rho_ratio=10.0)
    rng = np.random.default_rng(4)
    U = random_state(topo, rng)
    assert timestep_bound(StatePair(U, U, 1e-2), topo, p) == np.inf


def test_timestep_bound_scaling():
    # midpoint fixed, increments scaled: bound ~ c^(-1/2) when the
    # Lipschitz product term dominates the denominator
    topo = uniform_topo(3)
    p = default_params(rho_ratio=10.0)
    rng = np.random.default_rng(5)
    Um = random_state(topo, rng).reshape(-1, 5)
    Um[:, 3] = 0.5                      # keep P_max fixed at 0.125-ish
    dU = rng.standard_normal(Um.shape)
    dU[:, 3] *= 1e-6                     # tiny phase increment
    bounds = []
    for c in (1.0, 4.0):
        U0 = (Um - 0.5 * c * dU).ravel()
        U1 = (Um + 0.5 * c * dU).ravel()
        bounds.append(timestep_bound(StatePair(U0, U1, 1e-2), topo, p))
    assert bounds[1] == pytest.approx(bounds[0] / 2.0, rel=1e-3)


def test_timestep_bound_positive():
    topo = uniform_topo(2)
    p = default_params(rho_ratio=10.0)
    rng = np.random.default_rng(6)
    U0 = random_state(topo, rng)
    U1 = random_state(topo, rng)
    b = timestep_bound(StatePair(U0, U1, 1e-2), topo, p)
    assert np.isfinite(b) and b > 0.0


# ---------------------------------------------------------------------------
# Evolution identity and trilinear forms
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("rho_ratio", [1.0, 10.0, 1000.0])
def test_evolution_identity_random_fields(rho_ratio):
    topo = uniform_topo(2)
    p = default_params(rho_ratio=rho_ratio)
    rng = np.random.default_rng(8)
    n = topo.n_nodes
    for _ in range(5):
        v0 = rng.standard_normal((n, 2))
        v1 = rng.standard_normal((n, 2))
        ph0 = rng.standard_normal(n)
        ph1 = rng.standard_normal(n)
        assert verify_evolution_identity(v0, v1, ph0, ph1, topo, p) <= 1e-12


def test_evolution_identity_static():
    topo = uniform_topo(2)
    p = default_params(rho_ratio=10.0)
    rng = np.random.default_rng(9)
    n = topo.n_nodes
    v = rng.standard_normal((n, 2))
    ph0 = rng.standard_normal(n)
    ph1 = rng.standard_normal(n)
    assert verify_evolution_identity(v, v, ph0, ph1, topo, p) <= 1e-13


def mms_velocity(x):
    sx, sy = np.sin(np.pi * x[:, 0]), np.sin(np.pi * x[:, 1])
    return np.stack([np.pi * sx ** 2 * np.sin(2 * np.pi * x[:, 1]),
                     -np.pi * np.sin(2 * np.pi * x[:, 0]) * sy ** 2],
                    axis=1)


def test_trilinear_b1_skew_symmetry_vanishes():
    # b1(v, v, v) = 0 for solenoidal v vanishing on the boundary
    topo = uniform_topo(4)
    val = trilinear_b1(mms_velocity, lambda x: np.zeros(len(x)),
                       lambda x: _grad_mms(x), mms_velocity, mms_velocity,
                       lambda x: np.ones(len(x)), topo, nq_axis=6)
    assert abs(val) <= 1e-10


def _grad_mms(x):
    pi = np.pi
    sx, sy = np.sin(pi * x[:, 0]), np.sin(pi * x[:, 1])
    cx, cy = np.cos(pi * x[:, 0]), np.cos(pi * x[:, 1])
    s2x, s2y = np.sin(2 * pi * x[:, 0]), np.sin(2 * pi * x[:, 1])
    c2x, c2y = np.cos(2 * pi * x[:, 0]), np.cos(2 * pi * x[:, 1])
    g = np.zeros((len(x), 2, 2))
    g[:, 0, 0] = pi ** 2 * s2x * s2y
    g[:, 0, 1] = 2 * pi ** 2 * sx ** 2 * c2y
    g[:, 1, 0] = -2 * pi ** 2 * c2x * sy ** 2
    g[:, 1, 1] = -pi ** 2 * s2x * s2y
    return g


def test_trilinear_b2_pairing():
    # b2(w, J, w) = 1/2 boundary flux of |w|^2; zero for w with compact
    # support and any solenoidal J
    topo = uniform_topo(4)
    J_fn = lambda x: np.stack([np.sin(2 * np.pi * x[:, 1]),
                               np.cos(2 * np.pi * x[:, 0])], axis=1)
    val = trilinear_b2(J_fn, lambda x: np.zeros(len(x)),
                       lambda x: _grad_mms(x), mms_velocity, mms_velocity,
                       topo, nq_axis=6)
    assert abs(val) <= 1e-10
