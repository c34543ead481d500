"""Benchmark scenarios and the time-stepping driver.

A :class:`Scenario` bundles everything one run needs: physics numbers,
mesh levels, step sizes, solver tolerances, and output paths.  Built-in
kinds cover the manufactured-solution studies, the two rising-bubble
benchmarks, and the 2D Rayleigh-Taylor channel; ``custom`` starts from
neutral defaults and takes everything from the config.
"""

from __future__ import annotations

import dataclasses
import math
import os
import re
from dataclasses import dataclass, fields
from typing import Callable, Optional, Tuple

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                       # Python < 3.11
    import tomli as tomllib

from . import _umfpack, chns, diagnostics, fem, octmesh
from .chns import Params, StatePair, state_ndof
from .diagnostics import RunLog
from .fem import DirichletSet
from .octmesh import (MeshTopology, Subdomain, apply_remesh, build_tree,
                      build_topology, dump_tree, intergrid_transfer,
                      load_tree, mark_for_remesh, partition)
from .solver import KrylovConfig, NewtonConfig, NonConvergenceError, newton_solve

__all__ = [
    "ConfigError",
    "Scenario",
    "MmsForcing",
    "mms_exact",
    "mms_forcing",
    "atwood",
    "scenario_from_toml",
    "make_scenario",
    "build_mesh",
    "initial_condition",
    "boundary_conditions",
    "run",
    "save_checkpoint",
    "load_checkpoint",
    "parse_quantity",
]

SCENARIO_KINDS = ("mms_temporal", "mms_spatial", "bubble_case1",
                  "bubble_case2", "rt2d", "custom")


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


def parse_quantity(text) -> float:
    """Parse a numeric config value, allowing pi expressions like 'pi/8'."""
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip()
    if not re.fullmatch(r"[0-9eE+\-*/(). ]*(pi)?[0-9eE+\-*/(). ]*"
                        r"(pi)?[0-9eE+\-*/(). ]*", s) or not s:
        raise ConfigError(f"cannot parse numeric value {text!r}")
    try:
        return float(eval(s, {"__builtins__": {}}, {"pi": math.pi}))
    except Exception as exc:
        raise ConfigError(f"cannot parse numeric value {text!r}") from exc


def atwood(rho_ratio: float) -> float:
    """Density-contrast parameter (rho+ - rho-)/(rho+ + rho-)."""
    return (1.0 - 1.0 / rho_ratio) / (1.0 + 1.0 / rho_ratio)


@dataclass
class Scenario:
    """One complete run description; see module docstring."""

    kind: str = "custom"
    # physics
    Re: float = 1.0
    We: float = 1.0
    Cn: float = 0.1
    Pe: float = 0.0                  # 0 -> 1/(3 Cn^2)
    Fr: float = 1.0
    rho_ratio: float = 1.0
    nu_ratio: float = 1.0
    mobility: float = 1.0
    gravity: bool = True
    # geometry / discretization
    domain: Tuple[float, float] = (1.0, 1.0)
    order: int = 1
    level: int = 4                   # uniform refinement depth
    adaptive: bool = False
    l_min: int = 3
    l_interface: int = 5
    band: float = 0.998
    remesh_every: int = 10
    # time stepping
    dt: float = 1e-2
    t_end: float = 0.1
    n_steps: int = 0                 # 0 -> round(t_end / dt)
    # solver
    newton_rtol: float = 1e-6
    newton_atol: float = 1e-8
    newton_stol: float = 1e-12
    newton_max_it: int = 40
    krylov_method: str = "bicgstab"
    krylov_rtol: float = 1e-7
    krylov_atol: float = 1e-12
    krylov_max_it: int = 500
    krylov_restart: int = 50
    n_parts: int = 1
    precond_every: int = 1           # steps between preconditioner rebuilds
    precond: str = "auto"            # auto | lu | ilu
    ilu_drop: float = 0.0            # 0 -> backend default drop tolerance
    ilu_fill: float = 10.0
    chord: bool = False              # freeze the Jacobian within a step
    # output
    out_dir: str = "out"
    vtk_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.t_end <= 0.0 or self.dt <= 0.0:
            raise ConfigError("dt and t_end must be positive")
        if self.order not in (1, 2):
            raise ConfigError("element order must be 1 or 2")
        if self.adaptive and not (0 < self.l_min <= self.l_interface):
            raise ConfigError("need 0 < l_min <= l_interface")
        if self.precond not in ("auto", "lu", "ilu"):
            raise ConfigError("precond must be auto, lu, or ilu")
        self.params()                # let Params invariants fire early

    def params(self) -> Params:
        pe = self.Pe if self.Pe > 0.0 else chns.peclet_from_cahn(self.Cn)
        try:
            return Params(Re=self.Re, We=self.We, Cn=self.Cn, Pe=pe,
                          Fr=self.Fr, rho_ratio=self.rho_ratio,
                          nu_ratio=self.nu_ratio, mobility=self.mobility,
                          gravity=self.gravity)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def newton_config(self) -> NewtonConfig:
        return NewtonConfig(rtol=self.newton_rtol, atol=self.newton_atol,
                            stol=self.newton_stol, max_it=self.newton_max_it)

    def krylov_config(self) -> KrylovConfig:
        return KrylovConfig(method=self.krylov_method, rtol=self.krylov_rtol,
                            atol=self.krylov_atol, max_it=self.krylov_max_it,
                            restart=self.krylov_restart)

    def steps(self) -> int:
        return self.n_steps if self.n_steps > 0 else int(
            round(self.t_end / self.dt))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["domain"] = list(self.domain)
        return d


_DEFAULTS = {
    "mms_temporal": dict(Re=10.0, We=1.0, Cn=1.0, Pe=3.0, Fr=1.0,
                         domain=(1.0, 1.0), order=2, level=6,
                         dt=math.pi / 32, t_end=math.pi, remesh_every=0,
                         newton_rtol=1e-7, krylov_rtol=1e-8),
    "mms_spatial": dict(Re=10.0, We=1.0, Cn=1.0, Pe=3.0, Fr=1.0,
                        domain=(1.0, 1.0), order=1, level=5, dt=1e-3,
                        t_end=0.1, remesh_every=0,
                        newton_rtol=1e-7, krylov_rtol=1e-8),
    "bubble_case1": dict(Re=35.0, We=10.0, Cn=0.02, Fr=1.0, rho_ratio=10.0,
                         nu_ratio=10.0, domain=(2.0, 4.0), order=1,
                         adaptive=True, l_min=4, l_interface=7,
                         dt=2.5e-3, t_end=3.0, remesh_every=10),
    "bubble_case2": dict(Re=35.0, We=125.0, Cn=0.02, Fr=1.0,
                         rho_ratio=1000.0, nu_ratio=100.0,
                         domain=(2.0, 4.0), order=1, adaptive=True,
                         l_min=4, l_interface=7, dt=2.5e-3, t_end=3.0,
                         remesh_every=10),
    "rt2d": dict(Re=1000.0, We=1000.0, Cn=0.01, Fr=1.0, rho_ratio=3.0,
                 nu_ratio=1.0, domain=(1.0, 8.0), order=1, level=9,
                 dt=5e-3, t_end=0.5, remesh_every=0),
    "custom": dict(),
}

_NUMERIC_STRING_OK = {"dt", "t_end", "Re", "We", "Cn", "Pe", "Fr",
                      "rho_ratio", "nu_ratio", "mobility", "band",
                      "newton_rtol", "newton_atol", "newton_stol",
                      "krylov_rtol", "krylov_atol"}


def make_scenario(kind: str = "custom", **overrides) -> Scenario:
    """Scenario from built-in defaults for ``kind`` plus overrides."""
    if kind not in SCENARIO_KINDS:
        raise ConfigError(f"unknown scenario kind {kind!r}")
    cfg = dict(_DEFAULTS[kind])
    cfg.update(overrides)
    return _scenario_from_dict(kind, cfg)


def _scenario_from_dict(kind: str, cfg: dict) -> Scenario:
    names = {f.name for f in fields(Scenario)}
    unknown = set(cfg) - (names - {"kind"})
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    kwargs = {}
    for f in fields(Scenario):
        if f.name == "kind" or f.name not in cfg:
            continue
        v = cfg[f.name]
        if f.name in _NUMERIC_STRING_OK:
            v = parse_quantity(v)
        elif f.name == "domain":
            v = tuple(float(c) for c in v)
            if len(v) != 2:
                raise ConfigError("domain must have two extents")
        elif f.name in ("ilu_drop", "ilu_fill"):
            v = float(v)
        elif f.name in ("gravity", "adaptive", "chord"):
            if not isinstance(v, bool):
                raise ConfigError(f"{f.name} must be a boolean")
        elif f.name in ("krylov_method", "out_dir", "precond"):
            v = str(v)
        else:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{f.name} must be an integer")
            v = int(v)
        kwargs[f.name] = v
    return Scenario(kind=kind, **kwargs)


def scenario_from_toml(path: str, overrides: Optional[dict] = None) -> Scenario:
    """Load a flat TOML config; unknown keys are rejected."""
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    kind = cfg.pop("kind", "custom")
    merged = dict(_DEFAULTS.get(kind, {}))
    merged.update(cfg)
    if overrides:
        merged.update(overrides)
    return _scenario_from_dict(kind, merged)


# ---------------------------------------------------------------------------
# Manufactured solution
# ---------------------------------------------------------------------------


def mms_exact(x: np.ndarray, t: float):
    """Closed-form (v, p, phi, mu) of the 2D manufactured solution."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x1, x2 = x[:, 0], x[:, 1]
    S = math.sin(t)
    sx, sy = np.sin(np.pi * x1), np.sin(np.pi * x2)
    v = np.stack([np.pi * sx ** 2 * np.sin(2 * np.pi * x2) * S,
                  -np.pi * np.sin(2 * np.pi * x1) * sy ** 2 * S], axis=1)
    p = np.cos(np.pi * x1) * sy * S
    phi = np.cos(np.pi * x1) * np.cos(np.pi * x2) * S
    return v, p, phi, phi.copy()


class MmsForcing:
    """Hand-coded momentum and phase sources for the manufactured run.

    The sources are the exact closed-form image of the continuous
    operators applied to :func:`mms_exact`, with the chemical potential
    taken as the one the scheme itself induces from phi (psi'(phi) -
    Cn^2 lap phi), so the unforced potential equation stays consistent.
    """

    def __init__(self, params: Params):
        if abs(params.rho_ratio - 1.0) > 1e-14 or \
                abs(params.nu_ratio - 1.0) > 1e-14:
            raise ConfigError("manufactured forcing assumes matched fluids")
        self.params = params

    def momentum(self, x: np.ndarray, t: float) -> np.ndarray:
        p = self.params
        x = np.atleast_2d(np.asarray(x, dtype=float))
        x1, x2 = x[:, 0], x[:, 1]
        S, C = math.sin(t), math.cos(t)
        pi = np.pi
        sx, cx = np.sin(pi * x1), np.cos(pi * x1)
        sy, cy = np.sin(pi * x2), np.cos(pi * x2)
        s2x, c2x = np.sin(2 * pi * x1), np.cos(2 * pi * x1)
        s2y, c2y = np.sin(2 * pi * x2), np.cos(2 * pi * x2)

        v1 = pi * sx ** 2 * s2y * S
        v2 = -pi * s2x * sy ** 2 * S
        vt1 = pi * sx ** 2 * s2y * C
        vt2 = -pi * s2x * sy ** 2 * C
        g11 = pi ** 2 * s2x * s2y * S
        g12 = 2 * pi ** 2 * sx ** 2 * c2y * S
        g21 = -2 * pi ** 2 * c2x * sy ** 2 * S
        g22 = -pi ** 2 * s2x * s2y * S
        adv1 = v1 * g11 + v2 * g12
        adv2 = v1 * g21 + v2 * g22
        lap1 = 2 * pi ** 3 * s2y * (c2x - 2 * sx ** 2) * S
        lap2 = 2 * pi ** 3 * s2x * (2 * sy ** 2 - c2y) * S
        px = -pi * sx * sy * S
        py = pi * cx * cy * S

        phi = cx * cy * S
        phx = -pi * sx * cy * S
        phy = -pi * cx * sy * S
        phxx = -pi ** 2 * phi
        phyy = -pi ** 2 * phi
        phxy = pi ** 2 * sx * sy * S
        lapphi = -2 * pi ** 2 * phi
        st1 = phxx * phx + phxy * phy + phx * lapphi
        st2 = phxy * phx + phyy * phy + phy * lapphi

        f1 = vt1 + adv1 + (p.Cn / p.We) * st1 + px / p.We - lap1 / p.Re
        f2 = vt2 + adv2 + (p.Cn / p.We) * st2 + py / p.We - lap2 / p.Re
        if p.gravity:
            f1 = f1 - p.ghat[0] / p.Fr
            f2 = f2 - p.ghat[1] / p.Fr
        return np.stack([f1, f2], axis=1)

    def phase(self, x: np.ndarray, t: float) -> np.ndarray:
        p = self.params
        x = np.atleast_2d(np.asarray(x, dtype=float))
        x1, x2 = x[:, 0], x[:, 1]
        S, C = math.sin(t), math.cos(t)
        pi = np.pi
        sx, cx = np.sin(pi * x1), np.cos(pi * x1)
        sy, cy = np.sin(pi * x2), np.cos(pi * x2)

        v1 = pi * sx ** 2 * np.sin(2 * pi * x2) * S
        v2 = -pi * np.sin(2 * pi * x1) * sy ** 2 * S
        phi = cx * cy * S
        pht = cx * cy * C
        phx = -pi * sx * cy * S
        phy = -pi * cx * sy * S
        lapphi = -2 * pi ** 2 * phi
        # induced potential mu = psi'(phi) - Cn^2 lap phi = f(phi) with
        # f(r) = r^3 - r + 2 pi^2 Cn^2 r; lap mu = f''|grad phi|^2 + f' lap phi
        fp = 3 * phi ** 2 - 1 + 2 * pi ** 2 * p.Cn ** 2
        fpp = 6 * phi
        lapmu = fpp * (phx ** 2 + phy ** 2) + fp * lapphi
        return pht + v1 * phx + v2 * phy - p.mobility / (p.Pe * p.Cn) * lapmu


def mms_forcing(x: np.ndarray, t: float, params: Params):
    """(f_momentum, f_phi) of the manufactured run at points x."""
    f = MmsForcing(params)
    return f.momentum(x, t), f.phase(x, t)


def mms_induced_mu(x: np.ndarray, t: float, Cn: float) -> np.ndarray:
    """The chemical potential the scheme converges to for the MMS phi."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    phi = np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]) * math.sin(t)
    return phi ** 3 - phi + 2 * np.pi ** 2 * Cn ** 2 * phi


# ---------------------------------------------------------------------------
# Meshes, initial and boundary conditions
# ---------------------------------------------------------------------------


def _membership(sc: Scenario) -> Optional[Callable]:
    Lx, Ly = sc.domain
    scale = _embedding_scale(sc)
    if abs(Lx - scale) < 1e-14 and abs(Ly - scale) < 1e-14:
        return None                  # domain fills the square
    return lambda x: x[0] <= Lx and x[1] <= Ly


def _embedding_scale(sc: Scenario) -> float:
    s = max(sc.domain)
    return float(2 ** math.ceil(math.log2(s))) if s > 0 else 1.0


def build_mesh(sc: Scenario) -> MeshTopology:
    """Topology for a scenario: uniform, or adaptive around the IC."""
    scale = (_embedding_scale(sc),) * 2
    member = _membership(sc)
    sub = Subdomain(membership=member) if member else None

    def topo_of(tree):
        return build_topology(tree, order=sc.order, subdomain=sub,
                              partition_map=partition(tree, sc.n_parts))

    if not sc.adaptive:
        tree = build_tree(lambda x: 1.0, member, sc.level, sc.level,
                          scale, dim=2)
        return topo_of(tree)

    tree = build_tree(lambda x: 1.0, member, sc.l_min, sc.l_min,
                      scale, dim=2)
    phi_fn = _phi_ic(sc)
    for _ in range(sc.l_interface - sc.l_min + 2):
        topo = topo_of(tree)
        phi = np.array([phi_fn(x) for x in topo.node_coords])
        flags = mark_for_remesh(topo, phi, sc.band, sc.l_interface, sc.l_min)
        if not np.any(flags > 0):
            return topo
        tree = apply_remesh(tree, flags)
    return topo_of(tree)


def _phi_ic(sc: Scenario) -> Callable:
    s = math.sqrt(2.0) / sc.Cn
    if sc.kind in ("bubble_case1", "bubble_case2"):
        return lambda x: math.tanh(s * (math.hypot(x[0] - 1.0, x[1] - 1.0)
                                        - 0.5))
    if sc.kind == "rt2d":
        h0 = 0.5 * sc.domain[1]
        return lambda x: math.tanh(s * (x[1] - h0
                                        - 0.05 * math.cos(2 * math.pi * x[0])))
    return lambda x: 0.0


def initial_condition(sc: Scenario, topology: MeshTopology) -> np.ndarray:
    """Flat initial state: v = 0, p = 0, phi from the scenario profile,
    mu = psi'(phi) - Cn^2 lap phi evaluated analytically."""
    ndof = state_ndof(topology.dim)
    U = np.zeros((topology.n_nodes, ndof))
    X = topology.node_coords
    s = math.sqrt(2.0) / sc.Cn
    Cn2 = sc.Cn ** 2

    if sc.kind.startswith("mms"):
        return U.ravel()             # exact fields vanish at t = 0

    if sc.kind in ("bubble_case1", "bubble_case2"):
        r = np.maximum(np.hypot(X[:, 0] - 1.0, X[:, 1] - 1.0), 1e-12)
        T = np.tanh(s * (r - 0.5))
        sech2 = 1.0 - T ** 2
        lap = -2.0 * s ** 2 * T * sech2 + s * sech2 / r
        U[:, 3] = T
        U[:, 4] = T ** 3 - T - Cn2 * lap
    elif sc.kind == "rt2d":
        h0 = 0.5 * sc.domain[1]
        g = 0.05 * np.cos(2 * np.pi * X[:, 0])
        gp = -0.1 * np.pi * np.sin(2 * np.pi * X[:, 0])
        gpp = -0.2 * np.pi ** 2 * np.cos(2 * np.pi * X[:, 0])
        T = np.tanh(s * (X[:, 1] - h0 - g))
        sech2 = 1.0 - T ** 2
        lap = -2.0 * s ** 2 * T * sech2 * (1.0 + gp ** 2) - s * sech2 * gpp
        U[:, 3] = T
        U[:, 4] = T ** 3 - T - Cn2 * lap
    return U.ravel()


def boundary_conditions(sc: Scenario, topology: MeshTopology) -> DirichletSet:
    """Scenario wall conditions plus a single-node pressure pin.

    Manufactured runs constrain both velocity components on the whole
    boundary (the exact velocity vanishes there); the channel scenarios
    are no-slip on top and bottom and impermeable (v1 = 0) on the sides.
    phi and mu are natural everywhere.
    """
    ndof = state_ndof(topology.dim)
    X = topology.node_coords
    bnd = np.nonzero(topology.boundary_flags)[0]
    nodes, dofs = [], []
    Lx, Ly = sc.domain
    tol = 1e-9
    for n in bnd:
        x, y = X[n]
        on_side = x < tol or x > Lx - tol
        on_wall = y < tol or y > Ly - tol
        if sc.kind.startswith("mms") or on_wall:
            nodes += [n, n]
            dofs += [0, 1]
        elif on_side:
            nodes.append(n)
            dofs.append(0)
    # pressure pin at the node nearest the origin corner
    pin = int(np.argmin(X[:, 0] ** 2 + X[:, 1] ** 2))
    nodes.append(pin)
    dofs.append(topology.dim)
    values = np.zeros(len(nodes))
    return DirichletSet(np.array(nodes), np.array(dofs), values, ndof)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class RunState:
    step: int
    t: float
    U: np.ndarray
    topology: MeshTopology
    mass0: float
    U_prev: Optional[np.ndarray] = None


def save_checkpoint(path: str, sc: Scenario, state: RunState,
                    U_prev: Optional[np.ndarray] = None) -> None:
    text = dump_tree(state.topology.tree)
    extra = {} if U_prev is None else {"U_prev": U_prev}
    np.savez(path, step=state.step, t=state.t, U=state.U,
             mass0=state.mass0,
             tree=np.frombuffer(text.encode(), dtype=np.uint8), **extra)


def load_checkpoint(path: str, sc: Scenario) -> RunState:
    with np.load(path) as z:
        tree_text = bytes(z["tree"]).decode()
        step, t = int(z["step"]), float(z["t"])
        U, mass0 = z["U"].copy(), float(z["mass0"])
        U_prev = z["U_prev"].copy() if "U_prev" in z else None
    scale = (_embedding_scale(sc),) * 2
    member = _membership(sc)
    tree = load_tree(tree_text, scale, 2)
    sub = Subdomain(membership=member) if member else None
    topo = build_topology(tree, order=sc.order, subdomain=sub,
                          partition_map=partition(tree, sc.n_parts))
    return RunState(step, t, U, topo, mass0, U_prev)


def _scenario_forcing(sc: Scenario):
    return MmsForcing(sc.params()) if sc.kind.startswith("mms") else None


class _PrecondCache:
    """Factorized preconditioner reused across time steps.

    Prefers the system UMFPACK LU (symbolic analysis kept across
    refreshes); falls back to SuperLU incomplete LU.  Rebuild happens at
    fixed step indices (every ``precond_every`` steps) from the first
    Jacobian of that step, so a resumed run rebuilds from the same state
    and stays bitwise reproducible.
    """

    def __init__(self, sc: Scenario):
        self.sc = sc
        self.M = None
        self.built_at = -1
        self.step = 0
        self._umf = None

    def invalidate(self):
        self.M = None
        self.built_at = -1

    def __call__(self, A):
        due = (self.M is None
               or self.step - self.built_at >= max(self.sc.precond_every, 1))
        if due:
            self.M = self._build(A)
            self.built_at = self.step
        return self.M

    def _build(self, A):
        # exact LU pays off for the narrow order-1 stencil; the wider
        # order-2 coupling fills much more, but staying near-exact keeps
        # the Krylov iteration count flat, so "auto" still prefers it
        want_lu = self.sc.precond in ("auto", "lu")
        if want_lu and _umfpack.available():
            if self._umf is None:
                self._umf = _umfpack.UmfpackFactor()
            return self._umf.factor(A).solve
        import scipy.sparse.linalg as spl
        drop = self.sc.ilu_drop if self.sc.ilu_drop > 0.0 else 1e-3
        ilu = spl.spilu(A.tocsc(), drop_tol=drop,
                        fill_factor=self.sc.ilu_fill,
                        permc_spec="MMD_AT_PLUS_A",
                        diag_pivot_thresh=0.1,
                        options={"SymmetricMode": True})
        return ilu.solve


def _log_step(sc: Scenario, log: RunLog, csv_fh, state: RunState,
              params: Params, newton_iters: int, linear_iters: int,
              dt_bound: float) -> None:
    topo = state.topology
    Um = state.U.reshape(-1, state_ndof(topo.dim))
    phi = Um[:, topo.dim + 1]
    E = chns.total_energy(state.U, topo, params)
    m = diagnostics.mass(phi, topo)
    try:
        cy = diagnostics.centroid(phi, topo, "light")
    except diagnostics.DegeneratePhaseError:
        cy = math.nan
    try:
        ft, fb = diagnostics.front_positions(phi, topo)
    except (diagnostics.NoInterfaceError, NotImplementedError):
        ft = fb = math.nan
    row = (state.step, state.t, E, m, m - state.mass0, cy, ft, fb,
           newton_iters, linear_iters, dt_bound)
    log.append(*row)
    if csv_fh is not None:
        csv_fh.write(",".join(diagnostics._fmt(v) for v in row) + "\n")
        csv_fh.flush()


def _write_vtk(sc: Scenario, state: RunState) -> None:
    topo = state.topology
    d = topo.dim
    Um = state.U.reshape(-1, state_ndof(d))
    path = os.path.join(sc.out_dir, f"step_{state.step}.vtk")
    fem.write_vtk(path, topo, {"v": Um[:, :d], "p": Um[:, d],
                               "phi": Um[:, d + 1], "mu": Um[:, d + 2]})


def run(sc: Scenario, resume_from: Optional[str] = None,
        max_steps: Optional[int] = None) -> RunLog:
    """Advance a scenario to t_end with Newton-solved midpoint steps.

    Writes the diagnostics CSV continuously to <out_dir>/diagnostics.csv,
    VTK snapshots every ``vtk_every`` steps, and checkpoints every
    ``checkpoint_every`` steps.  On Newton failure the last iterate is
    dumped next to the outputs and the error re-raised.
    """
    os.makedirs(sc.out_dir, exist_ok=True)
    params = sc.params()
    forcing = _scenario_forcing(sc)
    ndof = state_ndof(2)

    if resume_from is not None:
        state = load_checkpoint(resume_from, sc)
        csv_path = os.path.join(sc.out_dir, "diagnostics.csv")
        csv_fh = open(csv_path, "w")
        csv_fh.write(diagnostics.CSV_HEADER + "\n")
    else:
        topo = build_mesh(sc)
        U0 = initial_condition(sc, topo)
        phi0 = U0.reshape(-1, ndof)[:, 3]
        state = RunState(0, 0.0, U0, topo, diagnostics.mass(phi0, topo))
        csv_fh = open(os.path.join(sc.out_dir, "diagnostics.csv"), "w")
        csv_fh.write(diagnostics.CSV_HEADER + "\n")
        if sc.vtk_every > 0:
            _write_vtk(sc, state)

    log = RunLog()
    bc = boundary_conditions(sc, state.topology)
    n_total = sc.steps()
    taken = 0
    cache = _PrecondCache(sc)
    U_prev = getattr(state, "U_prev", None)
    try:
        while state.step < n_total:
            if max_steps is not None and taken >= max_steps:
                break
            topo = state.topology
            U_k = state.U

            t_k = state.t
            if cache is not None:
                cache.step = state.step

            def residual(Unext, U_k=U_k, topo=topo, t_k=t_k):
                pair = StatePair(U_k, Unext, sc.dt, t_k)
                return chns.chns_residual(pair, topo, params, bc, forcing)

            A_frozen = []

            def jacobian(Unext, U_k=U_k, topo=topo, t_k=t_k):
                if sc.chord and A_frozen:
                    return A_frozen[0]
                pair = StatePair(U_k, Unext, sc.dt, t_k)
                A = chns.chns_jacobian(pair, topo, params, bc, forcing)
                if sc.chord:
                    A_frozen.append(A)
                return A

            guess = U_k.copy() if U_prev is None else 2.0 * U_k - U_prev
            try:
                U1, nit, lins = newton_solve(
                    residual, jacobian, guess, sc.newton_config(),
                    sc.krylov_config(), preconditioner_fn=cache,
                    cuts=topo.node_dof_cuts(ndof))
            except NonConvergenceError as exc:
                bad = RunState(state.step, state.t, exc.best, topo,
                               state.mass0)
                save_checkpoint(os.path.join(
                    sc.out_dir, f"abort_step_{state.step}.npz"), sc, bad)
                raise
            pair = StatePair(U_k, U1, sc.dt, state.t)
            dt_bound = chns.timestep_bound(pair, topo, params)
            state = RunState(state.step + 1, state.t + sc.dt, U1, topo,
                             state.mass0)
            U_prev = U_k
            taken += 1
            # a stale preconditioner shows up as creeping Krylov work
            if cache is not None and lins and \
                    sum(lins) / len(lins) > 40:
                cache.invalidate()
            _log_step(sc, log, csv_fh, state, params, nit,
                      int(np.sum(lins)), dt_bound)
            if sc.vtk_every > 0 and state.step % sc.vtk_every == 0:
                _write_vtk(sc, state)
            if sc.checkpoint_every > 0 and \
                    state.step % sc.checkpoint_every == 0:
                save_checkpoint(os.path.join(
                    sc.out_dir, f"checkpoint_{state.step}.npz"), sc, state,
                    U_prev=U_prev)

            if (sc.adaptive and sc.remesh_every > 0
                    and state.step % sc.remesh_every == 0
                    and state.step < n_total):
                state = _remesh(sc, state)
                if state.topology is not topo:
                    bc = boundary_conditions(sc, state.topology)
                    U_prev = None
                    if cache is not None:
                        cache.invalidate()
    finally:
        csv_fh.close()
    log.final_state = state          # for error studies and restarts
    return log


def mms_errors(state: RunState) -> Tuple[float, float]:
    """L2 errors of velocity and phase against the manufactured fields."""
    topo = state.topology
    Um = state.U.reshape(-1, state_ndof(topo.dim))
    err_v = fem.l2_error(Um[:, :2], lambda x, t: mms_exact(x, t)[0],
                         topo, state.t)
    err_phi = fem.l2_error(Um[:, 3], lambda x, t: mms_exact(x, t)[2],
                           topo, state.t)
    return err_v, err_phi


def _remesh(sc: Scenario, state: RunState) -> RunState:
    topo = state.topology
    Um = state.U.reshape(-1, state_ndof(topo.dim))
    flags = mark_for_remesh(topo, Um[:, topo.dim + 1], sc.band,
                            sc.l_interface, sc.l_min)
    if not np.any(flags != 0):
        return state
    tree = apply_remesh(topo.tree, flags)
    if tree.n_retained == 0:
        raise ConfigError("remesh produced an empty tree")
    member = _membership(sc)
    sub = Subdomain(membership=member) if member else None
    new_topo = build_topology(tree, order=sc.order, subdomain=sub,
                              partition_map=partition(tree, sc.n_parts))
    U_new = intergrid_transfer(topo, new_topo, Um).ravel()
    return RunState(state.step, state.t, U_new, new_topo, state.mass0)
