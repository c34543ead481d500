"""Run observables: energy, mass, centroid, fronts, vorticity, orders.

Everything here is a read-only reduction over a state on a topology;
the CSV schema written by the harness is fixed by :data:`CSV_HEADER`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from . import fem
from .chns import saturate, state_ndof
from .fem import basis_set
from .octmesh import L_MAX, MeshTopology

__all__ = [
    "CSV_HEADER",
    "RunLog",
    "DegeneratePhaseError",
    "NoInterfaceError",
    "mass",
    "mass_drift",
    "centroid",
    "front_positions",
    "convergence_order",
    "vorticity_2d",
]

CSV_HEADER = ("step,time,E_total,mass,mass_drift,centroid_y,front_top,"
              "front_bottom,newton_iters,linear_iters,dt_bound")


class DegeneratePhaseError(RuntimeError):
    pass


class NoInterfaceError(RuntimeError):
    pass


@dataclass
class RunLog:
    """Append-only per-step records matching the CSV schema."""

    rows: List[tuple] = field(default_factory=list)

    def append(self, step, time, E_total, mass_, mass_drift_, centroid_y,
               front_top, front_bottom, newton_iters, linear_iters,
               dt_bound):
        if self.rows and time <= self.rows[-1][1]:
            raise ValueError("log time must be strictly increasing")
        self.rows.append((step, time, E_total, mass_, mass_drift_,
                          centroid_y, front_top, front_bottom,
                          newton_iters, linear_iters, dt_bound))

    def write_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for r in self.rows:
                fh.write(",".join(_fmt(v) for v in r) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def mass(phi: np.ndarray, topology: MeshTopology) -> float:
    """Integral of the order parameter."""
    return fem.integrate_nodal(phi, topology)


def mass_drift(phi_t: np.ndarray, phi_0: np.ndarray,
               topology: MeshTopology) -> float:
    """int phi(t) - int phi(0) on a common topology."""
    return mass(phi_t, topology) - mass(phi_0, topology)


def centroid(phi: np.ndarray, topology: MeshTopology,
             which: str = "light") -> float:
    """Vertical first moment of one phase's smoothed indicator.

    The light phase is phi = -1 (indicator (1 - phi*)/2), the heavy phase
    phi = +1.
    """
    if which not in ("light", "heavy"):
        raise ValueError("which must be 'light' or 'heavy'")
    sign = -1.0 if which == "light" else 1.0
    basis = basis_set(topology.order, topology.dim, topology.order + 2)
    num = 0.0
    den = 0.0
    phi = np.asarray(phi, dtype=float)
    for level, elems in topology.level_groups():
        ctx = fem._group_context(topology, basis, level, elems)
        ph = np.einsum("qs,es->eq", basis.N, ctx.local(phi))
        chi = 0.5 * (1.0 + sign * saturate(ph))
        num += float(np.einsum("eq,eq,q->", chi, ctx.xq[:, :, 1],
                               ctx.qw_detJ))
        den += float(np.einsum("eq,q->", chi, ctx.qw_detJ))
    if den < 1e-12:
        raise DegeneratePhaseError(f"{which} phase absent (mass {den:.2e})")
    return num / den


def front_positions(phi: np.ndarray, topology: MeshTopology):
    """(top, bottom) y-extent of the phi = 0 level set.

    Sign changes are located along the vertical edges of each element by
    linear inverse interpolation of the corner values.
    """
    if topology.dim != 2:
        raise NotImplementedError("front tracking implemented for 2D")
    phi = np.asarray(phi, dtype=float)
    r = topology.order
    from .octmesh import _slot_offsets
    offs = _slot_offsets(r, 2)
    loc = topology.gather(phi)                    # (ne, nslots)
    top = -np.inf
    bottom = np.inf
    scale = np.asarray(topology.tree.domain_scale, dtype=float)
    for level, elems in topology.level_groups():
        h = topology.element_extent(level)
        y0 = (topology.elem_anchors[elems, 1] / float(1 << L_MAX)
              * scale[1])
        for col in range(r + 1):                  # vertical lattice lines
            sel = offs[:, 0] == col
            order_y = np.argsort(offs[sel, 1])
            vals = loc[elems][:, sel][:, order_y]  # (ne, r+1) bottom->top
            for seg in range(r):
                a = vals[:, seg]
                b = vals[:, seg + 1]
                cross = (a == 0.0) | (a * b < 0.0)
                if not np.any(cross):
                    continue
                frac = np.where(a[cross] == b[cross], 0.0,
                                a[cross] / (a[cross] - b[cross]))
                y = y0[cross] + (seg + frac) * h[1] / r
                top = max(top, float(y.max()))
                bottom = min(bottom, float(y.min()))
    if not np.isfinite(top):
        raise NoInterfaceError("order parameter does not change sign")
    return top, bottom


def convergence_order(errors: Sequence[float],
                      spacings: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(spacing)."""
    errors = np.asarray(errors, dtype=float)
    spacings = np.asarray(spacings, dtype=float)
    if len(errors) < 3 or len(errors) != len(spacings):
        raise ValueError("need at least 3 matching samples")
    if np.any(errors <= 0.0) or np.any(spacings <= 0.0):
        raise ValueError("errors and spacings must be positive")
    x = np.log(spacings)
    y = np.log(errors)
    return float(np.polyfit(x, y, 1)[0])


def vorticity_2d(v: np.ndarray, topology: MeshTopology) -> np.ndarray:
    """Lumped-mass nodal projection of dv2/dx1 - dv1/dx2."""
    if topology.dim != 2:
        raise NotImplementedError("vorticity projection is 2D only")
    v = np.asarray(v, dtype=float).reshape(topology.n_nodes, 2)

    def kernel(ctx):
        loc = ctx.local(v)
        g = np.einsum("qsa,esf->eqfa", ctx.dNx, loc)
        w = g[:, :, 1, 0] - g[:, :, 0, 1]
        rhs = np.einsum("q,qs,eq->es", ctx.qw_detJ, ctx.basis.N, w)
        lump = np.einsum("q,qs,eq->es", ctx.qw_detJ, ctx.basis.N,
                         np.ones_like(w))
        return np.stack([rhs, lump], axis=2).reshape(len(ctx.elems), -1), None

    both = fem.assemble(topology, kernel, ndof=2, want_vector=True)
    both = both.reshape(-1, 2)
    return both[:, 0] / both[:, 1]
