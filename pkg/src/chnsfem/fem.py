"""Tensor-product Lagrange elements and constrained assembly.

Elements are the retained octants of a :class:`~chnsfem.octmesh.Tree`;
they are axis-aligned boxes, so the reference map is a diagonal scaling
and assembly vectorizes over all elements of one refinement level at a
time.  Hanging slots never appear in the global system: gathers fill them
from their constraint weights and scatters redistribute contributions to
the free parents (the element-local congruence C^T A C).

All arithmetic is 64-bit; assembly is single-pass with a fixed reduction
order, so repeated assemblies of identical inputs are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .octmesh import L_MAX, MeshTopology, _slot_offsets

__all__ = [
    "BasisSet",
    "DirichletSet",
    "basis_set",
    "gather_element",
    "scatter_add",
    "assemble",
    "make_csr",
    "apply_dirichlet",
    "interpolate",
    "l2_error",
    "integrate_nodal",
    "boundary_flux",
    "write_vtk",
]

_COO_CHUNK = 512  # elements per scatter chunk (bounds peak memory)


class AssemblyError(RuntimeError):
    """An element kernel produced non-finite values."""


def _shape_1d(order: int, t: np.ndarray):
    """Values, first and second derivatives of the 1D basis on [0,1]."""
    t = np.asarray(t, dtype=float)
    if order == 1:
        N = np.stack([1.0 - t, t], axis=-1)
        dN = np.stack([-np.ones_like(t), np.ones_like(t)], axis=-1)
        d2N = np.zeros_like(N)
    elif order == 2:
        N = np.stack([(1.0 - t) * (1.0 - 2.0 * t),
                      4.0 * t * (1.0 - t),
                      t * (2.0 * t - 1.0)], axis=-1)
        dN = np.stack([4.0 * t - 3.0, 4.0 - 8.0 * t, 4.0 * t - 1.0], axis=-1)
        d2N = np.stack([np.full_like(t, 4.0), np.full_like(t, -8.0),
                        np.full_like(t, 4.0)], axis=-1)
    else:
        raise ValueError("order must be 1 or 2")
    return N, dN, d2N


@dataclass(frozen=True)
class BasisSet:
    """Reference shape data at tensor Gauss points on [0,1]^dim."""

    order: int
    dim: int
    nq_axis: int
    qp: np.ndarray      # (nq, dim) points
    qw: np.ndarray      # (nq,) weights (sum to 1)
    N: np.ndarray       # (nq, nslots)
    dN: np.ndarray      # (nq, nslots, dim) reference derivatives
    d2N: np.ndarray     # (nq, nslots, dim, dim)

    @property
    def n_slots(self) -> int:
        return (self.order + 1) ** self.dim


_BASIS_CACHE: Dict[Tuple[int, int, int], BasisSet] = {}


def basis_set(order: int, dim: int, nq_axis: Optional[int] = None) -> BasisSet:
    """Tensor-product Lagrange basis with (nq_axis)^dim Gauss points.

    The default nq_axis = order + 1 integrates degree 2*order+1 exactly
    per axis.
    """
    if nq_axis is None:
        nq_axis = order + 1
    key = (order, dim, nq_axis)
    if key in _BASIS_CACHE:
        return _BASIS_CACHE[key]
    g, w = np.polynomial.legendre.leggauss(nq_axis)
    g = 0.5 * (g + 1.0)          # map [-1,1] -> [0,1]
    w = 0.5 * w
    ax_vals = _shape_1d(order, g)

    qp_grids = np.meshgrid(*([g] * dim), indexing="ij")
    qp = np.stack([gr.ravel(order="F") for gr in qp_grids], axis=1)
    qw_grids = np.meshgrid(*([w] * dim), indexing="ij")
    qw = np.ones(nq_axis ** dim)
    for gr in qw_grids:
        qw = qw * gr.ravel(order="F")

    offs = _slot_offsets(order, dim)
    nslots = len(offs)
    nq = nq_axis ** dim
    N1, dN1, d2N1 = _shape_1d(order, qp)        # (nq, dim, order+1)
    N = np.ones((nq, nslots))
    dN = np.zeros((nq, nslots, dim))
    d2N = np.zeros((nq, nslots, dim, dim))
    for s in range(nslots):
        val = np.ones(nq)
        for ax in range(dim):
            val = val * N1[:, ax, offs[s, ax]]
        N[:, s] = val
        for a in range(dim):
            dval = np.ones(nq)
            for ax in range(dim):
                f = dN1 if ax == a else N1
                dval = dval * f[:, ax, offs[s, ax]]
            dN[:, s, a] = dval
            for b in range(dim):
                hval = np.ones(nq)
                for ax in range(dim):
                    if a == b:
                        f = d2N1 if ax == a else N1
                    else:
                        f = dN1 if ax in (a, b) else N1
                    hval = hval * f[:, ax, offs[s, ax]]
                d2N[:, s, a, b] = hval
    bs = BasisSet(order, dim, nq_axis, qp, qw, N, dN, d2N)
    _BASIS_CACHE[key] = bs
    return bs


# ---------------------------------------------------------------------------
# Gather / scatter
# ---------------------------------------------------------------------------


def gather_element(U: np.ndarray, topology: MeshTopology, e: int) -> np.ndarray:
    """Local dof values for element e; hanging slots interpolated."""
    vals = U[topology.parents[e]]            # (nslots, kmax, ...)
    w = topology.weights[e]
    if vals.ndim == 3:
        w = w[..., None]
    return (vals * w).sum(axis=1)


def scatter_add(local: np.ndarray, e: int, topology: MeshTopology,
                out) -> None:
    """Accumulate one element's vector or matrix contribution.

    Vector contributions to hanging slots go to the free parents weighted
    by the constraint transpose; matrix contributions apply the congruence
    on both sides.  ``local`` is (nslots, m) / flat, or its square.
    """
    par = topology.parents[e]
    w = topology.weights[e]
    nslots, kmax = par.shape
    loc = np.asarray(local, dtype=float)
    if loc.ndim <= 1 or (loc.ndim == 2 and loc.shape[0] == nslots
                         and loc.shape != (nslots, nslots)):
        loc = loc.reshape(nslots, -1)
        m = loc.shape[1]
        for s in range(nslots):
            for k in range(kmax):
                if w[s, k] != 0.0:
                    out[par[s, k] * m:(par[s, k] + 1) * m] += w[s, k] * loc[s]
    else:
        # dense accumulation into a dict-of-keys style target
        for s in range(nslots):
            for t in range(nslots):
                for k in range(kmax):
                    for l in range(kmax):
                        ww = w[s, k] * w[t, l]
                        if ww != 0.0:
                            out[par[s, k], par[t, l]] += ww * loc[s, t]


@dataclass
class ElementContext:
    """Per-level-group data handed to assembly kernels."""

    topology: MeshTopology
    elems: np.ndarray         # element indices in this group
    level: int
    h: np.ndarray             # (dim,) physical edge lengths
    basis: BasisSet
    dNx: np.ndarray           # (nq, nslots, dim) physical gradients
    d2Nx: np.ndarray          # (nq, nslots, dim, dim) physical 2nd derivs
    qw_detJ: np.ndarray       # (nq,) quadrature weights * volume
    xq: np.ndarray            # (ne_group, nq, dim) physical quad points

    def local(self, U: np.ndarray) -> np.ndarray:
        """Gathered local values for this group: (ne_group, nslots, ...)."""
        vals = U[self.topology.parents[self.elems]]
        w = self.topology.weights[self.elems]
        if vals.ndim == 4:
            w = w[..., None]
        return (vals * w).sum(axis=2)


def _group_context(topology: MeshTopology, basis: BasisSet, level: int,
                   elems: np.ndarray) -> ElementContext:
    h = topology.element_extent(level)
    dNx = basis.dN / h[None, None, :]
    d2Nx = basis.d2N / (h[None, None, :, None] * h[None, None, None, :])
    qw_detJ = basis.qw * float(np.prod(h))
    scale = np.asarray(topology.tree.domain_scale, dtype=float)
    origin = topology.elem_anchors[elems] / float(1 << L_MAX) * scale
    xq = origin[:, None, :] + basis.qp[None, :, :] * h[None, None, :]
    return ElementContext(topology, elems, level, h, basis, dNx, d2Nx,
                          qw_detJ, xq)


def assemble(topology: MeshTopology, kernel: Callable, ndof: int = 1,
             nq_axis: Optional[int] = None,
             want_vector: bool = True, want_matrix: bool = False):
    """Element-loop assembly with constraint congruence.

    ``kernel(ctx)`` returns ``(Fe, Ke)`` for one level group: Fe with shape
    (ne_group, nslots*ndof) or None, Ke with shape
    (ne_group, nslots*ndof, nslots*ndof) or None.  Element visit order is
    the SFC order grouped by level, fixed across calls.
    """
    basis = basis_set(topology.order, topology.dim, nq_axis)
    n = topology.n_nodes * ndof
    F = np.zeros(n) if want_vector else None
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []

    for level, elems in topology.level_groups():
        for start in range(0, len(elems), _COO_CHUNK):
            chunk = elems[start:start + _COO_CHUNK]
            ctx = _group_context(topology, basis, level, chunk)
            Fe, Ke = kernel(ctx)
            if Fe is not None and want_vector:
                if not np.all(np.isfinite(Fe)):
                    bad = chunk[~np.isfinite(Fe).all(axis=1)][0]
                    raise AssemblyError(
                        f"non-finite residual on element {bad}")
                _scatter_vector(topology, chunk, Fe, ndof, F)
            if Ke is not None and want_matrix:
                if not np.all(np.isfinite(Ke)):
                    bad = chunk[~np.isfinite(Ke).all(axis=(1, 2))][0]
                    raise AssemblyError(
                        f"non-finite matrix on element {bad}")
                _scatter_matrix(topology, chunk, Ke, ndof, rows, cols, vals)

    A = None
    if want_matrix:
        A = make_csr(rows, cols, vals, n)
    if want_vector and want_matrix:
        return F, A
    return F if want_vector else A


def _scatter_vector(topology, elems, Fe, ndof, out):
    ne = len(elems)
    nslots, kmax = topology.parents.shape[1:]
    par = topology.parents[elems]            # (ne, nslots, kmax)
    w = topology.weights[elems]
    loc = Fe.reshape(ne, nslots, ndof)
    contrib = w[..., None] * loc[:, :, None, :]      # (ne, nslots, kmax, ndof)
    gdof = (par[..., None] * ndof + np.arange(ndof)[None, None, None, :])
    np.add.at(out, gdof.ravel(), contrib.ravel())


def _scatter_matrix(topology, elems, Ke, ndof, rows, cols, vals):
    nslots, kmax = topology.parents.shape[1:]
    comp = np.arange(ndof)
    for start in range(0, len(elems), _COO_CHUNK):
        sel = slice(start, start + _COO_CHUNK)
        es = elems[sel]
        ne = len(es)
        par = topology.parents[es]
        w = topology.weights[es]
        K = Ke[sel].reshape(ne, nslots, ndof, nslots, ndof)
        # expand constraints on both sides
        V = np.einsum("esk,etl,esitj->eskitlj", w, w, K, optimize=True)
        R = (par[:, :, :, None, None, None, None] * ndof
             + comp[None, None, None, :, None, None, None])
        C = (par[:, None, None, None, :, :, None] * ndof
             + comp[None, None, None, None, None, None, :])
        R, C, V = (np.broadcast_to(R, V.shape).ravel(),
                   np.broadcast_to(C, V.shape).ravel(), V.ravel())
        nz = V != 0.0
        rows.append(R[nz].astype(np.int64))
        cols.append(C[nz].astype(np.int64))
        vals.append(V[nz])


def make_csr(rows, cols, vals, n) -> sp.csr_matrix:
    """Deterministic COO -> CSR with sorted, duplicate-free columns."""
    if isinstance(rows, list):
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        vals = np.concatenate(vals) if vals else np.zeros(0)
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


# ---------------------------------------------------------------------------
# Dirichlet conditions
# ---------------------------------------------------------------------------


@dataclass
class DirichletSet:
    """(node id, dof index, value) triples; ndof fixes the flat layout."""

    nodes: np.ndarray
    dofs: np.ndarray
    values: np.ndarray
    ndof: int

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.dofs = np.asarray(self.dofs, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        flat = self.flat_index()
        if len(np.unique(flat)) != len(flat):
            raise ValueError("duplicate (node, dof) pairs in Dirichlet set")

    def flat_index(self) -> np.ndarray:
        return self.nodes * self.ndof + self.dofs

    def __len__(self):
        return len(self.nodes)


def apply_dirichlet(A: sp.csr_matrix, b: np.ndarray, bc: DirichletSet):
    """Symmetric row/column elimination.

    Constrained rows become identity with b set to the constrained values;
    columns are eliminated into b so the remaining system is unchanged by
    the known values.  Returns ``(A, b)`` (new objects).
    """
    if len(bc) == 0:
        return A.copy(), b.copy()
    n = A.shape[0]
    idx = bc.flat_index()
    if np.any(idx >= n) or np.any(idx < 0):
        raise ValueError("Dirichlet entry outside the free dof range")
    t_full = np.zeros(n)
    t_full[idx] = bc.values
    b = b - A @ t_full
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    A = A.tocoo(copy=True)
    keep = ~(mask[A.row] | mask[A.col])
    rows = np.concatenate([A.row[keep], idx])
    cols = np.concatenate([A.col[keep], idx])
    vals = np.concatenate([A.data[keep], np.ones(len(idx))])
    A2 = make_csr(rows, cols, vals, n)
    b[idx] = bc.values
    return A2, b


# ---------------------------------------------------------------------------
# Interpolation, norms, integrals
# ---------------------------------------------------------------------------


def interpolate(f: Callable, topology: MeshTopology, t: float = 0.0) -> np.ndarray:
    """Nodal values of f(x, t) at the free nodes."""
    try:
        vals = np.asarray(f(topology.node_coords, t), dtype=float)
        if vals.shape[0] == topology.n_nodes:
            return vals
    except (TypeError, ValueError):
        pass
    return np.array([float(f(x, t)) for x in topology.node_coords])


def l2_error(U: np.ndarray, exact: Callable, topology: MeshTopology,
             t: float = 0.0, nq_axis: Optional[int] = None) -> float:
    """sqrt(int (U_h - exact)^2) by element quadrature.

    ``U`` is nodal, (n_nodes,) or (n_nodes, m); ``exact(x, t)`` returns
    matching point values.
    """
    if nq_axis is None:
        nq_axis = topology.order + 2
    basis = basis_set(topology.order, topology.dim, nq_axis)
    U = np.asarray(U, dtype=float)
    flat = U.ndim == 1
    Um = U[:, None] if flat else U
    total = 0.0
    for level, elems in topology.level_groups():
        ctx = _group_context(topology, basis, level, elems)
        loc = ctx.local(Um)                          # (ne, nslots, m)
        uh = np.einsum("qs,esm->eqm", basis.N, loc)
        xq = ctx.xq.reshape(-1, topology.dim)
        ue = np.asarray(exact(xq, t), dtype=float).reshape(uh.shape)
        diff2 = ((uh - ue) ** 2).sum(axis=2)
        total += float(np.einsum("eq,q->", diff2, ctx.qw_detJ))
    return float(np.sqrt(total))


def integrate_nodal(U: np.ndarray, topology: MeshTopology,
                    weight: Optional[Callable] = None) -> float:
    """Integral of the FE field with nodal values U (optionally x-weighted)."""
    basis = basis_set(topology.order, topology.dim)
    total = 0.0
    for level, elems in topology.level_groups():
        ctx = _group_context(topology, basis, level, elems)
        loc = ctx.local(np.asarray(U, dtype=float))
        uh = np.einsum("qs,es->eq", basis.N, loc)
        if weight is not None:
            uh = uh * weight(ctx.xq)
        total += float(np.einsum("eq,q->", uh, ctx.qw_detJ))
    return total


def boundary_flux(U: np.ndarray, topology: MeshTopology,
                  direction: np.ndarray) -> float:
    """Integral of U (direction . n) over the external boundary (2D)."""
    if topology.dim != 2:
        raise NotImplementedError("boundary_flux implemented for 2D")
    r = topology.order
    g, w = np.polynomial.legendre.leggauss(r + 2)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    N1, _, _ = _shape_1d(r, g)                      # (nq, r+1)
    offs = _slot_offsets(r, 2)
    total = 0.0
    for e in range(topology.n_elements):
        lev = int(topology.elem_levels[e])
        h = topology.element_extent(lev)
        loc = gather_element(np.asarray(U, dtype=float), topology, e)
        for ax in range(2):
            for side in (0, 1):
                if topology.o2o[e, 2 * ax + side] != -1:
                    continue
                tang = 1 - ax
                normal = np.zeros(2)
                normal[ax] = 1.0 if side else -1.0
                sel = offs[:, ax] == (r if side else 0)
                order_t = np.argsort(offs[sel, tang])
                trace = loc[sel][order_t]
                uq = N1 @ trace
                total += float((uq * w).sum() * h[tang]
                               * float(direction @ normal))
    return total


# ---------------------------------------------------------------------------
# VTK output
# ---------------------------------------------------------------------------


def write_vtk(path: str, topology: MeshTopology,
              point_fields: Dict[str, np.ndarray]) -> None:
    """Legacy ASCII unstructured-grid snapshot (corner-node cells).

    ``point_fields`` maps array names to nodal data (n_nodes,) or
    (n_nodes, dim); hanging corners are emitted as extra points with
    constraint-interpolated values so cells never dangle.
    """
    dim = topology.dim
    r = topology.order
    offs = _slot_offsets(r, dim)
    corner_slots = [s for s in range(len(offs))
                    if all(o in (0, r) for o in offs[s])]
    # VTK corner order: quad (counterclockwise), hexahedron
    if dim == 2:
        vtk_order = [0, 1, 3, 2]
        cell_type = 9
    else:
        vtk_order = [0, 1, 3, 2, 4, 5, 7, 6]
        cell_type = 12
    corner_slots = [corner_slots[i] for i in vtk_order]

    point_ids: Dict[tuple, int] = {}
    coords: List[np.ndarray] = []
    fields = {name: [] for name in point_fields}
    cells = []
    for e in range(topology.n_elements):
        lev = int(topology.elem_levels[e])
        size = np.int64(1 << (L_MAX - lev))
        base = topology.elem_anchors[e] * r
        conn = []
        for s in corner_slots:
            key = tuple(int(c) for c in base + offs[s] * size)
            pid = point_ids.get(key)
            if pid is None:
                pid = len(point_ids)
                point_ids[key] = pid
                scale = np.asarray(topology.tree.domain_scale, dtype=float)
                coords.append(np.asarray(key, dtype=float)
                              / float(r * (1 << L_MAX)) * scale)
                par = topology.parents[e, s]
                w = topology.weights[e, s]
                for name, data in point_fields.items():
                    data = np.asarray(data, dtype=float)
                    val = (data[par].T @ w).T
                    fields[name].append(np.atleast_1d(val))
            conn.append(pid)
        cells.append(conn)

    npts = len(coords)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("chnsfem snapshot\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {npts} double\n")
        for c in coords:
            xyz = list(c) + [0.0] * (3 - dim)
            fh.write(" ".join(f"{v:.12g}" for v in xyz) + "\n")
        ncell = len(cells)
        ncorner = len(corner_slots)
        fh.write(f"CELLS {ncell} {ncell * (ncorner + 1)}\n")
        for conn in cells:
            fh.write(f"{ncorner} " + " ".join(str(p) for p in conn) + "\n")
        fh.write(f"CELL_TYPES {ncell}\n")
        for _ in cells:
            fh.write(f"{cell_type}\n")
        fh.write(f"POINT_DATA {npts}\n")
        for name, rows_ in fields.items():
            arr = np.asarray(rows_)
            if arr.ndim == 2 and arr.shape[1] > 1:
                fh.write(f"VECTORS {name} double\n")
                for row in arr:
                    xyz = list(row) + [0.0] * (3 - len(row))
                    fh.write(" ".join(f"{v:.12g}" for v in xyz) + "\n")
            else:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for row in arr.reshape(npts):
                    fh.write(f"{row:.12g}\n")
