"""Hole-aware adaptive quadtrees/octrees with SFC ordering and FE topology.

This module owns everything about the mesh:

- octant keys on a fixed depth-``L_MAX`` integer lattice, with Morton and
  Hilbert space-filling-curve (SFC) orderings,
- top-down tree construction driven by a signed-distance function (corner
  sign test) and a membership predicate that eliminates octants outside the
  computational domain,
- 2:1 balancing over face (and, in 3D, edge) neighbors that never refills
  eliminated regions,
- greedy prefix-sum partitioning of the SFC-sorted octant list,
- the constrained finite-element topology (global node numbering, hanging
  node interpolation weights, boundary flags), and
- remeshing: band marking around the fluid interface, flag application,
  and intergrid transfer of nodal fields.

Trees and topologies are immutable after construction; every operation
returns new objects.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "L_MAX",
    "OctKey",
    "Tree",
    "PartitionMap",
    "Subdomain",
    "MeshTopology",
    "sfc_encode",
    "sfc_decode",
    "build_tree",
    "balance_2to1",
    "partition",
    "build_topology",
    "mark_for_remesh",
    "apply_remesh",
    "intergrid_transfer",
    "dump_tree",
    "load_tree",
]

# Maximum refinement depth per axis.  The anchor lattice has 2^L_MAX cells
# per axis, so a 3D Morton key needs 3*20 = 60 bits and fits in an int64.
L_MAX = 20


class AlignmentError(ValueError):
    """Anchor coordinates are not aligned to the octant's level."""


class BalanceError(ValueError):
    """A topology operation received a tree violating its precondition."""


# ---------------------------------------------------------------------------
# Octant keys and space-filling curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OctKey:
    """One octant: anchor (minimal corner) on the level-L_MAX lattice."""

    anchor: Tuple[int, ...]
    level: int
    dim: int

    def __post_init__(self):
        size = 1 << (L_MAX - self.level)
        for a in self.anchor:
            if a % size != 0:
                raise AlignmentError(
                    f"anchor {self.anchor} not aligned to level {self.level}")

    @property
    def size(self) -> int:
        """Edge length in lattice cells."""
        return 1 << (L_MAX - self.level)


def _morton_encode(cell: Sequence[int], level: int, dim: int) -> int:
    """Bit-interleave ``cell`` (level-local coords), x fastest."""
    idx = 0
    for bit in range(level):
        for ax in range(dim):
            if cell[ax] & (1 << bit):
                idx |= 1 << (bit * dim + ax)
    return idx


def _morton_decode(index: int, level: int, dim: int) -> Tuple[int, ...]:
    cell = [0] * dim
    for bit in range(level):
        for ax in range(dim):
            if index & (1 << (bit * dim + ax)):
                cell[ax] |= 1 << bit
    return tuple(cell)


def _hilbert_encode(cell: Sequence[int], level: int, dim: int) -> int:
    """Hilbert index of a level-local cell (Skilling's transpose method)."""
    if level == 0:
        return 0
    x = list(cell)
    m = 1 << (level - 1)
    q = m
    while q > 1:  # inverse undo of excess work
        p = q - 1
        for i in range(dim):
            if x[i] & q:
                x[0] ^= p
            else:
                t = (x[0] ^ x[i]) & p
                x[0] ^= t
                x[i] ^= t
        q >>= 1
    for i in range(1, dim):  # Gray encode
        x[i] ^= x[i - 1]
    t = 0
    q = m
    while q > 1:
        if x[dim - 1] & q:
            t ^= q - 1
        q >>= 1
    for i in range(dim):
        x[i] ^= t
    # interleave transpose bits, x[0] carrying the most significant bits
    idx = 0
    for bit in range(level):
        for i in range(dim):
            if x[i] & (1 << bit):
                idx |= 1 << (bit * dim + (dim - 1 - i))
    return idx


def _hilbert_decode(index: int, level: int, dim: int) -> Tuple[int, ...]:
    if level == 0:
        return (0,) * dim
    x = [0] * dim
    for bit in range(level):
        for i in range(dim):
            if index & (1 << (bit * dim + (dim - 1 - i))):
                x[i] |= 1 << bit
    n = 1 << level
    t = x[dim - 1] >> 1
    for i in range(dim - 1, 0, -1):  # Gray decode
        x[i] ^= x[i - 1]
    x[0] ^= t
    q = 2
    while q != n:  # undo excess work
        p = q - 1
        for i in range(dim - 1, -1, -1):
            if x[i] & q:
                x[0] ^= p
            else:
                t = (x[0] ^ x[i]) & p
                x[0] ^= t
                x[i] ^= t
        q <<= 1
    return tuple(x)


def sfc_encode(anchor: Sequence[int], level: int, curve: str = "morton",
               dim: Optional[int] = None) -> int:
    """SFC index of an octant, comparable across levels.

    The index is the curve position of the octant's first descendant on the
    level-L_MAX lattice, so sorting by (index, level) gives a depth-first
    traversal with every octant preceding its descendants.
    """
    dim = dim if dim is not None else len(anchor)
    size = 1 << (L_MAX - level)
    for a in anchor:
        if a % size != 0:
            raise AlignmentError(f"anchor {tuple(anchor)} misaligned at level {level}")
    cell = tuple(int(a) >> (L_MAX - level) for a in anchor)
    if curve == "morton":
        idx = _morton_encode(cell, level, dim)
    elif curve == "hilbert":
        idx = _hilbert_encode(cell, level, dim)
    else:
        raise ValueError(f"unknown curve {curve!r}")
    return idx << (dim * (L_MAX - level))


def sfc_decode(index: int, level: int, curve: str = "morton",
               dim: int = 2) -> Tuple[int, ...]:
    """Inverse of :func:`sfc_encode` for a given level."""
    idx = index >> (dim * (L_MAX - level))
    if curve == "morton":
        cell = _morton_decode(idx, level, dim)
    elif curve == "hilbert":
        cell = _hilbert_decode(idx, level, dim)
    else:
        raise ValueError(f"unknown curve {curve!r}")
    return tuple(c << (L_MAX - level) for c in cell)


def _sort_key(level: int, anchor: Sequence[int], curve: str, dim: int):
    return (sfc_encode(anchor, level, curve, dim), level)


# ---------------------------------------------------------------------------
# Tree
# ---------------------------------------------------------------------------


@dataclass
class Tree:
    """Sorted hole-aware octant list.

    ``levels``/``anchors``/``retained`` cover every leaf, including
    eliminated ones (holes); the arrays are sorted in SFC order.
    """

    dim: int
    levels: np.ndarray
    anchors: np.ndarray
    retained: np.ndarray
    domain_scale: Tuple[float, ...]
    curve: str = "morton"

    l_max: int = L_MAX

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64)
        self.anchors = np.asarray(self.anchors, dtype=np.int64).reshape(
            len(self.levels), self.dim)
        self.retained = np.asarray(self.retained, dtype=bool)

    @property
    def n_octants(self) -> int:
        return len(self.levels)

    @property
    def n_retained(self) -> int:
        return int(self.retained.sum())

    @property
    def octants(self) -> List[OctKey]:
        return [OctKey(tuple(int(c) for c in a), int(l), self.dim)
                for l, a in zip(self.levels, self.anchors)]

    def retained_volume(self) -> float:
        """Total physical volume of the retained octants."""
        cell = np.prod(np.asarray(self.domain_scale)) / float((1 << L_MAX) ** self.dim)
        sizes = (np.int64(1) << (L_MAX - self.levels[self.retained])).astype(float)
        return float(np.sum(sizes ** self.dim) * cell)

    def physical(self, lattice: np.ndarray) -> np.ndarray:
        """Map lattice coordinates to physical coordinates."""
        scale = np.asarray(self.domain_scale, dtype=float)
        return np.asarray(lattice, dtype=float) / float(1 << L_MAX) * scale


def _sorted_tree(dim, leaves, domain_scale, curve) -> Tree:
    """Build a Tree from (level, anchor, retained) triples."""
    leaves = sorted(leaves, key=lambda t: _sort_key(t[0], t[1], curve, dim))
    levels = np.array([t[0] for t in leaves], dtype=np.int64)
    anchors = np.array([t[1] for t in leaves], dtype=np.int64).reshape(len(leaves), dim)
    retained = np.array([t[2] for t in leaves], dtype=bool)
    return Tree(dim, levels, anchors, retained, tuple(domain_scale), curve)


def _children(level: int, anchor: Sequence[int], dim: int):
    half = 1 << (L_MAX - level - 1)
    for offs in itertools.product((0, 1), repeat=dim):
        # x-fastest child order: offs reversed so axis 0 varies fastest
        yield level + 1, tuple(anchor[ax] + offs[dim - 1 - ax] * half
                               for ax in range(dim))


def build_tree(distance_fn: Callable, membership_fn: Optional[Callable],
               l_interface: int, l_min: int,
               domain_scale: Sequence[float], dim: int = 2,
               curve: str = "morton") -> Tree:
    """Top-down tree construction by corner sign testing.

    Octants whose 2^d corners all have ``distance_fn > 0`` are retained
    unrefined (once deeper than ``l_min``); all-negative octants are
    eliminated; mixed-sign octants refine until ``l_interface``.  Leaves
    whose center fails ``membership_fn`` are eliminated; geometry boundaries
    should therefore align with the level-``l_min`` lattice.
    """
    if not (0 <= l_min <= l_interface <= L_MAX):
        raise ValueError("need 0 <= l_min <= l_interface <= L_MAX")
    scale = np.asarray(domain_scale, dtype=float)
    member = membership_fn if membership_fn is not None else (lambda x: True)

    leaves = []
    stack = [(0, (0,) * dim)]
    while stack:
        level, anchor = stack.pop()
        size = 1 << (L_MAX - level)
        corners = [tuple((np.array(anchor) + np.array(offs) * size)
                         / float(1 << L_MAX) * scale)
                   for offs in itertools.product((0, 1), repeat=dim)]
        dvals = [float(distance_fn(np.array(c))) for c in corners]
        if all(d < 0.0 for d in dvals):
            leaves.append((level, tuple(anchor), False))
            continue
        if all(d > 0.0 for d in dvals):
            target = l_min
        else:
            target = l_interface
        if level < target:
            stack.extend(_children(level, anchor, dim))
        else:
            center = tuple((np.array(anchor) + 0.5 * size)
                           / float(1 << L_MAX) * scale)
            leaves.append((level, tuple(anchor), bool(member(np.array(center)))))
    return _sorted_tree(dim, leaves, domain_scale, curve)


# ---------------------------------------------------------------------------
# 2:1 balance
# ---------------------------------------------------------------------------


def _neighbor_dirs(dim: int):
    """Face directions, plus edge directions in 3D."""
    dirs = []
    for ax in range(dim):
        for s in (-1, 1):
            d = [0] * dim
            d[ax] = s
            dirs.append(tuple(d))
    if dim == 3:
        for ax_pair in itertools.combinations(range(3), 2):
            for s0 in (-1, 1):
                for s1 in (-1, 1):
                    d = [0, 0, 0]
                    d[ax_pair[0]] = s0
                    d[ax_pair[1]] = s1
                    dirs.append(tuple(d))
    return dirs


def _covering_leaf(cell: Tuple[int, ...], max_level: int, leaf_levels: Dict):
    """Find the leaf covering the given lattice cell, or None.

    ``leaf_levels`` maps level -> set of anchors present at that level.
    Searches from ``max_level`` upward (coarser); leaves are disjoint so the
    first hit is the unique covering leaf at level <= max_level.
    """
    for lev in range(max_level, -1, -1):
        if lev not in leaf_levels:
            continue
        mask = ~((1 << (L_MAX - lev)) - 1)
        anc = tuple(c & mask for c in cell)
        if anc in leaf_levels[lev]:
            return lev, anc
    return None


def balance_2to1(tree: Tree) -> Tree:
    """Enforce 2:1 balance among retained octants (refinement only).

    Face neighbors are balanced in 2D; face and edge neighbors in 3D.
    Octants are never created inside eliminated regions: directions whose
    neighbor cell has no retained covering leaf are skipped.
    """
    dim = tree.dim
    dirs = _neighbor_dirs(dim)
    top = 1 << L_MAX

    retained = {}
    eliminated = []
    for lev, anc, ret in zip(tree.levels, tree.anchors, tree.retained):
        key = (int(lev), tuple(int(c) for c in anc))
        if ret:
            retained[key] = True
        else:
            eliminated.append(key)

    by_level: Dict[int, set] = {}
    for lev, anc in retained:
        by_level.setdefault(lev, set()).add(anc)

    queue = list(retained.keys())
    while queue:
        lev, anc = queue.pop()
        if anc not in by_level.get(lev, ()):
            continue  # was split since being enqueued
        size = 1 << (L_MAX - lev)
        for d in dirs:
            cell = tuple(anc[ax] + d[ax] * size for ax in range(dim))
            if any(c < 0 or c >= top for c in cell):
                continue
            hit = _covering_leaf(cell, lev, by_level)
            if hit is None:
                continue  # finer neighborhood or eliminated region
            nlev, nanc = hit
            if nlev < lev - 1:
                # split the coarse neighbor one level
                by_level[nlev].discard(nanc)
                del retained[(nlev, nanc)]
                for clev, canc in _children(nlev, nanc, dim):
                    retained[(clev, canc)] = True
                    by_level.setdefault(clev, set()).add(canc)
                    queue.append((clev, canc))
                queue.append((lev, anc))  # recheck this direction
    leaves = [(lev, anc, True) for lev, anc in retained]
    leaves += [(lev, anc, False) for lev, anc in eliminated]
    return _sorted_tree(dim, leaves, tree.domain_scale, tree.curve)


def is_balanced(tree: Tree) -> bool:
    """Brute-force all-pairs 2:1 check (test oracle; O(n^2))."""
    dim = tree.dim
    keys = [(int(l), tuple(int(c) for c in a))
            for l, a, r in zip(tree.levels, tree.anchors, tree.retained) if r]
    for i, (la, aa) in enumerate(keys):
        sa = 1 << (L_MAX - la)
        for lb, ab in keys[i + 1:]:
            if abs(la - lb) <= 1:
                continue
            sb = 1 << (L_MAX - lb)
            # octants share a face/edge/corner if closed ranges touch on
            # every axis; those with touching closures and level gap > 1
            # violate balance when they share at least a point
            touch = all(aa[ax] <= ab[ax] + sb and ab[ax] <= aa[ax] + sa
                        for ax in range(dim))
            if not touch:
                continue
            # count axes of genuine overlap (not mere point contact)
            overlap = sum(1 for ax in range(dim)
                          if min(aa[ax] + sa, ab[ax] + sb) > max(aa[ax], ab[ax]))
            codim = dim - overlap
            if codim == 1 or (dim == 3 and codim == 2):
                return False
    return True


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


@dataclass
class PartitionMap:
    """Contiguous SFC slices: slice i is octants[cuts[i]:cuts[i+1]]."""

    cuts: np.ndarray
    weights: np.ndarray

    @property
    def n_parts(self) -> int:
        return len(self.cuts) - 1


def partition(tree: Tree, p: int,
              weight_fn: Optional[Callable] = None) -> PartitionMap:
    """Greedy prefix-sum cuts of the SFC-sorted octant list into p slices.

    Each cut is placed at the smallest prefix reaching its proportional
    weight target, which bounds every slice by total/p plus one octant's
    weight.  Default weights: 1 per retained octant, 0 per eliminated.
    """
    if p < 1:
        raise ValueError("partition count must be >= 1")
    n = tree.n_octants
    if weight_fn is None:
        weights = tree.retained.astype(float)
    else:
        weights = np.array([
            float(weight_fn(OctKey(tuple(int(c) for c in a), int(l), tree.dim)))
            if r else 0.0
            for l, a, r in zip(tree.levels, tree.anchors, tree.retained)])
    if np.any(weights < 0):
        raise ValueError("octant weights must be non-negative")
    total = float(weights.sum())
    cum = np.cumsum(weights)
    cuts = [0]
    for i in range(1, p):
        target = total * i / p
        k = int(np.searchsorted(cum, target, side="left")) + 1
        k = min(max(k, cuts[-1]), n)
        cuts.append(k)
    cuts.append(n)
    return PartitionMap(np.array(cuts, dtype=np.int64), weights)


# ---------------------------------------------------------------------------
# FE topology
# ---------------------------------------------------------------------------


@dataclass
class Subdomain:
    """Membership predicate plus the derived per-node boundary flags."""

    membership: Optional[Callable] = None
    node_flags: Optional[np.ndarray] = None


@dataclass
class MeshTopology:
    """Constrained finite-element topology over a tree's retained octants.

    ``o2n`` maps element slots to free-node ids (−1 for hanging slots).
    ``parents``/``weights`` give, for every slot, the free nodes and
    interpolation weights reproducing its value (free slots carry themselves
    with weight 1); hanging slots interpolate the coarse-side trace.
    """

    tree: Tree
    order: int
    n_nodes: int
    node_coords: np.ndarray        # (n_nodes, dim) physical
    node_keys: np.ndarray          # (n_nodes, dim) lattice, scaled by order
    o2n: np.ndarray                # (ne, nslots) free id or -1
    parents: np.ndarray            # (ne, nslots, kmax) free ids
    weights: np.ndarray            # (ne, nslots, kmax)
    o2o: np.ndarray                # (ne, 2*dim) neighbor elem, -1 none, -2 finer
    boundary_flags: np.ndarray     # (n_nodes,) bool, external boundary
    elem_levels: np.ndarray        # (ne,)
    elem_anchors: np.ndarray       # (ne, dim)
    partition_of: np.ndarray       # (ne,)
    node_part: np.ndarray          # (n_nodes,)
    subdomain: Subdomain = field(default_factory=Subdomain)

    @property
    def dim(self) -> int:
        return self.tree.dim

    @property
    def n_elements(self) -> int:
        return len(self.elem_levels)

    @property
    def n_slots(self) -> int:
        return (self.order + 1) ** self.dim

    @property
    def n_hanging(self) -> int:
        return int((self.o2n < 0).sum())

    def level_groups(self):
        """Element index arrays grouped by refinement level."""
        groups = []
        for lev in np.unique(self.elem_levels):
            groups.append((int(lev), np.nonzero(self.elem_levels == lev)[0]))
        return groups

    def element_extent(self, level: int) -> np.ndarray:
        """Physical edge lengths of a level-``level`` element, per axis."""
        scale = np.asarray(self.tree.domain_scale, dtype=float)
        return scale / float(1 << level)

    def node_dof_cuts(self, ndof: int) -> np.ndarray:
        """Dof-range cuts for the partition-blocked preconditioner."""
        p = int(self.partition_of.max()) + 1 if self.n_elements else 1
        cuts = [0]
        for i in range(1, p):
            cuts.append(int(np.searchsorted(self.node_part, i, side="left")))
        cuts.append(self.n_nodes)
        return np.array(cuts, dtype=np.int64) * ndof

    def gather(self, U: np.ndarray) -> np.ndarray:
        """Element-local values (ne, nslots, ...) from free-node values."""
        vals = U[self.parents]                      # (ne, nslots, kmax, ...)
        w = self.weights
        if vals.ndim == 4:
            w = w[..., None]
        return (vals * w).sum(axis=2)


def _slot_offsets(order: int, dim: int) -> np.ndarray:
    """Local slot lattice offsets, x fastest; shape (nslots, dim)."""
    ranges = [np.arange(order + 1)] * dim
    grids = np.meshgrid(*ranges, indexing="ij")
    # meshgrid 'ij' makes the last axis vary fastest when raveled in C
    # order with axes reversed; build explicitly so axis 0 is fastest.
    offs = np.stack([g.ravel(order="F") for g in grids], axis=1)
    return offs.astype(np.int64)


def build_topology(tree: Tree, order: int = 1,
                   subdomain: Optional[Subdomain] = None,
                   partition_map: Optional[PartitionMap] = None) -> MeshTopology:
    """Global node numbering, hanging constraints, and boundary flags.

    Nodes are numbered in order of first appearance along the SFC element
    traversal, which keeps partition dof ranges contiguous.  Hanging
    constraints (order 1 only) carry the linear coarse-face trace; order-2
    topologies require a conforming (uniform) tree.
    """
    dim, curve = tree.dim, tree.curve
    ret = tree.retained
    elem_levels = tree.levels[ret].copy()
    elem_anchors = tree.anchors[ret].copy()
    ne = len(elem_levels)
    if ne == 0:
        raise ValueError("tree has no retained octants")

    if order == 2 and len(np.unique(elem_levels)) > 1:
        raise ValueError("order-2 elements require a conforming (uniform) tree")
    if order not in (1, 2):
        raise ValueError("element order must be 1 or 2")

    by_level: Dict[int, set] = {}
    elem_index: Dict[Tuple[int, Tuple[int, ...]], int] = {}
    for e in range(ne):
        lev = int(elem_levels[e])
        anc = tuple(int(c) for c in elem_anchors[e])
        by_level.setdefault(lev, set()).add(anc)
        elem_index[(lev, anc)] = e

    # 2:1 precondition: probe every face/edge neighbor; the leaf covering
    # it may be at most one level coarser
    top = 1 << L_MAX
    for e in range(ne):
        lev = int(elem_levels[e])
        if lev < 2:
            continue
        anc = tuple(int(c) for c in elem_anchors[e])
        size = 1 << (L_MAX - lev)
        for d in _neighbor_dirs(dim):
            probe = tuple(a + (size if s > 0 else (-1 if s < 0 else 0))
                          for a, s in zip(anc, d))
            if any(c < 0 or c >= top for c in probe):
                continue
            hit = _covering_leaf(probe, lev - 2, by_level)
            if hit is not None:
                raise BalanceError(
                    f"octant level {lev} at {anc} abuts level {hit[0]} "
                    f"at {hit[1]}; run balance_2to1 first")

    offs = _slot_offsets(order, dim)
    nslots = len(offs)
    sizes = (np.int64(1) << (L_MAX - elem_levels))
    # slot keys on the order-scaled lattice
    keys = (elem_anchors[:, None, :] * order
            + offs[None, :, :] * sizes[:, None, None])

    top = 1 << L_MAX
    max_lev = int(elem_levels.max())

    def covering_elem(cell):
        hit = _covering_leaf(cell, max_lev, by_level)
        if hit is None:
            return None
        return elem_index[hit]

    # hanging classification: a slot point is hanging iff some retained
    # element contains it geometrically without owning it as a slot
    leaf_cache: Dict[Tuple[int, ...], Optional[int]] = {}
    hanging: Dict[Tuple[int, ...], Tuple[List[Tuple[int, ...]], List[float]]] = {}
    if order == 1 and len(by_level) > 1:
        unique_keys = {}
        for e in range(ne):
            for s in range(nslots):
                unique_keys.setdefault(tuple(int(c) for c in keys[e, s]), None)
        for P in unique_keys:
            coarse = None
            for side in itertools.product((0, 1), repeat=dim):
                cell = tuple(P[ax] - side[ax] for ax in range(dim))
                if any(c < 0 or c >= top for c in cell):
                    continue
                if cell in leaf_cache:
                    eidx = leaf_cache[cell]
                else:
                    eidx = covering_elem(cell)
                    leaf_cache[cell] = eidx
                if eidx is None:
                    continue
                lev = int(elem_levels[eidx])
                size = 1 << (L_MAX - lev)
                anc = elem_anchors[eidx]
                rel = [P[ax] - int(anc[ax]) for ax in range(dim)]
                if all(r == 0 or r == size for r in rel):
                    continue  # P is a corner slot of this element
                if coarse is None or lev < coarse[0]:
                    coarse = (lev, tuple(int(c) for c in anc))
            if coarse is not None:
                lev, anc = coarse
                size = 1 << (L_MAX - lev)
                par_keys = [()]
                par_wts = [1.0]
                for ax in range(dim):
                    t = (P[ax] - anc[ax]) / size
                    if t == 0.0 or t == 1.0:
                        choices = [(anc[ax] + int(t) * size, 1.0)]
                    else:
                        choices = [(anc[ax], 1.0 - t), (anc[ax] + size, t)]
                    par_keys = [pk + (c,) for pk in par_keys for c, _ in choices]
                    par_wts = [pw * w for pw in par_wts for _, w in choices]
                hanging[P] = (par_keys, par_wts)

    # partition ids per retained element
    if partition_map is None:
        partition_of = np.zeros(ne, dtype=np.int64)
    else:
        oct_part = np.zeros(tree.n_octants, dtype=np.int64)
        for i in range(partition_map.n_parts):
            oct_part[partition_map.cuts[i]:partition_map.cuts[i + 1]] = i
        partition_of = oct_part[np.nonzero(ret)[0]]

    # number free nodes at first appearance along the SFC traversal
    node_id: Dict[Tuple[int, ...], int] = {}
    node_part_list: List[int] = []
    o2n = np.full((ne, nslots), -1, dtype=np.int64)
    for e in range(ne):
        for s in range(nslots):
            P = tuple(int(c) for c in keys[e, s])
            if P in hanging:
                continue
            nid = node_id.get(P)
            if nid is None:
                nid = len(node_id)
                node_id[P] = nid
                node_part_list.append(int(partition_of[e]))
            o2n[e, s] = nid
    n_nodes = len(node_id)

    kmax = 1
    for par_keys, _ in hanging.values():
        kmax = max(kmax, len(par_keys))
    parents = np.zeros((ne, nslots, kmax), dtype=np.int64)
    weights = np.zeros((ne, nslots, kmax), dtype=float)
    for e in range(ne):
        for s in range(nslots):
            nid = o2n[e, s]
            if nid >= 0:
                parents[e, s, :] = nid
                weights[e, s, 0] = 1.0
            else:
                P = tuple(int(c) for c in keys[e, s])
                par_keys, par_wts = hanging[P]
                ids = []
                for pk in par_keys:
                    pid = node_id.get(pk)
                    if pid is None:
                        raise BalanceError(
                            "hanging constraint parent is itself constrained; "
                            "tree is not 2:1 balanced")
                    ids.append(pid)
                parents[e, s, :len(ids)] = ids
                parents[e, s, len(ids):] = ids[0]
                weights[e, s, :len(ids)] = par_wts

    node_keys = np.zeros((n_nodes, dim), dtype=np.int64)
    for P, nid in node_id.items():
        node_keys[nid] = P
    scale = np.asarray(tree.domain_scale, dtype=float)
    node_coords = node_keys / float(order * (1 << L_MAX)) * scale

    # face neighbors and boundary flags
    o2o = np.full((ne, 2 * dim), -1, dtype=np.int64)
    boundary = np.zeros(n_nodes, dtype=bool)
    for e in range(ne):
        lev = int(elem_levels[e])
        size = 1 << (L_MAX - lev)
        anc = elem_anchors[e]
        for ax in range(dim):
            for side in (0, 1):
                f = 2 * ax + side
                cell = [int(c) for c in anc]
                cell[ax] += size if side else -1
                if cell[ax] < 0 or cell[ax] >= top:
                    nb = None
                else:
                    ck = tuple(cell)
                    if ck in leaf_cache:
                        nb = leaf_cache[ck]
                    else:
                        nb = covering_elem(ck)
                        leaf_cache[ck] = nb
                    if nb is None and _covering_finer(ck, by_level, max_lev, lev):
                        o2o[e, f] = -2
                        continue
                if nb is None:
                    # external boundary: flag free slots on this face
                    face_val = order if side else 0
                    for s in range(nslots):
                        if offs[s, ax] == face_val and o2n[e, s] >= 0:
                            boundary[o2n[e, s]] = True
                else:
                    o2o[e, f] = nb
    node_part = np.asarray(node_part_list, dtype=np.int64)

    sub = subdomain if subdomain is not None else Subdomain()
    sub = Subdomain(sub.membership, boundary.copy())

    return MeshTopology(tree, order, n_nodes, node_coords, node_keys, o2n,
                        parents, weights, o2o, boundary, elem_levels,
                        elem_anchors, partition_of, node_part, sub)


def _covering_finer(cell, by_level, max_lev, lev):
    """True if the unit cell lies under finer retained octants."""
    for fl in range(lev + 1, max_lev + 1):
        if fl not in by_level:
            continue
        mask = ~((1 << (L_MAX - fl)) - 1)
        if tuple(c & mask for c in cell) in by_level[fl]:
            return True
    return False


# ---------------------------------------------------------------------------
# Remeshing
# ---------------------------------------------------------------------------


def mark_for_remesh(topology: MeshTopology, phi: np.ndarray, band: float,
                    l_interface: int, l_min: int) -> np.ndarray:
    """Per-element flags: +1 refine, −1 coarsen, 0 keep.

    Elements with any nodal |φ| below ``band`` head for ``l_interface``;
    elements entirely outside the band head toward ``l_min``.  Refinement
    and coarsening both proceed one level per remesh event (coarsening is
    clamped to avoid interpolation shocks; the band is wide enough that one
    level per event tracks the interface).
    """
    local = topology.gather(np.asarray(phi, dtype=float))
    min_abs = np.abs(local).min(axis=1)
    flags = np.zeros(topology.n_elements, dtype=np.int64)
    levels = topology.elem_levels
    flags[(min_abs < band) & (levels < l_interface)] = 1
    flags[(min_abs >= band) & (levels > l_min)] = -1

    # keep coarsen flags only on complete sibling groups whose merge the
    # re-balance would not immediately undo, so a mesh that cannot change
    # is flagged all-keep
    dim = topology.dim
    anchors = topology.elem_anchors
    nchild = 1 << dim
    top = 1 << L_MAX
    by_level: Dict[int, set] = {}
    for lev, anc in zip(levels, anchors):
        by_level.setdefault(int(lev), set()).add(
            tuple(int(c) for c in anc))
    max_lev = int(levels.max())

    def merge_vetoed(lev, panc):
        # a neighbor leaf at level > lev makes the lev-1 parent violate 2:1
        psize = 1 << (L_MAX - lev + 1)
        csize = psize >> 2
        for d in _neighbor_dirs(dim):
            tang = [range(0, psize, csize) if s == 0
                    else (psize if s > 0 else -1,)
                    for s in d]
            for offs in itertools.product(*tang):
                probe = tuple(a + o for a, o in zip(panc, offs))
                if any(c < 0 or c >= top for c in probe):
                    continue
                hit = _covering_leaf(probe, max_lev, by_level)
                if hit is not None and hit[0] > lev:
                    return True
        return False

    e = 0
    ne = topology.n_elements
    while e < ne:
        if flags[e] >= 0:
            e += 1
            continue
        lev = int(levels[e])
        psize = 1 << (L_MAX - lev + 1)
        panc = tuple(int(a) & ~(psize - 1) for a in anchors[e])
        group = list(range(e, min(e + nchild, ne)))
        expected = {c for _, c in _children(lev - 1, panc, dim)}
        ok = (len(group) == nchild
              and all(int(levels[g]) == lev for g in group)
              and {tuple(int(c) for c in anchors[g]) for g in group}
              == expected
              and all(flags[g] < 0 for g in group)
              and not merge_vetoed(lev, panc))
        if ok:
            e += nchild
        else:
            flags[e] = 0
            e += 1
    return flags


def apply_remesh(tree: Tree, flags: np.ndarray) -> Tree:
    """Apply refine/coarsen flags and re-balance.

    Refinement splits an octant into its 2^d children.  Coarsening merges a
    complete sibling group only when every sibling is retained, flagged for
    coarsening, and at the same level.  The result is re-balanced (which may
    undo a coarsening that would violate 2:1).
    """
    dim = tree.dim
    ret_idx = np.nonzero(tree.retained)[0]
    flags = np.asarray(flags)
    if len(flags) != len(ret_idx):
        raise ValueError("flags length must match retained octant count")

    leaves = []
    items = [(int(tree.levels[i]), tuple(int(c) for c in tree.anchors[i]))
             for i in ret_idx]
    nchild = 1 << dim
    i = 0
    while i < len(items):
        lev, anc = items[i]
        f = flags[i]
        if f > 0:
            leaves.extend((cl, ca, True) for cl, ca in _children(lev, anc, dim))
            i += 1
            continue
        if f < 0 and lev > 0:
            psize = 1 << (L_MAX - lev + 1)
            panc = tuple(a & ~(psize - 1) for a in anc)
            group = items[i:i + nchild]
            expected = {c for _, c in _children(lev - 1, panc, dim)}
            if (len(group) == nchild
                    and all(l == lev for l, _ in group)
                    and {a for _, a in group} == expected
                    and all(flags[i + j] < 0 for j in range(nchild))):
                leaves.append((lev - 1, panc, True))
                i += nchild
                continue
        leaves.append((lev, anc, True))
        i += 1

    for idx in np.nonzero(~tree.retained)[0]:
        leaves.append((int(tree.levels[idx]),
                       tuple(int(c) for c in tree.anchors[idx]), False))
    return balance_2to1(_sorted_tree(dim, leaves, tree.domain_scale, tree.curve))


def _lagrange_1d(order: int, t: float) -> np.ndarray:
    """Order-r Lagrange basis on [0,1] with equispaced nodes, at t."""
    if order == 1:
        return np.array([1.0 - t, t])
    return np.array([(1.0 - t) * (1.0 - 2.0 * t),
                     4.0 * t * (1.0 - t),
                     t * (2.0 * t - 1.0)])


def _tensor_basis_at(order: int, dim: int, ts: Sequence[float]) -> np.ndarray:
    """Tensor-product basis values at local coords ts (x fastest)."""
    per_ax = [_lagrange_1d(order, float(t)) for t in ts]
    offs = _slot_offsets(order, dim)
    out = np.ones(len(offs))
    for s in range(len(offs)):
        v = 1.0
        for ax in range(dim):
            v *= per_ax[ax][offs[s, ax]]
        out[s] = v
    return out


def intergrid_transfer(old: MeshTopology, new: MeshTopology,
                       fields: np.ndarray) -> np.ndarray:
    """Move nodal fields from ``old`` to ``new`` after a remesh event.

    Unchanged octants copy nodal values exactly; refined octants evaluate
    the parent's order-r polynomial at the child nodes; coarsened octants
    inject values at coincident nodes.  ``fields`` is (n_old_nodes, m) or
    (n_old_nodes,).
    """
    if old.order != new.order or old.dim != new.dim:
        raise ValueError("old and new topologies are not transfer-compatible")
    r, dim = old.order, old.dim
    U = np.asarray(fields, dtype=float)
    flat = U.ndim == 1
    if flat:
        U = U[:, None]
    out = np.zeros((new.n_nodes, U.shape[1]))

    old_rng = _elem_ranges(old)
    new_rng = _elem_ranges(new)
    local_old = old.gather(U)  # (ne_old, nslots, m)

    i = j = 0
    ne_old, ne_new = old.n_elements, new.n_elements
    while i < ne_old and j < ne_new:
        os_, oe = old_rng[i]
        ns_, ne_r = new_rng[j]
        if os_ == ns_ and oe == ne_r:
            _write_slots(out, new, j, local_old[i])
            i += 1
            j += 1
        elif os_ <= ns_ and ne_r <= oe:
            # old element covers one or more new (finer) elements
            while j < ne_new and new_rng[j][1] <= oe:
                _interp_into(out, old, i, new, j, local_old[i], r, dim)
                j += 1
            i += 1
        elif ns_ <= os_ and oe <= ne_r:
            # new element covers old (finer) elements: injection
            while i < ne_old and old_rng[i][1] <= ne_r:
                _inject_into(out, old, i, new, j, local_old[i])
                i += 1
            j += 1
        else:
            raise ValueError("topologically unrelated meshes")
    if i < ne_old or j < ne_new:
        raise ValueError("topologically unrelated meshes")
    return out[:, 0] if flat else out


def _elem_ranges(topo: MeshTopology):
    """SFC index range [start, end) per element (covering descendants)."""
    dim, curve = topo.dim, topo.tree.curve
    rngs = []
    for e in range(topo.n_elements):
        lev = int(topo.elem_levels[e])
        anc = tuple(int(c) for c in topo.elem_anchors[e])
        start = sfc_encode(anc, lev, curve, dim)
        rngs.append((start, start + (1 << (dim * (L_MAX - lev)))))
    return rngs


def _write_slots(out, topo, e, values):
    ids = topo.o2n[e]
    mask = ids >= 0
    out[ids[mask]] = values[mask]


def _interp_into(out, old, i, new, j, local_vals, r, dim):
    size_old = float(r * (1 << (L_MAX - int(old.elem_levels[i]))))
    base = old.elem_anchors[i] * r
    for s in range(new.n_slots):
        nid = new.o2n[j, s]
        if nid < 0:
            continue
        key = new.node_keys[nid]
        ts = (key - base) / size_old
        N = _tensor_basis_at(r, dim, ts)
        out[nid] = N @ local_vals


def _inject_into(out, old, i, new, j, local_vals):
    r = old.order
    size_old = np.int64(r * (1 << (L_MAX - int(old.elem_levels[i]))))
    base = old.elem_anchors[i] * r
    offs = _slot_offsets(r, old.dim)
    old_keys = base[None, :] + offs * size_old
    key_to_slot = {tuple(int(c) for c in old_keys[s]): s
                   for s in range(len(offs))}
    for s in range(new.n_slots):
        nid = new.o2n[j, s]
        if nid < 0:
            continue
        k = tuple(int(c) for c in new.node_keys[nid])
        os_ = key_to_slot.get(k)
        if os_ is not None:
            out[nid] = local_vals[os_]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def dump_tree(tree: Tree) -> str:
    """One octant per line: 'level x y [z] retained', SFC sorted."""
    lines = []
    for lev, anc, ret in zip(tree.levels, tree.anchors, tree.retained):
        coords = " ".join(str(int(c)) for c in anc)
        lines.append(f"{int(lev)} {coords} {int(ret)}")
    return "\n".join(lines) + "\n"


def load_tree(text: str, domain_scale: Sequence[float], dim: int,
              curve: str = "morton") -> Tree:
    """Inverse of :func:`dump_tree`."""
    leaves = []
    for line in text.strip().splitlines():
        parts = [int(tok) for tok in line.split()]
        if len(parts) != dim + 2:
            raise ValueError(f"malformed tree line: {line!r}")
        leaves.append((parts[0], tuple(parts[1:1 + dim]), bool(parts[-1])))
    return _sorted_tree(dim, leaves, domain_scale, curve)
