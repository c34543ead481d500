"""Tree construction, balancing, topology, and remeshing tests."""

import itertools

import numpy as np
import pytest

from chnsfem import octmesh
from chnsfem.octmesh import (
    L_MAX, AlignmentError, OctKey, Subdomain, apply_remesh, balance_2to1,
    build_topology, build_tree, dump_tree, intergrid_transfer, load_tree,
    mark_for_remesh, partition, sfc_decode, sfc_encode,
)

import oracles


def uniform_tree(level, dim=2, scale=None, member=None):
    scale = scale if scale is not None else (1.0,) * dim
    return build_tree(lambda x: 1.0, member, level, level, scale, dim=dim)


# ---------------------------------------------------------------------------
# Space-filling curves
# ---------------------------------------------------------------------------


def test_root_key_is_first():
    assert sfc_encode((0, 0), 0, "morton") == 0
    assert sfc_encode((0, 0), 0, "hilbert") == 0


@pytest.mark.parametrize("curve", ["morton", "hilbert"])
def test_encode_decode_roundtrip_exhaustive(curve):
    count = 0
    for level in range(5):
        size = 1 << (L_MAX - level)
        for cell in itertools.product(range(1 << level), repeat=2):
            anchor = tuple(c * size for c in cell)
            idx = sfc_encode(anchor, level, curve)
            assert sfc_decode(idx, level, curve, dim=2) == anchor
            count += 1
    assert count == 341  # 1 + 4 + 16 + 64 + 256


def test_children_in_ascending_morton_order():
    for level, anchor in [(0, (0, 0)), (2, (0, 1 << (L_MAX - 2)))]:
        kids = list(octmesh._children(level, anchor, 2))
        idx = [sfc_encode(a, l, "morton") for l, a in kids]
        assert idx == sorted(idx)
        # SW, SE, NW, NE under x-fastest interleave
        half = 1 << (L_MAX - level - 1)
        ax, ay = anchor
        assert [a for _, a in kids] == [
            (ax, ay), (ax + half, ay), (ax, ay + half), (ax + half, ay + half)]


def test_misaligned_anchor_rejected():
    with pytest.raises(AlignmentError):
        sfc_encode((1, 0), 1)
    with pytest.raises(AlignmentError):
        OctKey((3,) * 2, 1, 2)


def test_sort_total_order():
    rng = np.random.default_rng(7)
    tree = uniform_tree(3)
    keys = [octmesh._sort_key(int(l), tuple(a), "morton", 2)
            for l, a in zip(tree.levels, tree.anchors)]
    for _ in range(5):
        perm = rng.permutation(len(keys))
        assert sorted(keys[i] for i in perm) == sorted(keys)


def test_hilbert_children_are_contiguous():
    # consecutive Hilbert cells at one level are lattice neighbors
    level = 4
    size = 1 << (L_MAX - level)
    cells = [sfc_decode(sfc_encode(
        tuple(c * size for c in octmesh._morton_decode(i, level, 2)),
        level, "hilbert"), level, "hilbert", 2)
        for i in range(1 << (2 * level))]
    order = sorted(range(len(cells)), key=lambda i: sfc_encode(
        cells[i], level, "hilbert"))
    seq = [cells[i] for i in order]
    for a, b in zip(seq, seq[1:]):
        assert abs(a[0] - b[0]) + abs(a[1] - b[1]) == size


# ---------------------------------------------------------------------------
# Tree construction
# ---------------------------------------------------------------------------


def test_uniform_tree():
    tree = uniform_tree(2)
    assert tree.n_retained == 16
    assert np.all(tree.levels == 2)


def test_circle_refinement_matches_corner_signs():
    dist = lambda x: abs(np.hypot(x[0] - 0.5, x[1] - 0.5) - 0.3)
    signed = lambda x: np.hypot(x[0] - 0.5, x[1] - 0.5) - 0.3
    # refine where the circle crosses: use the signed distance
    tree = build_tree(signed, None, 5, 2, (1.0, 1.0), dim=2)
    size5 = 1 << (L_MAX - 5)
    present = {tuple(a) for a, l in zip(map(tuple, tree.anchors), tree.levels)
               if l == 5}
    for cell in itertools.product(range(32), repeat=2):
        anchor = (cell[0] * size5, cell[1] * size5)
        corners = [((anchor[0] + ox * size5) / (1 << L_MAX),
                    (anchor[1] + oy * size5) / (1 << L_MAX))
                   for ox, oy in itertools.product((0, 1), repeat=2)]
        signs = [signed(np.array(c)) for c in corners]
        if min(signs) < 0.0 < max(signs):
            assert anchor in present


def test_membership_eliminates_halfplane():
    tree = uniform_tree(3, member=lambda x: x[0] > 0.5)
    centers = (tree.anchors[tree.retained]
               + (1 << (L_MAX - 3)) // 2) / float(1 << L_MAX)
    assert np.all(centers[:, 0] > 0.5)
    assert tree.n_retained == 32


# ---------------------------------------------------------------------------
# 2:1 balance
# ---------------------------------------------------------------------------


def test_balance_uniform_fixed_point():
    tree = uniform_tree(3)
    out = balance_2to1(tree)
    assert dump_tree(out) == dump_tree(tree)


def test_balance_refines_coarse_neighbor():
    # one level-3 octant adjacent to level-1 octants
    leaves = [(1, (0, 1 << (L_MAX - 1)), True),
              (1, (1 << (L_MAX - 1), 0), True),
              (1, (1 << (L_MAX - 1), 1 << (L_MAX - 1)), True)]
    quarter = 1 << (L_MAX - 2)
    sub = list(octmesh._children(1, (0, 0), 2))
    # split the SW quadrant's SE child to level 3 so it abuts the
    # level-1 east neighbor directly
    for lev, anc in sub:
        if anc == (quarter, 0):
            leaves += [(l3, a3, True)
                       for l3, a3 in octmesh._children(lev, anc, 2)]
        else:
            leaves.append((lev, anc, True))
    tree = octmesh._sorted_tree(2, leaves, (1.0, 1.0), "morton")
    assert not oracles.is_balanced_bruteforce(tree)
    out = balance_2to1(tree)
    assert oracles.is_balanced_bruteforce(out)
    assert out.n_retained >= tree.n_retained  # refines, never coarsens


def test_balance_preserves_eliminated_region():
    member = lambda x: not (x[0] < 0.5 and x[1] < 0.5)
    leaves = []
    for lev, anc in octmesh._children(0, (0, 0), 2):
        if anc == (0, 0):
            leaves.append((lev, anc, False))
        elif anc[0] > 0 and anc[1] > 0:
            for l2, a2 in octmesh._children(lev, anc, 2):
                for l3, a3 in octmesh._children(l2, a2, 2):
                    leaves.append((l3, a3, True))
        else:
            leaves.append((lev, anc, True))
    tree = octmesh._sorted_tree(2, leaves, (1.0, 1.0), "morton")
    out = balance_2to1(tree)
    half = 1 << (L_MAX - 1)
    inside = (out.anchors[out.retained] < half).all(axis=1)
    assert not inside.any()
    assert oracles.is_balanced_bruteforce(out)


def test_balance_random_trees():
    rng = np.random.default_rng(42)
    for _ in range(25):
        tree = oracles.random_tree(rng, max_octants=512)
        out = balance_2to1(tree)
        assert oracles.is_balanced_bruteforce(out)
        again = balance_2to1(out)
        assert dump_tree(again) == dump_tree(out)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def test_partition_exact_division():
    tree = uniform_tree(2)
    pm = partition(tree, 4)
    assert list(pm.cuts) == [0, 4, 8, 12, 16]


def test_partition_single_part():
    tree = uniform_tree(2)
    pm = partition(tree, 1)
    assert list(pm.cuts) == [0, 16]


def test_partition_rejects_bad_count():
    tree = uniform_tree(1)
    with pytest.raises(ValueError):
        partition(tree, 0)


def test_partition_weighted_respects_bound():
    # greedy prefix-sum: every slice weighs at most total/p plus one octant
    tree = uniform_tree(2)
    first = tuple(int(c) for c in tree.anchors[0])
    wfn = lambda k: 3.0 if tuple(k.anchor) == first else 1.0
    pm = partition(tree, 2, wfn)
    w = pm.weights
    total = w.sum()
    for a, b in zip(pm.cuts, pm.cuts[1:]):
        assert w[a:b].sum() <= total / 2 + w.max() + 1e-12
    assert list(pm.cuts)[0] == 0 and list(pm.cuts)[-1] == tree.n_octants


def test_partition_covers_exactly_once():
    rng = np.random.default_rng(3)
    tree = balance_2to1(oracles.random_tree(rng, max_octants=300))
    for p in (1, 2, 3, 7):
        pm = partition(tree, p)
        cuts = list(pm.cuts)
        assert cuts == sorted(cuts)
        assert cuts[0] == 0 and cuts[-1] == tree.n_octants


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


def test_topology_uniform_2x2_r1():
    topo = build_topology(uniform_tree(1), order=1)
    assert topo.n_nodes == 9
    assert topo.n_hanging == 0
    assert topo.o2n.shape == (4, 4)
    assert np.all(topo.o2n >= 0)


def test_topology_one_refined_quadrant_hanging_weights():
    tree = uniform_tree(1)
    flags = np.zeros(4, dtype=np.int64)
    flags[0] = 1
    tree2 = apply_remesh(tree, flags)
    topo = build_topology(tree2, order=1)
    # two hanging midpoints, each shared by two fine elements
    assert topo.n_hanging == 4
    hang = np.nonzero(topo.o2n < 0)
    spots = set()
    for e, s in zip(*hang):
        w = topo.weights[e, s]
        keep = np.abs(w) > 0
        nz = w[keep]
        assert np.allclose(sorted(nz), [0.5, 0.5])
        spots.add(tuple(sorted(topo.parents[e, s][keep])))
    assert len(spots) == 2


def test_topology_eliminated_nodes_get_no_id():
    member = lambda x: x[0] > 0.5
    tree = uniform_tree(2, member=member)
    topo = build_topology(tree, order=1,
                          subdomain=Subdomain(membership=member))
    assert np.all(topo.node_coords[:, 0] >= 0.5 - 1e-12)
    assert topo.n_nodes == 3 * 5  # half of a 4x4 grid: 3x5 vertices


def test_topology_requires_balanced_tree():
    leaves = [(1, (0, 1 << (L_MAX - 1)), True),
              (1, (1 << (L_MAX - 1), 0), True),
              (1, (1 << (L_MAX - 1), 1 << (L_MAX - 1)), True)]
    for _, a2 in octmesh._children(1, (0, 0), 2):
        for l3, a3 in octmesh._children(2, a2, 2):
            leaves.append((l3, a3, True))
    tree = octmesh._sorted_tree(2, leaves, (1.0, 1.0), "morton")
    with pytest.raises(octmesh.BalanceError):
        build_topology(tree, order=1)


def test_topology_r2_rejects_nonconforming():
    tree = uniform_tree(1)
    flags = np.array([1, 0, 0, 0], dtype=np.int64)
    tree2 = apply_remesh(tree, flags)
    with pytest.raises(Exception):
        build_topology(tree2, order=2)


def test_boundary_flags_mark_domain_boundary():
    topo = build_topology(uniform_tree(2), order=1)
    x = topo.node_coords
    on_bdry = ((np.isclose(x[:, 0], 0) | np.isclose(x[:, 0], 1)
                | np.isclose(x[:, 1], 0) | np.isclose(x[:, 1], 1)))
    assert np.array_equal(topo.boundary_flags.astype(bool), on_bdry)


# ---------------------------------------------------------------------------
# Remeshing and transfer
# ---------------------------------------------------------------------------


def test_mark_no_interface_coarsens():
    topo = build_topology(uniform_tree(3), order=1)
    phi = np.ones(topo.n_nodes)
    flags = mark_for_remesh(topo, phi, band=0.99, l_interface=5, l_min=2)
    assert np.all(flags == -1)


def test_mark_tanh_band_targets_interface():
    topo = build_topology(uniform_tree(4), order=1)
    Cn = 0.05
    phi = np.tanh(np.sqrt(2.0) * (topo.node_coords[:, 1] - 0.5) / Cn)
    flags = mark_for_remesh(topo, phi, band=0.99, l_interface=6, l_min=2)
    # |phi| < 0.99 within |y - 0.5| < atanh(0.99) * Cn / sqrt(2)
    width = np.arctanh(0.99) * Cn / np.sqrt(2.0)
    h = 1.0 / 16.0
    ymin = topo.node_coords[:, 1][topo.o2n].min(axis=1)
    for e in range(topo.n_elements):
        straddles = abs(ymin[e] + h / 2 - 0.5) < width + h
        if flags[e] == 1:
            assert straddles
        if not straddles:
            assert flags[e] == -1


def test_mark_fixed_point_keeps():
    # mesh already at l_interface near the interface, l_min elsewhere
    Cn = 0.05
    phi_fn = lambda x: np.tanh(np.sqrt(2.0) * (x[1] - 0.5) / Cn)
    tree = uniform_tree(3)
    topo = build_topology(tree, order=1)
    for _ in range(6):
        phi = np.array([phi_fn(x) for x in topo.node_coords])
        flags = mark_for_remesh(topo, phi, 0.99, l_interface=5, l_min=3)
        if np.all(flags == 0):
            break
        tree = apply_remesh(topo.tree, flags)
        topo = build_topology(tree, order=1)
    phi = np.array([phi_fn(x) for x in topo.node_coords])
    flags = mark_for_remesh(topo, phi, 0.99, l_interface=5, l_min=3)
    assert np.all(flags == 0)


def test_intergrid_linear_exactness():
    f = lambda x: 2.0 * x[:, 0] + 3.0 * x[:, 1] - 1.0
    topo = build_topology(uniform_tree(2), order=1)
    flags = np.zeros(topo.n_elements, dtype=np.int64)
    flags[5] = 1
    new_topo = build_topology(apply_remesh(topo.tree, flags), order=1)
    out = intergrid_transfer(topo, new_topo, f(topo.node_coords))
    assert np.max(np.abs(out - f(new_topo.node_coords))) < 1e-12


def test_intergrid_constant_preserved():
    rng = np.random.default_rng(0)
    topo = build_topology(uniform_tree(3), order=1)
    flags = rng.integers(-1, 2, topo.n_elements)
    new_topo = build_topology(apply_remesh(topo.tree, flags), order=1)
    out = intergrid_transfer(topo, new_topo, np.full(topo.n_nodes, 4.25))
    assert np.max(np.abs(out - 4.25)) < 1e-13


def test_intergrid_quadratic_remainder_r1():
    # linear interpolation of x^2: new midpoint value is the endpoint mean
    topo = build_topology(uniform_tree(1), order=1)
    f = topo.node_coords[:, 0] ** 2
    flags = np.array([1, 0, 0, 0], dtype=np.int64)
    new_topo = build_topology(apply_remesh(topo.tree, flags), order=1)
    out = intergrid_transfer(topo, new_topo, f)
    xs = new_topo.node_coords
    mid = np.where(np.isclose(xs[:, 0], 0.25) & np.isclose(xs[:, 1], 0.0))[0]
    assert len(mid) == 1
    exact_linear = 0.5 * (0.0 ** 2 + 0.5 ** 2)
    assert abs(out[mid[0]] - exact_linear) < 1e-13
    # analytic remainder of linear interpolation at the midpoint: h^2/4 * f''/2
    assert abs(out[mid[0]] - 0.25 ** 2 - 0.5 ** 2 / 4.0 * 2.0 / 2.0) < 1e-13


def test_intergrid_vector_fields():
    topo = build_topology(uniform_tree(2), order=1)
    F = np.stack([topo.node_coords[:, 0],
                  1.0 - topo.node_coords[:, 1]], axis=1)
    flags = np.zeros(topo.n_elements, dtype=np.int64)
    flags[0] = 1
    new_topo = build_topology(apply_remesh(topo.tree, flags), order=1)
    out = intergrid_transfer(topo, new_topo, F)
    assert out.shape == (new_topo.n_nodes, 2)
    assert np.allclose(out[:, 0], new_topo.node_coords[:, 0], atol=1e-12)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def test_dump_load_roundtrip():
    rng = np.random.default_rng(11)
    tree = balance_2to1(oracles.random_tree(rng, max_octants=400))
    text = dump_tree(tree)
    back = load_tree(text, tree.domain_scale, tree.dim)
    assert dump_tree(back) == text
    assert back.n_retained == tree.n_retained


def test_load_rejects_malformed():
    with pytest.raises(ValueError):
        load_tree("1 0\n", (1.0, 1.0), 2)
