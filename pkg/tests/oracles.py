"""Brute-force reference implementations used to check the fast code.

Everything here is deliberately simple and slow: O(n^2) adjacency
scans, dense matrix assembly, high-order finite differences.  Tests
compare the package's optimized routines against these.
"""

import numpy as np

from chnsfem import octmesh


def boxes(tree):
    """Retained octants as (lo, hi) lattice boxes plus their levels."""
    lo = tree.anchors[tree.retained]
    sizes = (np.int64(1) << (octmesh.L_MAX - tree.levels[tree.retained]))
    hi = lo + sizes[:, None]
    return lo, hi, tree.levels[tree.retained]


def _touch_overlap(lo_a, hi_a, lo_b, hi_b):
    """Per-axis: -1 touching, >0 overlap length, 0 disjoint/corner."""
    out = []
    for d in range(len(lo_a)):
        if hi_a[d] == lo_b[d] or hi_b[d] == lo_a[d]:
            out.append(-1)
        else:
            out.append(int(min(hi_a[d], hi_b[d]) - max(lo_a[d], lo_b[d])))
    return out

def neighbor_pairs(tree, include_edges=True):
    """All-pairs scan for face (and 3D edge) adjacent retained octants."""
    lo, hi, lev = boxes(tree)
    n = len(lev)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            t = _touch_overlap(lo[i], hi[i], lo[j], hi[j])
            touching = t.count(-1)
            overlapping = sum(1 for v in t if v > 0)
            dim = tree.dim
            if touching == 1 and overlapping == dim - 1:
                pairs.append((i, j))          # face neighbors
            elif (dim == 3 and include_edges
                  and touching == 2 and overlapping == 1):
                pairs.append((i, j))          # edge neighbors (3D)
    return pairs, lev


def is_balanced_bruteforce(tree):
    pairs, lev = neighbor_pairs(tree)
    return all(abs(int(lev[i]) - int(lev[j])) <= 1 for i, j in pairs)


def random_tree(rng, dim=2, max_octants=4096, p_refine=0.55, p_drop=0.12):
    """Random recursive subdivision with random eliminated leaves."""
    leaves = []
    stack = [(0, (0,) * dim)]
    budget = max_octants
    while stack:
        level, anchor = stack.pop()
        n_pending = len(stack) + len(leaves)
        can_refine = (level < 6 and budget - n_pending > (1 << dim)
                      and rng.random() < p_refine / (1 + 0.35 * level))
        if can_refine:
            stack.extend(octmesh._children(level, anchor, dim))
            budget -= (1 << dim) - 1
        else:
            leaves.append((level, anchor, rng.random() > p_drop))
    if not any(r for _, _, r in leaves):
        leaves[0] = (leaves[0][0], leaves[0][1], True)
    return octmesh._sorted_tree(dim, leaves, (1.0,) * dim, "morton")
