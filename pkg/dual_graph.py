"""
Dual Octree Graph
Leaves of an octree become nodes; leaves whose cubes share a face of positive
area are joined by an edge typed by the contact axis and direction.

Edge types 0..5 are (x+, x-, y+, y-, z+, z-); type 6 is the self slot used by
graph convolution. Undirected edges are stored once with i < j in canonical
(depth, code) order and typed by the direction from i to j.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _components

from errors import StructureError
from octree import Octree, decode, encode

logger = logging.getLogger(__name__)

AXES = "xyz"
NUM_EDGE_TYPES = 6
SELF_SLOT = 6
NUM_KERNEL_SLOTS = 7


def edge_type(axis, sign):
    return 2 * axis + (0 if sign > 0 else 1)


def flip_type(t):
    return np.asarray(t) ^ 1


def type_axis(t):
    return np.asarray(t) // 2


def type_sign(t):
    return np.where(np.asarray(t) % 2 == 0, 1, -1)


class DualOctreeGraph:
    """Typed face-adjacency graph over the leaves of one octree"""

    def __init__(self, octree: Octree, depths, codes, occupied, edges, types):
        self.octree = octree
        self.depths = depths
        self.codes = codes
        self.occupied = occupied
        self.edges = edges            # (E, 2) int64, i < j, sorted
        self.edge_types = types       # (E,) int8
        self._start = np.searchsorted(depths, np.arange(octree.max_depth + 2))
        self._prepare()

    def _prepare(self):
        x, y, z = decode(self.codes)
        self.coords = np.stack([x, y, z], axis=1)
        scale = (1 << (self.max_depth - self.depths))[:, None]
        self.lo = self.coords * scale
        self.hi = self.lo + scale
        self.centres = (self.coords + 0.5) / (1 << self.depths)[:, None].astype(np.float64)

        # directed messages for convolution: target <- source along `type`
        i, j = self.edges[:, 0], self.edges[:, 1]
        t = self.edge_types.astype(np.int64)
        self.msg_target = np.concatenate([i, j])
        self.msg_source = np.concatenate([j, i])
        self.msg_type = np.concatenate([t, flip_type(t)])
        n = self.num_nodes
        counts = np.bincount(self.msg_target * NUM_EDGE_TYPES + self.msg_type, minlength=n * NUM_EDGE_TYPES)
        self.type_counts = counts.reshape(n, NUM_EDGE_TYPES)
        slot_count = counts[self.msg_target * NUM_EDGE_TYPES + self.msg_type]
        self.msg_weight = 1.0 / np.maximum(1, slot_count).astype(np.float64)

    @property
    def max_depth(self):
        return self.octree.max_depth

    @property
    def num_nodes(self):
        return len(self.depths)

    @property
    def num_edges(self):
        return len(self.edges)

    def nodes_at(self, depth):
        """Indices of nodes at `depth` (a contiguous, code-sorted block)"""
        if depth < 0 or depth > self.max_depth:
            return np.zeros(0, dtype=np.int64)
        return np.arange(self._start[depth], self._start[depth + 1])

    def index_of(self, depths, codes):
        """Node index for each (depth, code) pair, -1 where absent"""
        depths = np.asarray(depths, dtype=np.int64)
        codes = np.asarray(codes, dtype=np.uint64)
        out = np.full(depths.shape, -1, dtype=np.int64)
        for d in np.unique(depths):
            if d < 0 or d > self.max_depth:
                continue
            sel = depths == d
            block = self.codes[self._start[d]:self._start[d + 1]]
            if len(block) == 0:
                continue
            pos = np.minimum(np.searchsorted(block, codes[sel]), len(block) - 1)
            out[sel] = np.where(block[pos] == codes[sel], self._start[d] + pos, -1)
        return out

    def footprint_hits(self, codes, depth):
        """Mask of nodes containing at least one of the given depth-`depth` cells"""
        codes = np.unique(np.asarray(codes, dtype=np.uint64))
        hit = np.zeros(self.num_nodes, dtype=bool)
        for d in range(min(depth, self.max_depth) + 1):
            idx = self.nodes_at(d)
            if len(idx):
                hit[idx] = np.isin(self.codes[idx], codes >> np.uint64(3 * (depth - d)))
        return hit

    def edge_set(self):
        return {(int(a), int(b), int(t)) for (a, b), t in zip(self.edges, self.edge_types)}

    def same_structure(self, other):
        return (np.array_equal(self.depths, other.depths) and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.edges, other.edges) and np.array_equal(self.edge_types, other.edge_types))

    @property
    def nbytes(self):
        # octree encoding plus an edge list of (u32, u32, u8)
        return self.octree.nbytes + 9 * self.num_edges

    def dump(self):
        lines = [f"node {k} {int(d)} {int(c)}" for k, (d, c) in enumerate(zip(self.depths, self.codes))]
        for (a, b), t in zip(self.edges, self.edge_types):
            lines.append(f"edge {int(a)} {int(b)} {AXES[int(t) // 2]} {'+' if t % 2 == 0 else '-'}")
        return "\n".join(lines) + "\n"

    def __repr__(self):
        return f"DualOctreeGraph(nodes={self.num_nodes}, edges={self.num_edges}, max_depth={self.max_depth})"


# ---------------------------------------------------------------------------
# construction

_DIRECTIONS = [(axis, sign) for axis in range(3) for sign in (1, -1)]


def dualize(octree: Octree) -> DualOctreeGraph:
    """
    Each leaf looks one cell across each face at its own depth and walks up
    through the ancestors of that cell until it hits a leaf. Same-depth pairs
    are kept from the + side only; coarser neighbours are only ever found from
    the finer side, so every edge appears once.
    """
    depths, codes, occupied = octree.leaves()
    n = len(depths)
    max_depth = octree.max_depth
    start = np.searchsorted(depths, np.arange(max_depth + 2))
    x, y, z = decode(codes)
    coords = np.stack([x, y, z], axis=1)
    side = (1 << depths)

    src_all, nbr_all, type_all = [], [], []
    for t, (axis, sign) in enumerate(_DIRECTIONS):
        cell = coords.copy()
        cell[:, axis] += sign
        valid = (cell[:, axis] >= 0) & (cell[:, axis] < side)
        src = np.flatnonzero(valid)
        cell = cell[src]
        d_src = depths[src]
        found = np.full(len(src), -1, dtype=np.int64)
        for d in range(max_depth, -1, -1):
            block = codes[start[d]:start[d + 1]]
            sel = np.flatnonzero((found < 0) & (d_src >= d))
            if len(sel) == 0 or len(block) == 0:
                continue
            shift = (d_src[sel] - d)[:, None]
            anc = cell[sel] >> shift
            key = encode(anc[:, 0], anc[:, 1], anc[:, 2])
            pos = np.minimum(np.searchsorted(block, key), len(block) - 1)
            hit = block[pos] == key
            found[sel[hit]] = start[d] + pos[hit]
        keep = found >= 0
        src, found = src[keep], found[keep]
        same = depths[found] == depths[src]
        if sign < 0:
            keep = ~same
            src, found = src[keep], found[keep]
        src_all.append(src)
        nbr_all.append(found)
        type_all.append(np.full(len(src), t, dtype=np.int64))

    a = np.concatenate(src_all) if src_all else np.zeros(0, np.int64)
    b = np.concatenate(nbr_all) if nbr_all else np.zeros(0, np.int64)
    t = np.concatenate(type_all) if type_all else np.zeros(0, np.int64)
    i, j = np.minimum(a, b), np.maximum(a, b)
    types = np.where(a == i, t, t ^ 1)
    order = np.lexsort((j, i))
    edges = np.stack([i[order], j[order]], axis=1).astype(np.int64)
    graph = DualOctreeGraph(octree, depths, codes, occupied, edges, types[order].astype(np.int8))
    logger.debug("dualized %d leaves into %d edges", n, graph.num_edges)
    return graph


def brute_force_adjacency(lo, hi, chunk=512):
    """
    O(n^2) face-contact test over integer cube bounds. Returns (edges, types)
    in the same canonical form as dualize.
    """
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    n = len(lo)
    edges, types = [], []
    for s in range(0, n, chunk):
        rows = np.arange(s, min(n, s + chunk))
        l1, h1 = lo[rows][:, None, :], hi[rows][:, None, :]
        l2, h2 = lo[None, :, :], hi[None, :, :]
        overlap = np.minimum(h1, h2) > np.maximum(l1, l2)
        plus = h1 == l2
        minus = h2 == l1
        touch = plus | minus
        upper = np.arange(n)[None, :] > rows[:, None]
        full = overlap.all(axis=2) & upper
        if np.any(full):
            a, b = np.argwhere(full)[0]
            raise StructureError(f"cubes {rows[a]} and {b} overlap; not a valid octree leaf set")
        for axis in range(3):
            others = [k for k in range(3) if k != axis]
            hit = touch[:, :, axis] & overlap[:, :, others[0]] & overlap[:, :, others[1]] & upper
            ra, cb = np.nonzero(hit)
            if len(ra) == 0:
                continue
            sign = np.where(plus[ra, cb, axis], 1, -1)
            edges.append(np.stack([rows[ra], cb], axis=1))
            types.append(2 * axis + (sign < 0))
    if not edges:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int8)
    edges = np.concatenate(edges).astype(np.int64)
    types = np.concatenate(types).astype(np.int8)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order], types[order]


def connected_components(graph: DualOctreeGraph, nodes: Optional[np.ndarray] = None):
    """Component label per node, optionally restricted to a node subset"""
    keep = np.ones(graph.num_nodes, bool) if nodes is None else np.asarray(nodes, dtype=bool)
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    both = keep[i] & keep[j]
    n = graph.num_nodes
    adj = coo_matrix((np.ones(int(both.sum())), (i[both], j[both])), shape=(n, n))
    _, labels = _components(adj, directed=False)
    return np.where(keep, labels, -1)


# ---------------------------------------------------------------------------
# pooling maps

@dataclass(frozen=True)
class PoolMap:
    """Correspondence between a fine graph and the graph one level coarser"""

    fine_to_coarse: np.ndarray      # (n_fine,) coarse index of each fine node
    slot: np.ndarray                # child slot 0..7 for grouped nodes, 8 for pass-through
    counts: np.ndarray              # (n_coarse,) fine nodes mapped to each coarse node
    n_fine: int
    n_coarse: int


def _pool_map(fine: DualOctreeGraph, coarse: DualOctreeGraph, deep: int):
    grouped = fine.depths == deep
    depths = np.where(grouped, deep - 1, fine.depths)
    codes = np.where(grouped, fine.codes >> np.uint64(3), fine.codes)
    f2c = coarse.index_of(depths, codes)
    if np.any(f2c < 0):
        raise StructureError("pool: fine node without a counterpart in the coarser graph")
    counts = np.bincount(f2c, minlength=coarse.num_nodes)
    group_targets = np.unique(f2c[grouped])
    if np.any(counts[group_targets] != 8):
        raise StructureError("pool: incomplete sibling set marked for grouping")
    slot = np.where(grouped, (fine.codes & np.uint64(7)).astype(np.int64), 8)
    return PoolMap(f2c, slot, counts, fine.num_nodes, coarse.num_nodes)


def pool_graph(graph: DualOctreeGraph, coarse: Optional[DualOctreeGraph] = None):
    """
    Group every sibling octet at the graph's max depth into its parent.
    The coarser graph is dualize(octree.truncate(max_depth - 1)).
    """
    if graph.max_depth == 0:
        raise StructureError("pool: graph is already at the root")
    if coarse is None:
        coarse = dualize(graph.octree.truncate(graph.max_depth - 1))
    return coarse, _pool_map(graph, coarse, graph.max_depth)


def unpool_graph(coarse: DualOctreeGraph, split_flags):
    """Split the max-depth nodes whose flag is set; returns the finer graph and its pool map"""
    fine = dualize(coarse.octree.grow(split_flags))
    return fine, _pool_map(fine, coarse, fine.max_depth)
