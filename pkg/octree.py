"""
Octree
Linear (sorted Morton key) octree with per-depth split flags, conversion to and
from dense occupancy, truncation, growth by split decisions and the OCT1 file.

Morton layout: level bit i of x goes to code bit 3i, y to 3i+1, z to 3i+2.
"""
import logging
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import depth_for
from errors import FormatError, StructureError
from voxel_io import OccupancyGrid, atomic_write_bytes

logger = logging.getLogger(__name__)

OCT_MAGIC = b"OCT1"
MAX_DEPTH = 21          # 3 * 21 bits fit a u64 code


# ---------------------------------------------------------------------------
# Morton coding

def _spread(v):
    # insert two zero bits between each of the low 21 bits
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact(v):
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def encode(x, y, z):
    """Vectorized interleave; no range check"""
    return _spread(x) | (_spread(y) << np.uint64(1)) | (_spread(z) << np.uint64(2))


def decode(codes):
    codes = np.asarray(codes, dtype=np.uint64)
    return (_compact(codes).astype(np.int64),
            _compact(codes >> np.uint64(1)).astype(np.int64),
            _compact(codes >> np.uint64(2)).astype(np.int64))


@dataclass(frozen=True)
class MortonKey:
    depth: int
    code: int

    def decode(self):
        return morton_decode(self)

    def parent(self):
        if self.depth == 0:
            raise StructureError("root has no parent")
        return MortonKey(self.depth - 1, self.code >> 3)


def morton_encode(x, y, z, depth):
    """Key of cell (x, y, z) at the given depth"""
    if not 0 <= depth <= MAX_DEPTH:
        raise StructureError(f"morton_encode: depth {depth} outside [0, {MAX_DEPTH}]")
    side = 1 << depth
    for name, v in (("x", x), ("y", y), ("z", z)):
        if not 0 <= v < side:
            raise StructureError(f"morton_encode: {name}={v} out of range for depth {depth} (side {side})")
    return MortonKey(depth, int(encode(x, y, z)))


def morton_decode(key):
    if not 0 <= key.code < (1 << (3 * key.depth)):
        raise StructureError(f"morton_decode: code {key.code} out of range for depth {key.depth}")
    x, y, z = decode(key.code)
    return int(x), int(y), int(z)


# ---------------------------------------------------------------------------
# Octree

def _children(codes):
    codes = np.asarray(codes, dtype=np.uint64)
    return (codes[:, None] * np.uint64(8) + np.arange(8, dtype=np.uint64)).ravel()


class Octree:
    """
    Linear octree. keys[d] holds the sorted codes present at depth d,
    split[d] whether each node is subdivided, occupied[d] the occupancy of
    leaves (ignored for split nodes). `dims` is the real extent at max_depth
    resolution inside the 2**max_depth cube.
    """

    def __init__(self, keys, split, occupied, dims=None):
        self.keys = [np.asarray(k, dtype=np.uint64) for k in keys]
        self.split = [np.asarray(s, dtype=bool) for s in split]
        self.occupied = [np.asarray(o, dtype=bool) for o in occupied]
        self.max_depth = len(self.keys) - 1
        side = 1 << self.max_depth
        self.dims = tuple(int(v) for v in dims) if dims is not None else (side, side, side)

    # -- queries

    @property
    def side(self):
        return 1 << self.max_depth

    def node_count(self):
        return int(sum(len(k) for k in self.keys))

    def leaf_count(self):
        return int(sum(int((~s).sum()) for s in self.split))

    def leaves(self):
        """(depths, codes, occupied) of all leaves in canonical (depth, code) order"""
        depths, codes, occ = [], [], []
        for d, (k, s, o) in enumerate(zip(self.keys, self.split, self.occupied)):
            leaf = ~s
            depths.append(np.full(int(leaf.sum()), d, dtype=np.int64))
            codes.append(k[leaf])
            occ.append(o[leaf])
        return np.concatenate(depths), np.concatenate(codes), np.concatenate(occ)

    def find(self, depth, codes):
        """Position of each code in keys[depth], or -1"""
        codes = np.asarray(codes, dtype=np.uint64)
        level = self.keys[depth]
        if len(level) == 0:
            return np.full(codes.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(level, codes), len(level) - 1)
        return np.where(level[pos] == codes, pos, -1)

    def validate(self):
        """Raise StructureError unless parent-closure and sibling-completeness hold"""
        if len(self.keys[0]) != 1 or self.keys[0][0] != 0:
            raise StructureError("root missing")
        for d in range(self.max_depth + 1):
            k = self.keys[d]
            if len(self.split[d]) != len(k) or len(self.occupied[d]) != len(k):
                raise StructureError(f"depth {d}: flag arrays do not match {len(k)} nodes")
            if len(k) > 1 and np.any(np.diff(k) <= 0):
                raise StructureError(f"depth {d}: codes not sorted and unique")
            if d == self.max_depth:
                if np.any(self.split[d]):
                    raise StructureError(f"depth {d}: nodes at max depth cannot be split")
                continue
            expected = _children(k[self.split[d]])
            if not np.array_equal(expected, self.keys[d + 1]):
                raise StructureError(f"depth {d + 1}: population is not exactly the children of split nodes")
        return self

    def __eq__(self, other):
        if not isinstance(other, Octree) or self.max_depth != other.max_depth:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.keys, other.keys)) and \
            all(np.array_equal(a, b) for a, b in zip(self.split, other.split)) and \
            all(np.array_equal(a[~s], b[~s]) for a, b, s in zip(self.occupied, other.occupied, self.split))

    def __repr__(self):
        counts = [len(k) for k in self.keys]
        return f"Octree(max_depth={self.max_depth}, nodes per depth={counts})"

    # -- derived octrees

    def truncate(self, depth):
        """Drop levels below `depth`; nodes at `depth` become leaves occupied iff anything under them was"""
        if not 0 <= depth <= self.max_depth:
            raise StructureError(f"truncate: depth {depth} outside [0, {self.max_depth}]")
        keys = self.keys[:depth + 1]
        split = [s.copy() for s in self.split[:depth + 1]]
        occupied = [o.copy() for o in self.occupied[:depth + 1]]
        # split nodes only exist above occupied content
        occupied[depth] = occupied[depth] | split[depth]
        split[depth] = np.zeros(len(keys[depth]), dtype=bool)
        shrink = 1 << (self.max_depth - depth)
        dims = tuple(max(1, -(-v // shrink)) for v in self.dims)
        return Octree(keys, split, occupied, dims)

    def grow(self, split_flags, child_occupied=True):
        """Subdivide the nodes at max depth whose flag is set, adding one level"""
        flags = np.asarray(split_flags, dtype=bool).ravel()
        deepest = self.keys[self.max_depth]
        if len(flags) != len(deepest):
            raise StructureError(
                f"grow: {len(flags)} split decisions for {len(deepest)} nodes at depth {self.max_depth}")
        if self.max_depth + 1 > MAX_DEPTH:
            raise StructureError(f"grow: depth would exceed {MAX_DEPTH}")
        split = [s.copy() for s in self.split]
        split[-1] = flags.copy()
        children = _children(deepest[flags])
        keys = self.keys + [children]
        split.append(np.zeros(len(children), dtype=bool))
        occupied = [o.copy() for o in self.occupied] + [np.full(len(children), bool(child_occupied))]
        dims = tuple(2 * v for v in self.dims)
        return Octree(keys, split, occupied, dims)

    # -- storage

    def to_bytes(self):
        chunks = [OCT_MAGIC, struct.pack("<I", self.max_depth)]
        for k, s in zip(self.keys, self.split):
            chunks.append(struct.pack("<I", len(k)))
            chunks.append(np.asarray(k, dtype="<u8").tobytes())
            chunks.append(np.packbits(s, bitorder="little").tobytes())
        _, _, leaf_occ = self.leaves()
        chunks.append(np.packbits(leaf_occ, bitorder="little").tobytes())
        return b"".join(chunks)

    @property
    def nbytes(self):
        total = 8
        for k in self.keys:
            total += 4 + 8 * len(k) + (len(k) + 7) // 8
        return total + (self.leaf_count() + 7) // 8

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())


def octree_from_bytes(blob, path=None, dims=None):
    """Parse an OCT1 document. OCT1 does not carry the real extent, pass `dims` to crop"""
    if blob[:4] != OCT_MAGIC:
        raise FormatError("bad magic, expected OCT1", path, 0)
    if len(blob) < 8:
        raise FormatError("truncated OCT1 header", path, len(blob))
    (max_depth,) = struct.unpack_from("<I", blob, 4)
    if max_depth > MAX_DEPTH:
        raise FormatError(f"OCT1 max_depth {max_depth} exceeds {MAX_DEPTH}", path, 4)
    pos = 8
    keys, split = [], []
    for d in range(max_depth + 1):
        if pos + 4 > len(blob):
            raise FormatError(f"truncated OCT1 at depth {d}", path, pos)
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        nflag = (count + 7) // 8
        if pos + 8 * count + nflag > len(blob):
            raise FormatError(f"truncated OCT1 node list at depth {d}", path, pos)
        keys.append(np.frombuffer(blob, dtype="<u8", count=count, offset=pos).astype(np.uint64))
        pos += 8 * count
        flags = np.frombuffer(blob, dtype=np.uint8, count=nflag, offset=pos)
        split.append(np.unpackbits(flags, bitorder="little")[:count].astype(bool))
        pos += nflag
    leaf_total = int(sum(int((~s).sum()) for s in split))
    nocc = (leaf_total + 7) // 8
    if pos + nocc > len(blob):
        raise FormatError("truncated OCT1 leaf occupancy", path, pos)
    leaf_occ = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=nocc, offset=pos),
                             bitorder="little")[:leaf_total].astype(bool)
    occupied, start = [], 0
    for s in split:
        occ = np.zeros(len(s), dtype=bool)
        n = int((~s).sum())
        occ[~s] = leaf_occ[start:start + n]
        start += n
        occupied.append(occ)
    oct_ = Octree(keys, split, occupied, dims)
    try:
        return oct_.validate()
    except StructureError as e:
        raise FormatError(f"malformed octree: {e}", path) from e


def load_octree(path, dims=None):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise FormatError("file not found", path) from None
    return octree_from_bytes(blob, path, dims)


# ---------------------------------------------------------------------------
# construction

def build_octree(occ: OccupancyGrid, max_depth: Optional[int] = None):
    """
    Subdivide every node that has an occupied descendant, down to the cube
    depth covering the grid. Cells outside the grid are permanently empty.
    """
    dims = occ.dims
    depth = depth_for(max(dims)) if max_depth is None else int(max_depth)
    if (1 << depth) < max(dims):
        raise StructureError(f"build_octree: depth {depth} too shallow for dims {dims}")
    x, y, z = np.nonzero(occ.bits)
    occ_codes = np.unique(encode(x, y, z))
    keys, split, occupied = [np.zeros(1, dtype=np.uint64)], [], []
    for d in range(depth):
        split_codes = np.unique(occ_codes >> np.uint64(3 * (depth - d)))
        split.append(np.isin(keys[d], split_codes))
        occupied.append(np.zeros(len(keys[d]), dtype=bool))
        keys.append(_children(keys[d][split[d]]))
    split.append(np.zeros(len(keys[depth]), dtype=bool))
    occupied.append(np.isin(keys[depth], occ_codes))
    return Octree(keys, split, occupied, dims)


def octree_to_dense(oct_: Octree, dims: Optional[Sequence[int]] = None):
    """Occupancy grid of the octree's occupied leaves, cropped to its real extent"""
    dims = tuple(oct_.dims if dims is None else dims)
    side = oct_.side
    bits = np.zeros((side, side, side), dtype=bool)
    for d in range(oct_.max_depth + 1):
        sel = (~oct_.split[d]) & oct_.occupied[d]
        if not np.any(sel):
            continue
        x, y, z = decode(oct_.keys[d][sel])
        scale = 1 << (oct_.max_depth - d)
        if scale == 1:
            bits[x, y, z] = True
        else:
            for cx, cy, cz in zip(x, y, z):
                bits[cx * scale:(cx + 1) * scale, cy * scale:(cy + 1) * scale, cz * scale:(cz + 1) * scale] = True
    return OccupancyGrid(bits[:dims[0], :dims[1], :dims[2]])


def grow_by_splits(coarse: OccupancyGrid, decisions: Sequence[np.ndarray] = ()):
    """
    Octree from a thresholded coarse split grid: the coarse level is built with
    build_octree, every set cell is subdivided once, then each entry of
    `decisions` splits the nodes at the current deepest level (canonical order).

    An all-zero coarse grid yields a root-only octree (one empty, unsplit root
    and empty deeper levels) rather than an empty coarse level; decisions must
    then be empty arrays. ScenePipeline returns an empty scene before calling
    this when the structure stage produces no occupied cells.
    """
    oct_ = build_octree(coarse)
    deepest = oct_.max_depth
    oct_ = oct_.grow(oct_.occupied[deepest] & ~oct_.split[deepest])
    for level, flags in enumerate(decisions):
        try:
            oct_ = oct_.grow(flags)
        except StructureError as e:
            raise StructureError(f"grow_by_splits level {level}: {e}") from e
    return oct_


def structure_octree(coarse: OccupancyGrid, patch_depth: int, growth: Sequence[np.ndarray] = ()):
    """
    Stage-1 octree in patch units. The coarse grid is embedded at depth
    patch_depth - 1 - len(growth rounds); the result reaches at most patch_depth.
    """
    oct_ = grow_by_splits(coarse, growth)
    if oct_.max_depth > patch_depth:
        raise StructureError(f"structure octree depth {oct_.max_depth} exceeds patch depth {patch_depth}")
    return oct_


def split_targets(oct_: Octree, from_depth: int) -> Tuple[List[np.ndarray], np.ndarray]:
    """Split flags per depth from `from_depth` to max_depth - 1, and leaf occupancy at max_depth"""
    levels = [oct_.split[d].copy() for d in range(from_depth, oct_.max_depth)]
    return levels, oct_.occupied[oct_.max_depth].copy()


def ancestors_at(codes, from_depth, to_depth):
    """Codes of the depth-`to_depth` ancestors of depth-`from_depth` codes"""
    if to_depth > from_depth:
        raise StructureError(f"ancestors_at: {to_depth} is deeper than {from_depth}")
    return np.asarray(codes, dtype=np.uint64) >> np.uint64(3 * (from_depth - to_depth))
