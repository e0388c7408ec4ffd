# Voxel IO - semantic voxel grids, occupancy masks and LiDAR scans
# Handles the SVOX / OCC1 / .bin file formats plus voxelization and the
# coarse occupancy downsampling used for structure conditioning.
#
# Arrays are indexed [x, y, z]. On disk everything is x-fastest, which is
# numpy's Fortran order for an (nx, ny, nz) array.

import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import FormatError, ShapeError

logger = logging.getLogger(__name__)

SVOX_MAGIC = b"SVX1"
SVOX_VERSION = 1
SVOX_HEADER = struct.Struct("<4sIIIIfHH")   # magic, version, nx, ny, nz, voxel_size, num_classes, reserved
OCC_MAGIC = b"OCC1"
OCC_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class SemanticVoxelGrid:
    """Dense labeled voxel volume; label 0 is empty"""

    labels: np.ndarray          # (nx, ny, nz) uint16
    voxel_size: float
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ShapeError(f"SemanticVoxelGrid: labels must be 3D with positive extents, got {labels.shape}")
        object.__setattr__(self, "labels", labels.astype(np.uint16, copy=False))
        if labels.size and int(labels.max()) >= self.num_classes:
            raise ShapeError(f"SemanticVoxelGrid: label {int(labels.max())} >= num_classes {self.num_classes}")

    @property
    def dims(self):
        return tuple(int(v) for v in self.labels.shape)

    def __eq__(self, other):
        if not isinstance(other, SemanticVoxelGrid):
            return NotImplemented
        return (self.dims == other.dims and self.num_classes == other.num_classes
                and np.float32(self.voxel_size) == np.float32(other.voxel_size)
                and np.array_equal(self.labels, other.labels))

    @classmethod
    def empty(cls, dims, voxel_size, num_classes):
        return cls(np.zeros(tuple(dims), dtype=np.uint16), voxel_size, num_classes)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """One bit per cell"""

    bits: np.ndarray            # (nx, ny, nz) bool

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 3:
            raise ShapeError(f"OccupancyGrid: bits must be 3D, got {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def dims(self):
        return tuple(int(v) for v in self.bits.shape)

    def count(self):
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray                          # (n, 4) x, y, z, intensity in meters
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise FormatError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class VoxelizeStats:
    total: int
    in_bounds: int
    dropped: int


# ---------------------------------------------------------------------------
# atomic writes

def atomic_write_bytes(path, data):
    """Write to a temp file next to path then rename over it"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_magic(path):
    with open(path, "rb") as f:
        return f.read(4)


def _read(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        raise FormatError("file not found", path) from None


# ---------------------------------------------------------------------------
# SVOX

def encode_svox(grid):
    nx, ny, nz = grid.dims
    header = SVOX_HEADER.pack(SVOX_MAGIC, SVOX_VERSION, nx, ny, nz,
                              float(grid.voxel_size), int(grid.num_classes), 0)
    payload = grid.labels.astype("<u2").tobytes(order="F")
    return header + payload


def decode_svox(blob, path=None, label_map=None):
    if len(blob) < 4 or blob[:4] != SVOX_MAGIC:
        raise FormatError("bad magic, expected SVX1", path, 0)
    if len(blob) < SVOX_HEADER.size:
        raise FormatError("truncated SVOX header", path, len(blob))
    _, version, nx, ny, nz, voxel_size, num_classes, _ = SVOX_HEADER.unpack_from(blob)
    if version != SVOX_VERSION:
        raise FormatError(f"unsupported SVOX version {version}", path, 4)
    if min(nx, ny, nz) < 1:
        raise FormatError(f"SVOX dims must be positive, got {(nx, ny, nz)}", path, 8)
    count = nx * ny * nz
    expected = SVOX_HEADER.size + 2 * count
    if len(blob) < expected:
        raise FormatError(f"truncated SVOX payload: {len(blob)} of {expected} bytes", path, len(blob))
    flat = np.frombuffer(blob, dtype="<u2", count=count, offset=SVOX_HEADER.size)
    bad = np.flatnonzero(flat >= num_classes)
    if bad.size:
        first = int(bad[0])
        raise FormatError(f"label {int(flat[first])} >= num_classes {num_classes}",
                          path, SVOX_HEADER.size + 2 * first)
    labels = flat.reshape((nx, ny, nz), order="F").astype(np.uint16)
    if label_map is not None:
        # pass-through id map; dataset taxonomies are not remapped here
        labels = np.asarray(label_map, dtype=np.uint16)[labels]
    return SemanticVoxelGrid(labels, float(voxel_size), int(num_classes))


def load_svox(path, label_map=None):
    """Read an SVOX file"""
    return decode_svox(_read(path), path, label_map)


def save_svox(grid, path):
    atomic_write_bytes(path, encode_svox(grid))


# ---------------------------------------------------------------------------
# OCC1

def encode_occ(occ):
    nx, ny, nz = occ.dims
    packed = np.packbits(occ.bits.ravel(order="F"), bitorder="little")
    return OCC_HEADER.pack(OCC_MAGIC, nx, ny, nz) + packed.tobytes()


def decode_occ(blob, path=None):
    if len(blob) < 4 or blob[:4] != OCC_MAGIC:
        raise FormatError("bad magic, expected OCC1", path, 0)
    if len(blob) < OCC_HEADER.size:
        raise FormatError("truncated OCC1 header", path, len(blob))
    _, nx, ny, nz = OCC_HEADER.unpack_from(blob)
    count = nx * ny * nz
    nbytes = (count + 7) // 8
    if len(blob) < OCC_HEADER.size + nbytes:
        raise FormatError(f"truncated OCC1 payload: need {nbytes} bytes", path, len(blob))
    raw = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=OCC_HEADER.size)
    bits = np.unpackbits(raw, bitorder="little")[:count].astype(bool)
    return OccupancyGrid(bits.reshape((nx, ny, nz), order="F"))


def load_occ(path):
    return decode_occ(_read(path), path)


def save_occ(occ, path):
    atomic_write_bytes(path, encode_occ(occ))


# ---------------------------------------------------------------------------
# LiDAR scans (packed f32 x, y, z, intensity)

def load_scan(path, origin=(0.0, 0.0, 0.0)):
    blob = _read(path)
    if len(blob) % 16:
        raise FormatError(f"scan size {len(blob)} is not a multiple of 16 bytes", path, len(blob) - len(blob) % 16)
    pts = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
    if bad.size:
        raise FormatError("non-finite point coordinates", path, 16 * int(bad[0]))
    return PointCloud(pts, tuple(origin))


def save_scan(cloud, path):
    atomic_write_bytes(path, np.asarray(cloud.points, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# conversions

def voxelize(cloud, dims, voxel_size, origin=None):
    """
    Mark the cell floor((p - origin) / voxel_size) of every in-bounds point.
    Returns the occupancy grid and the in-bounds / dropped counts.
    """
    if voxel_size <= 0:
        raise ShapeError(f"voxelize: voxel_size must be positive, got {voxel_size}")
    dims = tuple(int(v) for v in dims)
    origin = np.asarray(cloud.origin if origin is None else origin, dtype=np.float64)
    bits = np.zeros(dims, dtype=bool)
    if len(cloud) == 0:
        return OccupancyGrid(bits), VoxelizeStats(0, 0, 0)
    idx = np.floor((cloud.points[:, :3] - origin) / voxel_size)
    inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    cells = idx[inside].astype(np.int64)
    bits[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    stats = VoxelizeStats(len(cloud), int(inside.sum()), int((~inside).sum()))
    if stats.dropped:
        logger.debug("voxelize dropped %d of %d points outside %s", stats.dropped, stats.total, dims)
    return OccupancyGrid(bits), stats


def semantics_to_occupancy(grid):
    return OccupancyGrid(grid.labels != 0)


def _check_factor(dims, factor, op):
    factor = tuple(int(f) for f in factor)
    if len(factor) != 3 or min(factor) < 1:
        raise ShapeError(f"{op}: factor must be three positive integers, got {factor}")
    return factor


def downsample_occupancy(occ, factor):
    """Coarse cell is occupied iff any fine cell inside it is"""
    fx, fy, fz = _check_factor(occ.dims, factor, "downsample_occupancy")
    nx, ny, nz = occ.dims
    if nx % fx or ny % fy or nz % fz:
        raise ShapeError(f"downsample_occupancy: dims {occ.dims} not divisible by factor {(fx, fy, fz)}")
    blocks = occ.bits.reshape(nx // fx, fx, ny // fy, fy, nz // fz, fz)
    return OccupancyGrid(blocks.any(axis=(1, 3, 5)))


def upsample_occupancy(occ, factor):
    """Re-expand a coarse mask to fine resolution"""
    fx, fy, fz = _check_factor(occ.dims, factor, "upsample_occupancy")
    bits = np.repeat(np.repeat(np.repeat(occ.bits, fx, axis=0), fy, axis=1), fz, axis=2)
    return OccupancyGrid(bits)


def blocks_fully_inside(known, factor):
    """Coarse cells whose every fine cell is set"""
    fx, fy, fz = _check_factor(known.shape, factor, "blocks_fully_inside")
    nx, ny, nz = known.shape
    return known.reshape(nx // fx, fx, ny // fy, fy, nz // fz, fz).all(axis=(1, 3, 5))


# ---------------------------------------------------------------------------
# windows

def crop_grid(grid, offset, dims):
    """
    Window of grid starting at voxel offset (may be negative or reach past the
    edge); cells outside the source are empty. Also returns the mask of cells
    that came from the source.
    """
    offset = np.asarray(offset, dtype=np.int64)
    dims = tuple(int(v) for v in dims)
    out = np.zeros(dims, dtype=np.uint16)
    inside = np.zeros(dims, dtype=bool)
    src_lo = np.maximum(offset, 0)
    src_hi = np.minimum(offset + np.asarray(dims), np.asarray(grid.dims))
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - offset
        dst_hi = src_hi - offset
        src = tuple(slice(a, b) for a, b in zip(src_lo, src_hi))
        dst = tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))
        out[dst] = grid.labels[src]
        inside[dst] = True
    return SemanticVoxelGrid(out, grid.voxel_size, grid.num_classes), inside


def paste_grid(dst, src, where: Optional[np.ndarray] = None):
    """Copy src labels over dst (same dims) wherever `where` is set (default: src non-empty)"""
    if dst.dims != src.dims:
        raise ShapeError(f"paste_grid: dims {dst.dims} vs {src.dims}")
    mask = src.labels != 0 if where is None else np.asarray(where, dtype=bool)
    labels = np.where(mask, src.labels, dst.labels).astype(np.uint16)
    return SemanticVoxelGrid(labels, dst.voxel_size, dst.num_classes)


def patch_occupancy(grid, patch_dims):
    """Occupancy of (pz, py, px) patches as an (gx, gy, gz) grid"""
    pz, py, px = patch_dims
    return downsample_occupancy(semantics_to_occupancy(grid), (px, py, pz))
