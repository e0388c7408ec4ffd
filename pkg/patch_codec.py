"""
Patch Codec
Turns small (pz, py, px) blocks of semantic labels into latent vectors and back.
Empty patches are skipped: they stay empty leaves of the patch octree with a
zero latent and are never decoded.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

import numeric_core as nc
from dual_graph import DualOctreeGraph, dualize
from errors import ShapeError
from graph_layers import dense_init, linear
from octree import build_octree, decode
from voxel_io import SemanticVoxelGrid, patch_occupancy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchSpec:
    patch_dims: Tuple[int, int, int]   # (pz, py, px)
    d_patch: int

    @property
    def voxels(self):
        pz, py, px = self.patch_dims
        return pz * py * px

    def patch_grid(self, dims):
        nx, ny, nz = dims
        pz, py, px = self.patch_dims
        if nx % px or ny % py or nz % pz:
            raise ShapeError(f"grid dims {tuple(dims)} not divisible by patch dims (pz,py,px)={self.patch_dims}")
        return nx // px, ny // py, nz // pz


@dataclass(eq=False)
class LatentField:
    """One vector per graph node; `mask` marks nodes that carry content"""

    graph: DualOctreeGraph
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if len(self.values) != self.graph.num_nodes or len(self.mask) != self.graph.num_nodes:
            raise ShapeError(f"LatentField: {len(self.values)} vectors / {len(self.mask)} flags "
                             f"for {self.graph.num_nodes} nodes")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("LatentField: non-finite latent values")

    @property
    def num_valid(self):
        return int(self.mask.sum())

    def valid_coords(self):
        """Patch coordinates of the valid nodes"""
        x, y, z = decode(self.graph.codes[self.mask])
        return np.stack([x, y, z], axis=1)


def extract_patches(labels, patch_dims):
    """(gx, gy, gz, V) label blocks, each flattened in C order over its (x, y, z) offsets"""
    nx, ny, nz = labels.shape
    pz, py, px = patch_dims
    blocks = labels.reshape(nx // px, px, ny // py, py, nz // pz, pz).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(nx // px, ny // py, nz // pz, px * py * pz)


def assemble_patches(patches, coords, dims, patch_dims, fill=0):
    """Inverse of extract_patches for a subset of patch coordinates"""
    nx, ny, nz = dims
    pz, py, px = patch_dims
    out = np.full((nx // px, ny // py, nz // pz, px * py * pz), fill, dtype=np.asarray(patches).dtype)
    if len(coords):
        out[coords[:, 0], coords[:, 1], coords[:, 2]] = patches
    out = out.reshape(nx // px, ny // py, nz // pz, px, py, pz).transpose(0, 3, 1, 4, 2, 5)
    return out.reshape(nx, ny, nz)


class PatchCodec:
    """Shared patch encoder / decoder"""

    def __init__(self, config):
        self.config = config
        self.spec = PatchSpec(tuple(config.patch_dims), config.model.d_patch)
        self.num_classes = config.num_classes
        self.embed = config.model.widths["embed"]
        self.hidden = config.model.widths["patch_hidden"]

    def init_params(self, rng):
        v, e, h, d, c = self.spec.voxels, self.embed, self.hidden, self.spec.d_patch, self.num_classes
        rng = rng.split("patch")
        params = {"patch.embed": nc.init_weight(rng.split("embed"), 1, c * e).reshape(c, e)}
        params.update(dense_init(rng, "patch.enc1", v * e, h))
        params.update(dense_init(rng, "patch.enc2", h, d))
        params.update(dense_init(rng, "patch.dec1", d, h))
        params.update(dense_init(rng, "patch.dec2", h, v * e))
        params.update(dense_init(rng, "patch.head", e, c))
        return params

    # -- differentiable pieces

    def encode_nodes(self, p, patch_labels):
        """(P, V) labels -> (P, d_patch) latents"""
        patch_labels = np.asarray(patch_labels, dtype=np.int64)
        n, v = patch_labels.shape
        if v != self.spec.voxels:
            raise ShapeError(f"patch_encode: patches of {v} voxels, spec expects {self.spec.voxels}")
        emb = nc.gather(p["patch.embed"], patch_labels.ravel())
        flat = nc.reshape(emb, (n, v * self.embed))
        hidden = linear(flat, p, "patch.enc1", "tanh")
        return linear(hidden, p, "patch.enc2")

    def decode_nodes(self, p, z):
        """(P, d_patch) latents -> (P * V, num_classes) voxel logits"""
        if z.shape[1] != self.spec.d_patch:
            raise ShapeError(f"patch_decode: latent width {z.shape[1]}, spec expects {self.spec.d_patch}")
        n = z.shape[0]
        hidden = linear(z, p, "patch.dec1", "tanh")
        voxels = linear(hidden, p, "patch.dec2", "tanh")
        per_voxel = nc.reshape(voxels, (n * self.spec.voxels, self.embed))
        return linear(per_voxel, p, "patch.head")

    # -- whole-grid operations

    def patch_graph(self, grid):
        """Patch octree (occupied = non-empty patch) and its dual graph"""
        self.spec.patch_grid(grid.dims)
        occ = patch_occupancy(grid, self.spec.patch_dims)
        return dualize(build_octree(occ, self.config.patch_depth))

    def patch_encode(self, grid: SemanticVoxelGrid, params, graph=None) -> LatentField:
        """One latent per non-empty patch over the patch-level dual graph"""
        if grid.num_classes != self.num_classes:
            raise ShapeError(f"patch_encode: grid has {grid.num_classes} classes, codec expects {self.num_classes}")
        graph = graph if graph is not None else self.patch_graph(grid)
        mask = graph.occupied & (graph.depths == self.config.patch_depth)
        values = np.zeros((graph.num_nodes, self.spec.d_patch))
        if mask.any():
            labels = self.node_labels(grid, graph, mask)
            values[mask] = self.encode_nodes(nc.as_leaves(params), labels).value
        return LatentField(graph, values, mask)

    def node_labels(self, grid, graph, mask):
        patches = extract_patches(grid.labels, self.spec.patch_dims)
        x, y, z = decode(graph.codes[mask])
        return patches[x, y, z]

    def patch_decode(self, field: LatentField, params):
        """Voxel logits of valid nodes, shape (valid, V, num_classes)"""
        if field.values.shape[1] != self.spec.d_patch:
            raise ShapeError(f"patch_decode: latent width {field.values.shape[1]}, spec expects {self.spec.d_patch}")
        rows = field.values[field.mask]
        if len(rows) == 0:
            return np.zeros((0, self.spec.voxels, self.num_classes))
        logits = self.decode_nodes(nc.as_leaves(params), nc.leaf(rows)).value
        return logits.reshape(len(rows), self.spec.voxels, self.num_classes)

    def decode_grid(self, field: LatentField, params, dims, voxel_size, observed=None):
        """
        Labels of the full grid: argmax inside decoded patches, empty elsewhere.
        Voxels flagged in `observed` never come out empty: they take the best
        non-empty class instead.
        """
        logits = self.patch_decode(field, params)
        coords = field.valid_coords()
        gx, gy, gz = self.spec.patch_grid(dims)
        inside = np.all(coords < np.array([gx, gy, gz]), axis=1) if len(coords) else np.zeros(0, bool)
        logits, coords = logits[inside], coords[inside]
        labels = logits.argmax(axis=2)
        if observed is not None and len(coords):
            obs = extract_patches(np.asarray(observed, dtype=bool), self.spec.patch_dims)[
                coords[:, 0], coords[:, 1], coords[:, 2]]
            best_occupied = 1 + logits[:, :, 1:].argmax(axis=2)
            labels = np.where(obs & (labels == 0), best_occupied, labels)
        dense = assemble_patches(labels.astype(np.uint16), coords, dims, self.spec.patch_dims)
        return SemanticVoxelGrid(dense, voxel_size, self.num_classes)
