# Scene Pipeline - the two-stage generator put together
# Stage 1 samples the coarse split grid, stage 2 samples latents on the code
# graph, then the VAE and the patch codec decode them into semantic voxels.
#
# complete() and extend() are the same run with observations: a coarse
# occupancy mask for stage 1 and anchored node latents for stage 2. With no
# observations the run is exactly generate() for the same seed.

import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import numeric_core as nc
from denoisers import LatentDenoiser, StructureDenoiser
from diffusion import (BlendMask, DenoiserTrainer, TrainingItem, make_schedule, model_fn, sample,
                       schedule_from_config)
from dual_graph import DualOctreeGraph, dualize
from errors import ConditioningError, ConfigError, ShapeError
from graph_vae import GraphVAE, VaeTrainer
from octree import encode, structure_octree
from voxel_io import (OccupancyGrid, PointCloud, SemanticVoxelGrid, atomic_write_bytes, blocks_fully_inside,
                      crop_grid, downsample_occupancy, encode_occ, load_svox, paste_grid, semantics_to_occupancy,
                      voxelize)

logger = logging.getLogger(__name__)

SPLIT_LOGIT_THRESHOLD = 0.0
COMPONENTS = ("vae", "structure", "latent")


@dataclass
class SceneModels:
    """Trained parameters of every component; any of them may be missing until trained"""

    config: object
    params: Optional[Dict[str, np.ndarray]] = None              # patch codec + graph VAE
    structure_params: Optional[Dict[str, np.ndarray]] = None
    latent_params: Optional[Dict[str, np.ndarray]] = None
    latent_scale: float = 1.0

    def require(self, *names):
        missing = [n for n in names if self._get(n) is None]
        if missing:
            raise ConfigError(f"missing trained model(s) {', '.join(missing)}; "
                              f"set checkpoints.{missing[0]} in the run config (--config)")
        return self

    def _get(self, name):
        return {"vae": self.params, "structure": self.structure_params, "latent": self.latent_params}[name]

    def save(self, directory, names=COMPONENTS):
        """Write one OLP1 file per trained component; returns {component: path}"""
        os.makedirs(directory, exist_ok=True)
        meta = self.config.model.to_json_dict(self.config.patch_dims, self.config.num_classes)
        paths = {}
        for name in names:
            params = self._get(name)
            if params is None:
                continue
            if name == "latent":
                params = dict(params)
                params["latent.scale"] = np.array([self.latent_scale])
            path = os.path.join(directory, f"{name}.olp")
            nc.save_checkpoint(params, path, meta)
            paths[name] = path
        return paths

    @classmethod
    def load(cls, config, paths=None):
        """Read the checkpoints named in config.checkpoints (or `paths`)"""
        paths = dict(config.checkpoints if paths is None else paths)
        unknown = set(paths) - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"unknown checkpoint component(s) {sorted(unknown)}; expected {list(COMPONENTS)}")
        models = cls(config)
        for name, path in paths.items():
            if not path:
                continue
            params = nc.load_checkpoint(path)
            _check_meta(config, path)
            if name == "vae":
                models.params = params
            elif name == "structure":
                models.structure_params = params
            else:
                scale = params.pop("latent.scale", None)
                models.latent_scale = float(scale.ravel()[0]) if scale is not None else 1.0
                models.latent_params = params
        return models


def _check_meta(config, path):
    try:
        meta = nc.load_model_config(path)
    except FileNotFoundError:
        logger.warning("checkpoint %s has no model config next to it, skipping consistency check", path)
        return
    if list(meta.get("patch_dims", config.patch_dims)) != list(config.patch_dims):
        raise ConfigError(f"checkpoint {path} was trained with patch_dims {meta['patch_dims']}, "
                          f"run config has {list(config.patch_dims)}")
    if int(meta.get("num_classes", config.num_classes)) != config.num_classes:
        raise ConfigError(f"checkpoint {path} was trained with {meta['num_classes']} classes, "
                          f"run config has {config.num_classes}")


@dataclass
class CompletionRequest:
    """Observations for one run; all optional, an empty request means unconditional generation"""

    seed: Optional[int] = None
    scan: Optional[PointCloud] = None
    origin: Optional[Tuple[float, float, float]] = None
    partial: Optional[SemanticVoxelGrid] = None
    occupancy: Optional[OccupancyGrid] = None
    known: Optional[np.ndarray] = None          # voxels whose content (including emptiness) is known


@dataclass
class AnchorResult:
    mask: np.ndarray                # (N,) nodes with a reference latent
    refs: np.ndarray                # (N, code width) in diffusion space (scaled)
    graph: DualOctreeGraph


@dataclass
class SceneResult:
    grid: SemanticVoxelGrid
    coarse: OccupancyGrid
    node_mask: np.ndarray
    stats: Dict[str, object] = field(default_factory=dict)
    code_graph: Optional[DualOctreeGraph] = None

    @property
    def empty(self):
        return bool(self.stats.get("empty_scene", False))


@dataclass
class ExtensionResult:
    result: SceneResult
    offset: Tuple[int, int, int]
    inside: np.ndarray              # window voxels that came from the source

    @property
    def grid(self):
        return self.result.grid


@dataclass
class RunManifest:
    """Everything needed to reproduce one CLI run"""

    command: str
    seed: int
    config: dict
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def add_input(self, path):
        self.inputs[str(path)] = file_sha256(path)

    def add_output(self, path):
        self.outputs[str(path)] = file_sha256(path)

    def write(self, path):
        blob = json.dumps(asdict(self), indent=2, sort_keys=True).encode("utf-8")
        atomic_write_bytes(path, blob)
        return path


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stitch(source: SemanticVoxelGrid, window: SemanticVoxelGrid, offset):
    """Union of the source and an extension window placed at `offset` (window wins where they overlap)"""
    offset = np.asarray(offset, dtype=np.int64)
    lo = np.minimum(0, offset)
    hi = np.maximum(np.asarray(source.dims), offset + np.asarray(window.dims))
    out = np.zeros(tuple(int(v) for v in hi - lo), dtype=np.uint16)
    s = -lo
    out[s[0]:s[0] + source.dims[0], s[1]:s[1] + source.dims[1], s[2]:s[2] + source.dims[2]] = source.labels
    w = offset - lo
    out[w[0]:w[0] + window.dims[0], w[1]:w[1] + window.dims[1], w[2]:w[2] + window.dims[2]] = window.labels
    return SemanticVoxelGrid(out, source.voxel_size, source.num_classes)


class ScenePipeline:
    """Runs generation, completion and extension with one set of models"""

    def __init__(self, config, models: Optional[SceneModels] = None):
        self.config = config.validate()
        self.models = models or SceneModels(config)
        self.vae = GraphVAE(config)
        self.codec = self.vae.codec
        self.structure = StructureDenoiser(config)
        self.latent = LatentDenoiser(config)
        s = config.sampler
        self.train_schedule = make_schedule(s.T, s.beta_min, s.beta_max, s.kind)
        self.sample_schedule = schedule_from_config(s)

    # ------------------------------------------------------------------
    # training

    def coarse_occupancy(self, grid: SemanticVoxelGrid):
        return downsample_occupancy(semantics_to_occupancy(grid), self.config.coarse_factor)

    def _check_scenes(self, scenes):
        if not scenes:
            raise ShapeError("no training scenes")
        for k, grid in enumerate(scenes):
            if grid.dims != tuple(self.config.grid_dims) or grid.num_classes != self.config.num_classes:
                raise ShapeError(f"training scene {k}: dims {grid.dims} / {grid.num_classes} classes, run config "
                                 f"expects {tuple(self.config.grid_dims)} / {self.config.num_classes}")

    def train_vae(self, scenes, rng, steps=None, progress=True):
        self._check_scenes(scenes)
        params, curve = VaeTrainer(self.config, self.vae).train(scenes, rng.split("vae"), steps,
                                                               self.models.params, progress)
        self.models.params = params
        return curve

    def train_structure(self, scenes, rng, steps=None, progress=True):
        self._check_scenes(scenes)
        items = [TrainingItem(np.where(self.coarse_occupancy(g).bits, 1.0, -1.0)) for g in scenes]
        trainer = DenoiserTrainer(self.config, self.structure, self.train_schedule, name="structure")
        steps = self.config.model.structure_steps if steps is None else steps
        params, curve = trainer.train(items, rng.split("structure"), steps, self.models.structure_params, progress)
        self.models.structure_params = params
        return curve

    def latent_items(self, scenes):
        """VAE means on each scene's code graph, plus the scale that brings them to unit variance"""
        self.models.require("vae")
        codes = [self.vae.encode_scene(g, self.models.params) for g in scenes]
        spread = float(np.concatenate([c.mu.ravel() for c in codes]).std())
        scale = 1.0 / spread if spread > 1e-8 else 1.0
        return [TrainingItem(c.mu * scale, c.graph) for c in codes], scale

    def train_latent(self, scenes, rng, steps=None, progress=True):
        self._check_scenes(scenes)
        items, scale = self.latent_items(scenes)
        self.models.latent_scale = scale
        logger.info("latent scale %.5f over %d scenes", scale, len(scenes))
        trainer = DenoiserTrainer(self.config, self.latent, self.train_schedule, name="latent")
        steps = self.config.model.latent_steps if steps is None else steps
        params, curve = trainer.train(items, rng.split("latent"), steps, self.models.latent_params, progress)
        self.models.latent_params = params
        return curve

    def fit(self, scenes, rng=None, progress=True):
        """Train VAE, then structure, then latent denoiser; returns the loss curves"""
        rng = rng or nc.Rng(self.config.seed)
        curves = {"vae": self.train_vae(scenes, rng, progress=progress),
                  "structure": self.train_structure(scenes, rng, progress=progress),
                  "latent": self.train_latent(scenes, rng, progress=progress)}
        return curves

    # ------------------------------------------------------------------
    # observations

    def _observations(self, request: CompletionRequest):
        dims = tuple(self.config.grid_dims)
        observed = np.zeros(dims, dtype=bool)
        stats = {"scan_points": 0, "scan_dropped": 0}
        if request.scan is not None:
            origin = request.origin if request.origin is not None else request.scan.origin
            occ, vs = voxelize(request.scan, dims, self.config.voxel_size, origin)
            stats.update(scan_points=vs.total, scan_dropped=vs.dropped)
            if vs.total and not vs.in_bounds:
                raise ConditioningError(
                    f"complete: all {vs.total} scan points fall outside the {dims} grid "
                    f"(voxel size {self.config.voxel_size}) from origin {tuple(origin)}; check --origin")
            observed |= occ.bits
        if request.occupancy is not None:
            if request.occupancy.dims != dims:
                raise ConditioningError(f"complete: occupancy mask dims {request.occupancy.dims}, grid is {dims}")
            observed |= request.occupancy.bits
        if request.partial is not None:
            if request.partial.dims != dims:
                raise ConditioningError(f"complete: partial grid dims {request.partial.dims}, grid is {dims}")
            if request.partial.num_classes != self.config.num_classes:
                raise ConditioningError(f"complete: partial grid has {request.partial.num_classes} classes, "
                                        f"models use {self.config.num_classes}")
            observed |= request.partial.labels != 0
        known = None
        if request.known is not None:
            known = np.asarray(request.known, dtype=bool)
            if known.shape != dims:
                raise ConditioningError(f"complete: known-voxel mask {known.shape}, grid is {dims}")
        stats["observed_voxels"] = int(observed.sum())
        return observed, known, stats

    def observed_patch_codes(self, observed):
        pz, py, px = self.config.patch_dims
        patches = downsample_occupancy(OccupancyGrid(observed), (px, py, pz))
        x, y, z = np.nonzero(patches.bits)
        return np.unique(encode(x, y, z))

    def structure_mask(self, observed, known=None):
        """Blend mask on the coarse grid: observed cells are +1, fully known empty cells -1"""
        coarse_obs = downsample_occupancy(OccupancyGrid(observed), self.config.coarse_factor).bits
        mask = coarse_obs.copy()
        if known is not None:
            mask |= blocks_fully_inside(known, self.config.coarse_factor)
        return coarse_obs, BlendMask(mask, np.where(coarse_obs, 1.0, -1.0))

    # ------------------------------------------------------------------
    # stage-2 anchoring

    def anchor_semantics(self, partial: SemanticVoxelGrid, graph: Optional[DualOctreeGraph] = None):
        """
        Reference latents for the code-graph nodes whose footprint contains an
        observed voxel of `partial`. With `graph` the anchors are moved onto
        that graph (nodes it does not have are dropped).
        """
        self.models.require("vae")
        if partial.dims != tuple(self.config.grid_dims):
            raise ConditioningError(f"anchor_semantics: partial grid dims {partial.dims}, "
                                    f"expected {tuple(self.config.grid_dims)}")
        code = self.vae.encode_scene(partial, self.models.params)
        own = code.graph
        hits = own.footprint_hits(self.observed_patch_codes(partial.labels != 0), self.config.patch_depth)
        refs = code.mu * self.models.latent_scale
        if graph is None:
            return AnchorResult(hits, np.where(hits[:, None], refs, 0.0), own)
        mask = np.zeros(graph.num_nodes, dtype=bool)
        out = np.zeros((graph.num_nodes, refs.shape[1]))
        src = np.flatnonzero(hits)
        dst = graph.index_of(own.depths[src], own.codes[src])
        ok = dst >= 0
        if np.any(~ok):
            logger.debug("anchor_semantics: %d observed nodes missing from the target graph", int((~ok).sum()))
        mask[dst[ok]] = True
        out[dst[ok]] = refs[src[ok]]
        return AnchorResult(mask, out, graph)

    # ------------------------------------------------------------------
    # runs

    def generate(self, seed=None, dump_dir=None):
        return self._run(CompletionRequest(seed=seed), dump_dir)

    def complete(self, request: CompletionRequest, dump_dir=None):
        return self._run(request, dump_dir)

    def extend(self, grid: SemanticVoxelGrid, offset=None, overlap=None, seed=None, dump_dir=None):
        """
        Outpaint a window of the configured size. By default the window moves
        along +x so that `overlap` of it is shared with the source; offsets are
        snapped to whole coarse cells.
        """
        overlap = self.config.overlap if overlap is None else float(overlap)
        if not 0.0 < overlap <= 1.0:
            raise ConfigError(f"extend: overlap must be in (0, 1], got {overlap} (--overlap)")
        if grid.num_classes != self.config.num_classes:
            raise ConditioningError(f"extend: source has {grid.num_classes} classes, models use "
                                    f"{self.config.num_classes}")
        dims = tuple(self.config.grid_dims)
        factor = np.asarray(self.config.coarse_factor, dtype=np.int64)
        if offset is None:
            shift = int(round((1.0 - overlap) * dims[0]))
            offset = (shift, 0, 0)
        offset = tuple(int(v) for v in (np.asarray(offset, dtype=np.int64) // factor) * factor)
        partial, inside = crop_grid(grid, offset, dims)
        if not inside.any():
            raise ConditioningError(f"extend: window at offset {offset} does not overlap the source {grid.dims}")
        logger.info("extend: window offset %s, %.1f%% of the window known", offset, 100.0 * inside.mean())
        result = self._run(CompletionRequest(seed=seed, partial=partial, known=inside), dump_dir)
        return ExtensionResult(result, offset, inside)

    def _trajectory_callback(self, dump_dir, stage):
        if dump_dir is None:
            return None
        os.makedirs(dump_dir, exist_ok=True)
        threshold = self.config.sampler.threshold

        def dump(t, x):
            if stage == "structure":
                atomic_write_bytes(os.path.join(dump_dir, f"structure_{t:04d}.occ"),
                                   encode_occ(OccupancyGrid(x > threshold)))
            else:
                buf = io.BytesIO()
                np.save(buf, x)
                atomic_write_bytes(os.path.join(dump_dir, f"latent_{t:04d}.npy"), buf.getvalue())

        return dump

    def _run(self, request: CompletionRequest, dump_dir=None) -> SceneResult:
        self.models.require(*COMPONENTS)
        cfg = self.config
        seed = cfg.seed if request.seed is None else int(request.seed)
        rng = nc.Rng(seed)
        start = time.time()
        observed, known, stats = self._observations(request)
        stats["seed"] = seed

        # stage 1: coarse structure
        coarse_obs, smask = self.structure_mask(observed, known)
        conditioned = bool(smask.mask.any())
        x = sample(model_fn(self.structure, self.models.structure_params, self.sample_schedule),
                   cfg.coarse_dims, self.sample_schedule, rng.split("structure"),
                   mask=smask if conditioned else None, resample_jumps=cfg.sampler.resample_jumps,
                   variance=cfg.sampler.variance, callback=self._trajectory_callback(dump_dir, "structure"))
        coarse = OccupancyGrid((x > cfg.sampler.threshold) | coarse_obs)
        stats["coarse_cells"] = coarse.count()
        dims = tuple(cfg.grid_dims)
        if coarse.count() == 0:
            logger.warning("structure stage produced no occupied cells, returning an empty scene")
            stats.update(empty_scene=True, wall_time=time.time() - start)
            return SceneResult(SemanticVoxelGrid.empty(dims, cfg.voxel_size, cfg.num_classes), coarse,
                               np.zeros(0, dtype=bool), stats)

        struct = structure_octree(coarse, cfg.patch_depth)
        code_graph = dualize(struct.truncate(cfg.code_depth))
        stats["code_nodes"] = code_graph.num_nodes

        # stage 2: node latents
        anchors = None
        if request.partial is not None and np.any(request.partial.labels):
            anchors = self.anchor_semantics(request.partial, code_graph)
            if not anchors.mask.any():
                anchors = None
        node_mask = anchors.mask if anchors is not None else np.zeros(code_graph.num_nodes, dtype=bool)
        stats["anchored_nodes"] = int(node_mask.sum())
        shape = (code_graph.num_nodes, self.latent.width)
        x = sample(model_fn(self.latent, self.models.latent_params, self.sample_schedule, code_graph),
                   shape, self.sample_schedule, rng.split("latent"),
                   mask=BlendMask(anchors.mask, anchors.refs) if anchors is not None else None,
                   resample_jumps=cfg.sampler.resample_jumps, variance=cfg.sampler.variance,
                   callback=self._trajectory_callback(dump_dir, "latent"))
        z = x / self.models.latent_scale

        # decode
        forced = self.observed_patch_codes(observed)
        given = [struct.split[d] for d in range(cfg.code_depth, struct.max_depth)]
        decoded = self.vae.vae_decode(z, code_graph, self.models.params, splits=given, force_leaves=forced,
                                      threshold=SPLIT_LOGIT_THRESHOLD)
        grid = self.codec.decode_grid(decoded.field, self.models.params, dims, cfg.voxel_size, observed=observed)
        if cfg.preserve_observed and request.partial is not None:
            where = known if known is not None else request.partial.labels != 0
            grid = paste_grid(grid, request.partial, where)
        stats.update(forced_patches=len(forced), valid_patches=decoded.field.num_valid,
                     occupied_voxels=int(np.count_nonzero(grid.labels)), empty_scene=False,
                     wall_time=time.time() - start)
        logger.info("run seed %d: %d coarse cells, %d code nodes, %d anchored, %d patches decoded",
                    seed, stats["coarse_cells"], stats["code_nodes"], stats["anchored_nodes"],
                    stats["valid_patches"])
        return SceneResult(grid, coarse, node_mask, stats, code_graph)


def load_scenes(paths: Sequence[str]) -> List[SemanticVoxelGrid]:
    return [load_svox(p) for p in paths]


def loss_table(curves: Dict[str, pd.DataFrame]):
    """One long DataFrame (component, step, loss) out of per-component curves"""
    frames = [c.assign(component=name)[["component", "step", "loss"]] for name, c in curves.items() if len(c)]
    if not frames:
        return pd.DataFrame(columns=["component", "step", "loss"])
    return pd.concat(frames, ignore_index=True)
