# Configuration file
# Stores the default settings and reads the run configuration JSON
#
# Constants follow the published experimental setup. Everything that is a
# "knob" lives in RunConfig so a run can be reproduced from one JSON file.

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional, Tuple

from dotenv import load_dotenv

from errors import ConfigError

# load environment variables from .env file
load_dotenv()

# Environment knobs
THREADS = max(1, int(os.getenv("OCTLAT_THREADS", str(os.cpu_count() or 1))))
LOG_LEVEL = os.getenv("OCTLAT_LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("OCTLAT_OUTPUT_DIR", "output")

# Dataset presets (outdoor = SemanticKITTI-like, indoor = Replica-like)
OUTDOOR = {
    "grid_dims": [256, 256, 32],
    "voxel_size": 0.2,
    "num_classes": 20,        # includes class 0 = empty
    "patch_dims": [1, 4, 4],  # (pz, py, px)
}
INDOOR = {
    "grid_dims": [128, 128, 32],
    "voxel_size": 0.05,
    "num_classes": 93,        # 92 semantic classes + empty
    "patch_dims": [1, 2, 2],
}
PRESETS = {"outdoor": OUTDOOR, "indoor": INDOOR}

# Diffusion defaults
DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02

# Output file names
RESULTS_FILE = "run_manifest.json"
VISUALIZATIONS_DIR = "visualizations"


@dataclass(frozen=True)
class ModelConfig:
    """Network widths and training hyperparameters"""

    d_patch: int = 16
    widths: Dict[str, int] = field(default_factory=lambda: {
        "embed": 8,            # class embedding per voxel
        "patch_hidden": 32,    # patch encoder/decoder hidden width
        "vae_hidden": 32,
        "code": 8,             # VAE code width (= stage-2 latent width)
        "unet_hidden": 32,
        "structure_hidden": 32,
        "time": 8,             # sinusoidal timestep features
        "position": 8,         # learned per-cell embedding of the structure CNN
    })
    pool_levels: int = 2
    beta: float = 1e-3
    pool_mode: str = "mean"            # "mean" or "learned"
    unet_levels: int = 1
    pos_frequencies: int = 3
    structure_prediction: str = "epsilon"
    latent_prediction: str = "epsilon"
    vae_lr: float = 1e-3
    diffusion_lr: float = 1e-3
    vae_steps: int = 2000
    structure_steps: int = 2000
    latent_steps: int = 2000
    batch_size: int = 4
    log_every: int = 100

    @property
    def code_width(self):
        return int(self.widths["code"])

    def to_json_dict(self, patch_dims, num_classes):
        # serialized model config (stored next to every checkpoint)
        out = asdict(self)
        out["patch_dims"] = list(patch_dims)
        out["num_classes"] = int(num_classes)
        return out


@dataclass(frozen=True)
class SamplerConfig:
    """DDPM schedule and sampling options"""

    T: int = DEFAULT_T
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX
    kind: str = "linear"
    threshold: float = 0.0
    seed: int = 0
    steps_override: Optional[int] = None
    resample_jumps: int = 1
    variance: str = "posterior"


@dataclass(frozen=True)
class RunConfig:
    """One run: scene geometry, models, sampler, seed"""

    grid_dims: Tuple[int, int, int] = tuple(OUTDOOR["grid_dims"])
    voxel_size: float = OUTDOOR["voxel_size"]
    num_classes: int = OUTDOOR["num_classes"]
    patch_dims: Tuple[int, int, int] = tuple(OUTDOOR["patch_dims"])
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    checkpoints: Dict[str, str] = field(default_factory=dict)
    growth_rounds: int = 0
    overlap: float = 0.5
    preserve_observed: bool = True
    visualize: bool = False

    # derived geometry

    @property
    def patch_grid_dims(self):
        # (gx, gy, gz) patch counts along each axis
        nx, ny, nz = self.grid_dims
        pz, py, px = self.patch_dims
        return (nx // px, ny // py, nz // pz)

    @property
    def patch_depth(self):
        return depth_for(max(self.patch_grid_dims))

    @property
    def structure_depth(self):
        return self.patch_depth - 1 - self.growth_rounds

    @property
    def code_depth(self):
        return self.patch_depth - self.model.pool_levels

    @property
    def coarse_factor(self):
        # voxels per coarse structure cell along (x, y, z)
        pz, py, px = self.patch_dims
        scale = 2 ** (1 + self.growth_rounds)
        return (px * scale, py * scale, pz * scale)

    @property
    def coarse_dims(self):
        gx, gy, gz = self.patch_grid_dims
        scale = 2 ** (1 + self.growth_rounds)
        return (gx // scale, gy // scale, gz // scale)

    def validate(self):
        """Check cross-field consistency before any work is done"""
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 1:
            raise ConfigError(f"grid_dims must be three positive extents, got {self.grid_dims}")
        if len(self.patch_dims) != 3 or min(self.patch_dims) < 1:
            raise ConfigError(f"patch_dims must be three positive extents, got {self.patch_dims}")
        if not 2 <= self.num_classes <= 65535:
            raise ConfigError(f"num_classes must be in [2, 65535], got {self.num_classes}")
        if self.voxel_size <= 0:
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        nx, ny, nz = self.grid_dims
        pz, py, px = self.patch_dims
        if nx % px or ny % py or nz % pz:
            raise ConfigError(
                f"grid_dims {tuple(self.grid_dims)} not divisible by patch_dims (pz,py,px)={tuple(self.patch_dims)}")
        if self.growth_rounds < 0:
            raise ConfigError("growth_rounds must be >= 0")
        scale = 2 ** (1 + self.growth_rounds)
        for axis, g in zip("xyz", self.patch_grid_dims):
            if g % scale:
                raise ConfigError(
                    f"patch grid extent {g} along {axis} must be divisible by {scale} "
                    f"(coarse structure grid with growth_rounds={self.growth_rounds})")
        if self.structure_depth < 0:
            raise ConfigError("structure grid would be shallower than the root; reduce growth_rounds")
        if self.model.pool_levels < 0 or self.code_depth < 0:
            raise ConfigError(
                f"pool_levels={self.model.pool_levels} is deeper than the patch octree (depth {self.patch_depth})")
        if self.code_depth > self.structure_depth + 1:
            raise ConfigError(
                f"pool_levels must be >= growth_rounds + 1 (code depth {self.code_depth}, "
                f"structure depth {self.structure_depth})")
        if not 0 <= self.model.unet_levels <= self.code_depth:
            raise ConfigError(
                f"unet_levels={self.model.unet_levels} must be in [0, code depth {self.code_depth}]")
        if self.model.batch_size < 1:
            raise ConfigError("model.batch_size must be >= 1")
        if self.model.pool_mode not in ("mean", "learned"):
            raise ConfigError(f"pool_mode must be 'mean' or 'learned', got {self.model.pool_mode!r}")
        for name in ("structure_prediction", "latent_prediction"):
            if getattr(self.model, name) not in ("epsilon", "sample"):
                raise ConfigError(f"{name} must be 'epsilon' or 'sample'")
        s = self.sampler
        if s.T < 1:
            raise ConfigError(f"sampler.T must be >= 1, got {s.T}")
        if not 0 < s.beta_min <= s.beta_max < 1:
            raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {s.beta_min}, {s.beta_max}")
        if s.kind not in ("linear", "scaled_linear"):
            raise ConfigError(f"sampler.kind must be 'linear' or 'scaled_linear', got {s.kind!r}")
        if not -1.0 <= s.threshold <= 1.0:
            raise ConfigError(f"sampler.threshold must be in [-1, 1], got {s.threshold}")
        if s.steps_override is not None and not 1 <= s.steps_override <= s.T:
            raise ConfigError(f"steps_override must be in [1, T={s.T}], got {s.steps_override}")
        if s.resample_jumps < 1:
            raise ConfigError("sampler.resample_jumps must be >= 1")
        if s.variance not in ("posterior", "beta"):
            raise ConfigError(f"sampler.variance must be 'posterior' or 'beta', got {s.variance!r}")
        if not 0.0 < self.overlap <= 1.0:
            raise ConfigError(f"overlap must be in (0, 1], got {self.overlap}")
        return self

    def with_overrides(self, **overrides):
        """Apply command-line overrides (flags win over the JSON file)"""
        top = {}
        sampler = {}
        model = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "seed":
                top["seed"] = int(value)
                sampler["seed"] = int(value)
            elif key == "threshold":
                sampler["threshold"] = float(value)
            elif key == "steps_override":
                sampler["steps_override"] = int(value)
            elif key in ("vae_steps", "structure_steps", "latent_steps"):
                model[key] = int(value)
            elif key == "overlap":
                top["overlap"] = float(value)
            else:
                raise ConfigError(f"unknown override {key!r}")
        cfg = self
        if model:
            cfg = replace(cfg, model=replace(cfg.model, **model))
        if sampler:
            cfg = replace(cfg, sampler=replace(cfg.sampler, **sampler))
        if top:
            cfg = replace(cfg, **top)
        return cfg.validate()

    def to_json_dict(self):
        out = asdict(self)
        out["grid_dims"] = list(self.grid_dims)
        out["patch_dims"] = list(self.patch_dims)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        preset = data.pop("preset", None)
        if preset and preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        base = dict(PRESETS[preset]) if preset else {}
        base.update(data)
        try:
            model_data = dict(base.pop("model", {}) or {})
            widths = dict(ModelConfig().widths)
            widths.update(model_data.pop("widths", {}) or {})
            model = ModelConfig(widths=widths, **model_data)
            sampler = SamplerConfig(**(base.pop("sampler", {}) or {}))
            cfg = cls(
                grid_dims=tuple(int(v) for v in base.pop("grid_dims", OUTDOOR["grid_dims"])),
                patch_dims=tuple(int(v) for v in base.pop("patch_dims", OUTDOOR["patch_dims"])),
                model=model,
                sampler=sampler,
                **base,
            )
        except TypeError as e:
            raise ConfigError(f"unknown or malformed config key: {e}") from e
        return cfg.validate()

    @classmethod
    def load(cls, path, **overrides):
        """Read a RunConfig JSON document and apply overrides"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path} (--config)") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(data).with_overrides(**overrides)


def depth_for(extent):
    """Smallest depth d with 2**d >= extent"""
    if extent < 1:
        raise ConfigError(f"extent must be positive, got {extent}")
    return int(math.ceil(math.log2(extent))) if extent > 1 else 0
