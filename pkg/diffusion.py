"""
Diffusion
DDPM schedule, forward noising, ancestral reverse steps and blended
postconditioning: after every reverse step the masked elements are replaced
by a freshly noised copy of the reference,

    x_hat[t-1] = (1 - m) * x_tilde[t-1] + m * x_ref[t-1]

Works on any array shape, so the same sampler drives the dense coarse
structure grid and the per-node latents of the dual graph.
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

import numeric_core as nc
from errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Arrays indexed by step 0..T; index 0 is the clean signal (alpha_bar = 1)"""

    betas: np.ndarray
    alpha_bar: np.ndarray
    model_t: np.ndarray         # timestep index the denoiser was trained with

    @property
    def T(self):
        return len(self.betas) - 1

    @property
    def alphas(self):
        return 1.0 - self.betas

    def posterior_variance(self, t):
        return self.betas[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])

    def posterior_mean_coefs(self, t):
        """(coef on x0, coef on x_t) of the true posterior q(x_{t-1} | x_t, x0)"""
        ab, ab_prev, beta = self.alpha_bar[t], self.alpha_bar[t - 1], self.betas[t]
        return (np.sqrt(ab_prev) * beta / (1.0 - ab),
                np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab))


def make_schedule(T, beta_min=1e-4, beta_max=0.02, kind="linear"):
    if T < 1:
        raise ConfigError(f"make_schedule: T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigError(f"make_schedule: need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T)
    elif kind == "scaled_linear":
        betas = np.linspace(np.sqrt(beta_min), np.sqrt(beta_max), T) ** 2
    else:
        raise ConfigError(f"make_schedule: unknown schedule kind {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas, alpha_bar, np.arange(T + 1))


def respace(sched: NoiseSchedule, steps):
    """Strided schedule over `steps` of the original timesteps; betas recomputed from alpha_bar"""
    if not 1 <= steps <= sched.T:
        raise ConfigError(f"respace: steps must be in [1, {sched.T}], got {steps}")
    if steps == sched.T:
        return sched
    kept = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(np.int64))
    alpha_bar = np.concatenate([[1.0], sched.alpha_bar[kept]])
    betas = np.concatenate([[0.0], 1.0 - alpha_bar[1:] / alpha_bar[:-1]])
    return NoiseSchedule(betas, alpha_bar, np.concatenate([[0], kept]))


def schedule_from_config(sampler):
    sched = make_schedule(sampler.T, sampler.beta_min, sampler.beta_max, sampler.kind)
    if sampler.steps_override:
        sched = respace(sched, sampler.steps_override)
    return sched


def forward_diffuse(x0, t, eps, sched):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps"""
    if not 0 <= t <= sched.T:
        raise ShapeError(f"forward_diffuse: t={t} outside [0, {sched.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    if t == 0:
        return x0.copy()
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def epsilon_from_sample(x_t, x0_hat, alpha_bar_t):
    return (x_t - np.sqrt(alpha_bar_t) * x0_hat) / np.sqrt(1.0 - alpha_bar_t)


def reverse_step(model: Callable, x_t, t, sched, rng, variance="posterior"):
    """
    One ancestral step from the predicted noise. `model(x, t)` gets the step
    index of `sched`; no noise is added on the last step (t = 1).
    """
    if t < 1:
        raise ShapeError("reverse_step: t must be >= 1")
    eps_hat = np.asarray(model(x_t, t), dtype=np.float64)
    if eps_hat.shape != x_t.shape:
        raise ShapeError(f"reverse_step: model returned {eps_hat.shape} for input {x_t.shape}")
    beta, ab = sched.betas[t], sched.alpha_bar[t]
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    var = sched.posterior_variance(t) if variance == "posterior" else beta
    return mean + np.sqrt(var) * nc.rng_normal(rng, x_t.shape)


@dataclass(frozen=True, eq=False)
class BlendMask:
    """Binary mask plus the clean reference for the masked elements"""

    mask: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        ref = np.asarray(self.reference, dtype=np.float64)
        if ref.shape[:mask.ndim] != mask.shape:
            raise ShapeError(f"BlendMask: mask {mask.shape} vs reference {ref.shape}")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "reference", ref)

    def broadcast(self, shape):
        m = self.mask.reshape(self.mask.shape + (1,) * (len(shape) - self.mask.ndim))
        return np.broadcast_to(m, shape)

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(shape, dtype=bool), np.zeros(shape))


def blend_step(x_tilde, mask: BlendMask, t_prev, sched, rng):
    """Overwrite masked elements with the reference noised to t_prev (fresh noise)"""
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    if mask.reference.shape != x_tilde.shape:
        raise ShapeError(f"blend_step: reference {mask.reference.shape} vs sample {x_tilde.shape}")
    x_ref = forward_diffuse(mask.reference, t_prev, nc.rng_normal(rng, x_tilde.shape), sched)
    return np.where(mask.broadcast(x_tilde.shape), x_ref, x_tilde)


def sample(model: Callable, shape, sched, rng, mask: Optional[BlendMask] = None, resample_jumps=1,
           variance="posterior", callback: Optional[Callable] = None):
    """
    Full reverse loop from pure noise. With a mask every step is blended; with
    resample_jumps r > 1 each step is redone r times, re-noising by one step
    in between. callback(t_prev, x) sees every intermediate state.
    """
    shape = tuple(shape)
    x = nc.rng_normal(rng.split("init"), shape)
    for t in range(sched.T, 0, -1):
        for jump in range(resample_jumps):
            x_tilde = reverse_step(model, x, t, sched, rng.split("step", t, jump), variance)
            if mask is not None:
                x = blend_step(x_tilde, mask, t - 1, sched, rng.split("ref", t, jump))
            else:
                x = x_tilde
            if jump < resample_jumps - 1 and t > 1:
                beta = sched.betas[t]
                noise = nc.rng_normal(rng.split("jump", t, jump), shape)
                x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * noise
        if callback is not None:
            callback(t - 1, x)
    return x


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainingItem:
    x0: np.ndarray
    context: object = None


class DenoiserTrainer:
    """Fits a denoiser with the noise-matching objective sum((eps - eps_hat)^2), averaged over the batch"""

    def __init__(self, config, denoiser, sched: NoiseSchedule, lr=None, name="denoiser"):
        self.config = config
        self.denoiser = denoiser
        self.sched = sched
        self.lr = config.model.diffusion_lr if lr is None else lr
        self.name = name

    def loss_graph(self, batch):
        """batch: list of (x_t, t, eps, context)"""
        sched = self.sched

        def build(p):
            total = None
            for x_t, t, eps, ctx in batch:
                eps_hat = self.denoiser.predict_eps_node(p, x_t, t, sched.alpha_bar[t], ctx)
                term = nc.squared_error(eps_hat, eps)
                total = term if total is None else nc.add(total, term)
            return {"loss": nc.mul(total, 1.0 / len(batch))}

        return nc.Graph(build, f"{self.name}_loss")

    def make_batch(self, items: List[TrainingItem], step, rng):
        size = self.config.model.batch_size
        picks = [items[(step * size + b) % len(items)] for b in range(size)]
        ts = rng.split("t", step).generator().integers(1, self.sched.T + 1, size=size)
        batch = []
        for b, (item, t) in enumerate(zip(picks, ts)):
            eps = nc.rng_normal(rng.split("eps", step, b), item.x0.shape)
            batch.append((forward_diffuse(item.x0, int(t), eps, self.sched), int(t), eps, item.context))
        return batch

    def train(self, items: List[TrainingItem], rng, steps, params=None, progress=True):
        if not items:
            raise ShapeError(f"{self.name}: no training items")
        params = params or self.denoiser.init_params(rng.split("init"))
        state = nc.adam_init(params)
        names = sorted(params)
        rows = []
        start = time.time()
        bar = tqdm(range(steps), desc=f"train-{self.name}", disable=not progress)
        for step in bar:
            g = self.loss_graph(self.make_batch(items, step, rng))
            values, grads = nc.value_and_gradient(g, params, "loss", names)
            params, state = nc.adam_step(params, grads, state, lr=self.lr)
            rows.append({"step": step, "loss": float(values["loss"])})
            if step % self.config.model.log_every == 0 or step == steps - 1:
                bar.set_postfix(loss=f"{rows[-1]['loss']:.4f}")
                logger.info("%s step %d loss %.5f", self.name, step, rows[-1]["loss"])
        logger.info("%s training finished in %.1fs", self.name, time.time() - start)
        return params, pd.DataFrame(rows, columns=["step", "loss"])


def model_fn(denoiser, params, sched, context=None):
    """Adapter from sampler step index to the denoiser's own timestep"""
    leaves = nc.as_leaves(params)

    def predict(x, t):
        return denoiser.predict_eps_node(leaves, x, int(sched.model_t[t]), sched.alpha_bar[t], context).value

    return predict
