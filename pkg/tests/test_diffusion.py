# Noise schedule, reverse sampling, blended postconditioning and denoiser training

import numpy as np
import pytest

import numeric_core as nc
from config import SamplerConfig
from denoisers import LatentDenoiser, StructureDenoiser
from diffusion import (
    BlendMask, DenoiserTrainer, TrainingItem, blend_step, forward_diffuse, make_schedule, model_fn, respace,
    reverse_step, sample, schedule_from_config,
)
from errors import ConfigError, ShapeError
from graph_vae import GraphVAE
from selftest import blend_masks


def test_linear_schedule_endpoints():
    sched = make_schedule(1000)
    assert sched.T == 1000
    assert sched.alpha_bar[0] == 1.0 and sched.betas[0] == 0.0
    assert sched.betas[1] == pytest.approx(1e-4)
    assert sched.betas[1000] == pytest.approx(0.02)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[-1] < 1e-4


def test_scaled_linear_and_bad_schedules():
    sched = make_schedule(10, kind="scaled_linear")
    assert sched.betas[1] == pytest.approx(1e-4)
    with pytest.raises(ConfigError):
        make_schedule(0)
    with pytest.raises(ConfigError):
        make_schedule(10, beta_min=0.1, beta_max=0.01)
    with pytest.raises(ConfigError, match="cosine"):
        make_schedule(10, kind="cosine")


def test_respace_keeps_original_alpha_bar():
    sched = make_schedule(1000)
    short = respace(sched, 10)
    assert short.T == 10
    assert short.model_t[1] == 1 and short.model_t[-1] == 1000
    np.testing.assert_allclose(short.alpha_bar[1:], sched.alpha_bar[short.model_t[1:]])
    np.testing.assert_allclose(np.cumprod(1.0 - short.betas), short.alpha_bar)
    assert respace(sched, 1000) is sched
    with pytest.raises(ConfigError):
        respace(sched, 0)


def test_schedule_from_config_applies_override():
    sched = schedule_from_config(SamplerConfig(T=100, steps_override=25))
    assert sched.T == 25
    assert schedule_from_config(SamplerConfig(T=100)).T == 100


def test_forward_diffuse_at_zero_is_identity(rng):
    sched = make_schedule(50)
    x0 = nc.rng_normal(rng, (4, 3))
    np.testing.assert_array_equal(forward_diffuse(x0, 0, np.ones((4, 3)), sched), x0)
    with pytest.raises(ShapeError):
        forward_diffuse(x0, 51, x0, sched)


def test_reverse_step_with_true_noise_recovers_clean_signal(rng):
    sched = make_schedule(50)
    x0 = nc.rng_normal(rng.split("x0"), (5,))
    eps = nc.rng_normal(rng.split("eps"), (5,))
    x1 = forward_diffuse(x0, 1, eps, sched)
    out = reverse_step(lambda x, t: eps, x1, 1, sched, rng)
    np.testing.assert_allclose(out, x0, atol=1e-10)


def test_reverse_step_rejects_wrong_model_output(rng):
    sched = make_schedule(5)
    with pytest.raises(ShapeError):
        reverse_step(lambda x, t: np.zeros(3), np.zeros(4), 3, sched, rng)


def test_blend_step_writes_reference_exactly_at_the_end(rng):
    sched = make_schedule(20)
    gen = rng.generator()
    ref = gen.normal(size=(6, 5))
    mask = BlendMask(gen.random((6, 5)) < 0.5, ref)
    x = gen.normal(size=(6, 5))
    out = blend_step(x, mask, 0, sched, rng.split("blend"))
    np.testing.assert_array_equal(out[mask.mask], ref[mask.mask])
    np.testing.assert_array_equal(out[~mask.mask], x[~mask.mask])


def test_node_mask_broadcasts_over_channels(rng):
    sched = make_schedule(10)
    ref = np.arange(12.0).reshape(4, 3)
    mask = BlendMask(np.array([True, False, True, False]), ref)
    out = blend_step(np.zeros((4, 3)), mask, 0, sched, rng)
    np.testing.assert_array_equal(out[[0, 2]], ref[[0, 2]])
    assert not out[[1, 3]].any()


def test_blend_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        BlendMask(np.zeros((3,), bool), np.zeros((4, 2)))


def test_all_zero_mask_is_bit_identical(rng):
    sched = make_schedule(15)

    def model(x, t):
        return 0.3 * np.tanh(x)

    plain = sample(model, (7, 2), sched, rng)
    zero = sample(model, (7, 2), sched, rng, mask=BlendMask.empty((7, 2)))
    np.testing.assert_array_equal(plain, zero)


def test_full_mask_returns_reference(rng):
    sched = make_schedule(15)
    ref = rng.generator().normal(size=(3, 3))
    out = sample(lambda x, t: np.zeros_like(x), (3, 3), sched, rng, mask=BlendMask(np.ones((3, 3), bool), ref))
    np.testing.assert_array_equal(out, ref)


def test_sampling_is_deterministic_per_seed():
    sched = make_schedule(10)

    def model(x, t):
        return 0.1 * x

    a = sample(model, (4,), sched, nc.Rng(5))
    b = sample(model, (4,), sched, nc.Rng(5))
    c = sample(model, (4,), sched, nc.Rng(6))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_resampling_jumps_and_callback(rng):
    sched = make_schedule(6)
    seen = []
    ref = np.ones(4)
    mask = BlendMask(np.array([True, True, False, False]), ref)
    plain = sample(lambda x, t: np.zeros_like(x), (4,), sched, rng, mask=mask)
    jumped = sample(lambda x, t: np.zeros_like(x), (4,), sched, rng, mask=mask, resample_jumps=3,
                    callback=lambda t, x: seen.append(t))
    assert seen == [5, 4, 3, 2, 1, 0]
    np.testing.assert_array_equal(jumped[:2], ref[:2])
    assert not np.array_equal(plain[2:], jumped[2:])


def test_structure_denoiser_starts_at_zero(tiny_config, rng):
    den = StructureDenoiser(tiny_config)
    params = den.init_params(rng)
    x = nc.rng_normal(rng.split("x"), tiny_config.coarse_dims)
    eps = den.predict(params, x, 3, 0.5)
    assert eps.shape == tuple(tiny_config.coarse_dims)
    assert not eps.any()
    with pytest.raises(ShapeError):
        den.predict(params, np.zeros((3, 3, 3)), 3, 0.5)


def test_latent_denoiser_on_code_graph(tiny_config, scene, rng):
    vae = GraphVAE(tiny_config)
    graph = vae.scene_targets(scene).code_graph
    den = LatentDenoiser(tiny_config)
    params = den.init_params(rng)
    params["latent.out.W"] = nc.rng_normal(rng.split("w"), params["latent.out.W"].shape)
    x = nc.rng_normal(rng.split("x"), (graph.num_nodes, den.width))
    eps = den.predict(params, x, 4, 0.7, graph)
    assert eps.shape == x.shape
    assert den.chain(graph) is den.chain(graph)
    with pytest.raises(ShapeError):
        den.predict(params, x[:-1], 4, 0.7, graph)


def test_model_fn_maps_respaced_steps_to_training_steps():
    calls = []

    class Recorder:
        def predict_eps_node(self, p, x, t, alpha_bar_t, context):
            calls.append((t, alpha_bar_t, context))
            return nc.leaf(np.zeros_like(x))

    full = make_schedule(100)
    short = respace(full, 4)
    predict = model_fn(Recorder(), {}, short, context="graph")
    predict(np.zeros(2), 4)
    predict(np.zeros(2), 1)
    assert calls[0][0] == 100 and calls[1][0] == 1
    assert calls[0][1] == pytest.approx(full.alpha_bar[100])
    assert calls[0][2] == "graph"


def test_denoiser_trainer_batches_and_curve(tiny_config, rng):
    sched = make_schedule(tiny_config.sampler.T)
    den = StructureDenoiser(tiny_config)
    trainer = DenoiserTrainer(tiny_config, den, sched, name="structure")
    x0 = np.where(nc.rng_normal(rng.split("x0"), tiny_config.coarse_dims) > 0, 1.0, -1.0)
    items = [TrainingItem(x0), TrainingItem(-x0)]
    a = trainer.make_batch(items, 0, rng)
    b = trainer.make_batch(items, 0, rng)
    assert len(a) == tiny_config.model.batch_size
    for (xa, ta, ea, _), (xb, tb, eb, _) in zip(a, b):
        assert ta == tb and 1 <= ta <= sched.T
        np.testing.assert_array_equal(xa, xb)
    params, curve = trainer.train(items, rng, steps=3, progress=False)
    assert list(curve.columns) == ["step", "loss"]
    assert len(curve) == 3
    assert set(params) == set(den.init_params(rng))
    with pytest.raises(ShapeError):
        trainer.train([], rng, steps=1)


def test_linear_schedule_final_alpha_bar_matches_direct_product():
    sched = make_schedule(1000)
    direct = 1.0
    for k in range(1000):
        direct *= 1.0 - (1e-4 + k * (0.02 - 1e-4) / 999)
    assert sched.alpha_bar[1000] == pytest.approx(direct, rel=1e-9)
    assert sched.alpha_bar[1000] == pytest.approx(4.0e-5, rel=0.05)
    assert make_schedule(1, beta_min=0.3, beta_max=0.3).alpha_bar[1] == pytest.approx(0.7)


@pytest.mark.parametrize("t", [1, 10, 25, 50])
def test_forward_diffuse_marginal_moments(t):
    sched = make_schedule(50)
    x0 = np.array([1.0, -0.5, 2.0])
    eps = nc.rng_normal(nc.Rng(11, t), (200_000, 3))
    x_t = forward_diffuse(x0, t, eps, sched)
    ab = sched.alpha_bar[t]
    np.testing.assert_allclose(x_t.mean(axis=0), np.sqrt(ab) * x0, atol=0.01)
    np.testing.assert_allclose(x_t.var(axis=0), np.full(3, 1.0 - ab), atol=0.01)


def _check_conditioned_samples(model, mask_shape, ref, sched, seed, threshold=None):
    plain = sample(model, ref.shape, sched, nc.Rng(seed))
    for k, m in enumerate(blend_masks(mask_shape, nc.Rng(seed, 7).generator())):
        last = {}
        out = sample(model, ref.shape, sched, nc.Rng(seed), mask=BlendMask(m, ref),
                     callback=lambda t, x: last.__setitem__(t, x.copy()))
        np.testing.assert_array_equal(out, last[0])
        where = BlendMask(m, ref).broadcast(ref.shape)
        np.testing.assert_array_equal(out[where], ref[where], err_msg=f"seed {seed} mask {k}")
        if threshold is not None:
            np.testing.assert_array_equal((out > threshold)[where], (ref > threshold)[where])
        if not m.any():
            np.testing.assert_array_equal(out, plain)


@pytest.mark.parametrize("seed", range(20))
def test_masked_sampling_keeps_references_exactly(seed):
    sched = make_schedule(12)
    gen = nc.Rng(seed, 8).generator()

    def model(x, t):
        return 0.4 * np.tanh(x) + 0.01 * t

    occupancy = np.where(gen.random((8, 8, 4)) < 0.3, 1.0, -1.0)
    _check_conditioned_samples(model, occupancy.shape, occupancy, sched, seed, threshold=0.0)
    latents = gen.normal(size=(17, 3))
    _check_conditioned_samples(model, (17,), latents, sched, seed)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_masked_sampling_with_trained_networks(tiny_config, scene, seed):
    sched = make_schedule(8)
    rng = nc.Rng(seed, 9)

    structure = StructureDenoiser(tiny_config)
    sparams = structure.init_params(rng.split("structure"))
    sparams["structure.out.W"] = 0.5 * nc.rng_normal(rng.split("sw"), sparams["structure.out.W"].shape)
    occupancy = np.where(rng.split("occ").generator().random(tiny_config.coarse_dims) < 0.5, 1.0, -1.0)
    _check_conditioned_samples(model_fn(structure, sparams, sched), occupancy.shape, occupancy, sched, seed,
                               threshold=0.0)

    graph = GraphVAE(tiny_config).scene_targets(scene).code_graph
    latent = LatentDenoiser(tiny_config)
    lparams = latent.init_params(rng.split("latent"))
    lparams["latent.out.W"] = 0.5 * nc.rng_normal(rng.split("lw"), lparams["latent.out.W"].shape)
    refs = nc.rng_normal(rng.split("refs"), (graph.num_nodes, latent.width))
    _check_conditioned_samples(model_fn(latent, lparams, sched, graph), (graph.num_nodes,), refs, sched, seed)
