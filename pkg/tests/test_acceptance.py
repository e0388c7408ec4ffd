# End-to-end runs on the tiny config: short training, then conditioned sampling

import numpy as np
import pytest

import numeric_core as nc
from config import RunConfig
from diffusion import model_fn, sample
from graph_vae import VaeTrainer
from scene_pipeline import CompletionRequest, SceneModels, ScenePipeline, stitch
from selftest import synthetic_scene, tiny_config as make_tiny_config
from voxel_io import SemanticVoxelGrid, crop_grid

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def trained():
    config = make_tiny_config()
    rng = nc.Rng(77)
    scenes = [synthetic_scene(rng.split("scene", k)) for k in range(2)]
    pipe = ScenePipeline(config, SceneModels(config))
    curves = {
        "vae": pipe.train_vae(scenes, rng, steps=60, progress=False),
        "structure": pipe.train_structure(scenes, rng, steps=30, progress=False),
        "latent": pipe.train_latent(scenes, rng, steps=30, progress=False),
    }
    return pipe, scenes, curves


def test_vae_overfits_a_single_scene(tiny_config, scene, rng):
    trainer = VaeTrainer(tiny_config)
    _, curve = trainer.train([scene], rng, steps=150, progress=False)
    losses = curve["loss"].to_numpy()
    assert losses[-10:].mean() < losses[:10].mean()


def _toy_config(grid_dims):
    return RunConfig.from_dict({"grid_dims": grid_dims, "voxel_size": 0.5, "num_classes": 3, "patch_dims": [1, 2, 2],
                                "sampler": {"T": 50}})


def test_vae_reaches_target_accuracy_on_four_scenes():
    config = _toy_config([16, 16, 8])
    rng = nc.Rng(21)
    scenes = [synthetic_scene(rng.split("toy", k), dims=(16, 16, 8)) for k in range(4)]
    trainer = VaeTrainer(config)
    params, curve = trainer.train(scenes, rng.split("train"), steps=2000, progress=False)
    assert len(curve) == 2000
    voxel_acc, split_acc = trainer.accuracy(scenes, params)
    assert voxel_acc >= 0.98
    assert split_acc >= 0.99


def test_structure_denoiser_memorizes_one_coarse_grid():
    config = _toy_config([32, 32, 8])
    assert config.coarse_dims == (8, 8, 4)
    scene = synthetic_scene(nc.Rng(33), dims=(32, 32, 8))
    pipe = ScenePipeline(config, SceneModels(config))
    target = pipe.coarse_occupancy(scene).bits
    assert 0 < target.sum() < target.size
    pipe.train_structure([scene], nc.Rng(34), progress=False)

    sched = pipe.sample_schedule
    assert sched.T == 50
    model = model_fn(pipe.structure, pipe.models.structure_params, sched)
    hits = sum(np.array_equal(sample(model, config.coarse_dims, sched, nc.Rng(seed)) > 0.0, target)
               for seed in range(20))
    assert hits >= 18


def test_every_stage_trains(trained):
    pipe, _, curves = trained
    for name, curve in curves.items():
        assert len(curve) > 0, name
        assert np.all(np.isfinite(curve["loss"])), name
    assert pipe.models.latent_scale > 0


def test_completion_keeps_observed_voxels(trained):
    pipe, scenes, _ = trained
    labels = scenes[0].labels.copy()
    labels[:, 4:, :] = 0
    partial = SemanticVoxelGrid(labels, scenes[0].voxel_size, scenes[0].num_classes)
    result = pipe.complete(CompletionRequest(seed=11, partial=partial))
    observed = partial.labels != 0
    np.testing.assert_array_equal(result.grid.labels[observed], partial.labels[observed])


def test_extension_keeps_overlap_slab(trained):
    pipe, scenes, _ = trained
    source = scenes[1]
    ext = pipe.extend(source, overlap=0.5, seed=4)
    expected, inside = crop_grid(source, ext.offset, source.dims)
    np.testing.assert_array_equal(ext.grid.labels[inside], expected.labels[inside])
    merged = stitch(source, ext.grid, ext.offset)
    np.testing.assert_array_equal(merged.labels[:source.dims[0]], source.labels)


def test_generation_is_reproducible_after_training(trained):
    pipe = trained[0]
    assert pipe.generate(seed=9).grid == pipe.generate(seed=9).grid
