# Patch codec, graph layers and the graph VAE

import numpy as np
import pytest

import numeric_core as nc
from dual_graph import NUM_KERNEL_SLOTS, SELF_SLOT, dualize
from errors import ShapeError, StructureError
from graph_layers import (
    conv3d, conv3d_init, conv3d_table, fourier_features, graph_conv, graph_conv_init, position_features,
    position_width, timestep_embedding,
)
from graph_vae import GraphVAE, VaeTrainer, vae_loss
from octree import Octree, build_octree
from patch_codec import PatchCodec, assemble_patches, extract_patches
from selftest import GRADIENT_TOLERANCE, gradient_cases
from voxel_io import OccupancyGrid, patch_occupancy


def _split_first_octant_graph():
    keys = [np.array([0], np.uint64), np.arange(8, dtype=np.uint64), np.arange(8, dtype=np.uint64)]
    split = [np.array([True]), np.array([True] + [False] * 7), np.zeros(8, dtype=bool)]
    occupied = [np.zeros(1, bool), np.ones(8, bool), np.ones(8, bool)]
    return dualize(Octree(keys, split, occupied))


def _graph_conv_oracle(graph, h, W, b):
    cout = W.shape[1] // NUM_KERNEL_SLOTS
    slot = [W[:, s * cout:(s + 1) * cout] for s in range(NUM_KERNEL_SLOTS)]
    n = graph.num_nodes
    out = np.zeros((n, cout))
    for i in range(n):
        by_type = {}
        for j in range(n):
            if i == j:
                continue
            lo_i, hi_i, lo_j, hi_j = graph.lo[i], graph.hi[i], graph.lo[j], graph.hi[j]
            for axis in range(3):
                others = [a for a in range(3) if a != axis]
                overlap = all(min(hi_i[a], hi_j[a]) > max(lo_i[a], lo_j[a]) for a in others)
                if overlap and hi_i[axis] == lo_j[axis]:
                    by_type.setdefault(2 * axis, []).append(j)
                elif overlap and hi_j[axis] == lo_i[axis]:
                    by_type.setdefault(2 * axis + 1, []).append(j)
        out[i] = h[i] @ slot[SELF_SLOT] + b[0]
        for t, sources in by_type.items():
            out[i] += sum(h[j] @ slot[t] for j in sources) / len(sources)
    return out


def test_patch_extract_assemble_inverse(scene):
    patches = extract_patches(scene.labels, (1, 2, 2))
    assert patches.shape == (4, 4, 4, 4)
    np.testing.assert_array_equal(patches[1, 0, 2], scene.labels[2:4, 0:2, 2].ravel())
    gx, gy, gz = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    back = assemble_patches(patches[coords[:, 0], coords[:, 1], coords[:, 2]], coords, scene.dims, (1, 2, 2))
    np.testing.assert_array_equal(back, scene.labels)


def test_patch_encode_covers_non_empty_patches(tiny_config, scene, rng):
    codec = PatchCodec(tiny_config)
    params = codec.init_params(rng)
    field = codec.patch_encode(scene, params)
    assert field.num_valid == patch_occupancy(scene, tiny_config.patch_dims).count()
    assert field.values.shape == (field.graph.num_nodes, tiny_config.model.d_patch)
    assert not field.values[~field.mask].any()
    logits = codec.patch_decode(field, params)
    assert logits.shape == (field.num_valid, 4, 3)


def test_patch_decode_rejects_wrong_width(tiny_config, scene, rng):
    codec = PatchCodec(tiny_config)
    with pytest.raises(ShapeError):
        codec.encode_nodes(nc.as_leaves(codec.init_params(rng)), np.zeros((2, 5), dtype=np.int64))


def test_decode_grid_keeps_observed_voxels_occupied(tiny_config, floor_scene, rng):
    codec = PatchCodec(tiny_config)
    params = codec.init_params(rng)
    # push every voxel towards the empty class
    params["patch.head.b"] = np.array([[50.0, 0.0, 0.0]])
    field = codec.patch_encode(floor_scene, params)
    observed = floor_scene.labels != 0
    grid = codec.decode_grid(field, params, floor_scene.dims, floor_scene.voxel_size, observed)
    assert np.all(grid.labels[observed] != 0)
    assert grid.num_classes == 3
    plain = codec.decode_grid(field, params, floor_scene.dims, floor_scene.voxel_size)
    assert not plain.labels.any()


def test_graph_conv_matches_per_node_summation(rng):
    graph = _split_first_octant_graph()
    params = graph_conv_init(rng, "gc", 2, 3)
    params["gc.b"] = nc.rng_normal(rng.split("b"), (1, 3))
    h = nc.rng_normal(rng.split("h"), (graph.num_nodes, 2))
    out = graph_conv(graph, nc.leaf(h), nc.as_leaves(params), "gc", activation="linear").value
    np.testing.assert_allclose(out, _graph_conv_oracle(graph, h, params["gc.W"], params["gc.b"]), atol=1e-12)


def test_graph_conv_width_mismatch(rng):
    graph = _split_first_octant_graph()
    params = graph_conv_init(rng, "gc", 2, 3)
    with pytest.raises(ShapeError, match="width 4"):
        graph_conv(graph, nc.leaf(np.zeros((graph.num_nodes, 4))), nc.as_leaves(params), "gc")


def test_conv3d_table_pads_outside_taps(rng):
    table = conv3d_table((2, 2, 2))
    assert table.shape == (8, 27)
    assert (table[0] < 8).sum() == 8
    params = conv3d_init(rng, "c", 1, 1)
    params["c.W"] = np.zeros((27, 1))
    params["c.W"][13] = 1.0                     # centre tap
    h = np.arange(8.0)[:, None]
    out = conv3d(nc.leaf(h), table, nc.as_leaves(params), "c", activation="linear").value
    np.testing.assert_allclose(out, h)


def test_position_and_time_features(tiny_config):
    graph = _split_first_octant_graph()
    pos = position_features(graph, 2)
    assert pos.shape == (graph.num_nodes, position_width(2))
    assert fourier_features(np.zeros((3, 3)), 0).shape == (3, 0)
    emb = timestep_embedding(7, 5)
    assert emb.shape == (5,)
    np.testing.assert_allclose(timestep_embedding(0, 4), [0.0, 0.0, 1.0, 1.0])


def test_vae_encode_shapes(tiny_config, scene, rng):
    vae = GraphVAE(tiny_config)
    params = vae.init_all(rng)
    field = vae.codec.patch_encode(scene, params)
    code = vae.vae_encode(field, params)
    assert code.graph.max_depth == tiny_config.code_depth
    assert code.mu.shape == (code.graph.num_nodes, tiny_config.model.code_width)
    np.testing.assert_array_equal(code.z, code.mu)
    noisy = vae.vae_encode(field, params, rng.split("eps"))
    assert not np.array_equal(noisy.z, noisy.mu)
    assert code.graph.same_structure(vae.code_graph(field.graph.octree))


def test_vae_decode_with_given_structure_rebuilds_patch_graph(tiny_config, scene, rng):
    vae = GraphVAE(tiny_config)
    params = vae.init_all(rng)
    targets = vae.scene_targets(scene)
    code = vae.encode_scene(scene, params, targets)
    out = vae.vae_decode(code, targets.code_graph, params, splits=targets.split_targets,
                         occupancy=targets.occupancy_target)
    assert out.field.graph.same_structure(targets.graph)
    expected = targets.graph.occupied & (targets.graph.depths == tiny_config.patch_depth)
    np.testing.assert_array_equal(out.field.mask, expected)
    assert len(out.split_logits) == tiny_config.patch_depth - tiny_config.code_depth


def test_forced_leaves_are_grown_and_kept(tiny_config, scene, rng):
    vae = GraphVAE(tiny_config)
    params = vae.init_all(rng)
    targets = vae.scene_targets(scene)
    z = np.zeros((targets.code_graph.num_nodes, vae.code_width))
    forced = np.array([13], dtype=np.uint64)
    out = vae.vae_decode(z, targets.code_graph, params, force_leaves=forced, threshold=1e9)
    final = out.field.graph
    assert out.split_flags[0].sum() == 1
    assert final.codes[out.field.mask].tolist() == [13]
    assert final.depths[out.field.mask].tolist() == [tiny_config.patch_depth]


def test_decode_rejects_graph_deeper_than_patches(tiny_config, rng):
    vae = GraphVAE(tiny_config)
    deep = dualize(build_octree(OccupancyGrid(np.ones((8, 8, 8), dtype=bool))))
    with pytest.raises(StructureError):
        vae.decode_nodes(nc.as_leaves(vae.init_all(rng)), nc.leaf(np.zeros((deep.num_nodes, vae.code_width))), deep)


def test_vae_loss_reference_values():
    out = vae_loss(np.zeros((4, 2)), np.array([0, 1, 1, 0]), [np.zeros(3)], [np.array([1, 0, 1])],
                   np.zeros((2, 3)), np.zeros((2, 3)), beta=0.5)
    assert out.l_sem == pytest.approx(np.log(2.0))
    assert out.l_octree == pytest.approx(np.log(2.0))
    assert out.l_kl == 0.0
    assert out.total == pytest.approx(2 * np.log(2.0))


GRADIENT_SEEDS = [0] + [pytest.param(s, marks=pytest.mark.slow) for s in range(1, 20)]


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_gradients_of_every_network_match_finite_differences(seed):
    for name, graph, inputs, names in gradient_cases(seed=seed):
        err = nc.check_gradients(graph, inputs, "loss", names, max_coords=3, rng=nc.Rng(seed, 9))
        assert err <= GRADIENT_TOLERANCE, f"{name} (seed {seed})"


def test_vae_trainer_reports_curve(tiny_config, scenes, rng):
    trainer = VaeTrainer(tiny_config)
    params, curve = trainer.train(scenes, rng, steps=3, progress=False)
    assert list(curve.columns) == ["step", "loss", "l_sem", "l_octree", "l_kl"]
    assert len(curve) == 3
    assert np.all(np.isfinite(curve["loss"]))
    voxel_acc, split_acc = trainer.accuracy(scenes[:1], params)
    assert 0.0 <= voxel_acc <= 1.0 and 0.0 <= split_acc <= 1.0
