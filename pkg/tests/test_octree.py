# Morton keys, octree construction / truncation / growth and OCT1 files

import numpy as np
import pytest

import numeric_core as nc
from dual_graph import dualize
from errors import FormatError, StructureError
from octree import (
    MortonKey, Octree, ancestors_at, build_octree, decode, encode, grow_by_splits, load_octree,
    morton_decode, morton_encode, octree_to_dense, split_targets, structure_octree,
)
from selftest import random_occupancy, reference_leaves
from voxel_io import OccupancyGrid


def test_morton_interleave_reference():
    assert morton_encode(1, 2, 3, 2) == MortonKey(2, 53)
    assert morton_decode(MortonKey(2, 53)) == (1, 2, 3)


def test_morton_rejects_out_of_range_coordinates():
    with pytest.raises(StructureError, match="y=4"):
        morton_encode(0, 4, 0, 2)
    with pytest.raises(StructureError):
        morton_decode(MortonKey(1, 8))


def test_morton_bijective_at_depth_six():
    side = 64
    x, y, z = np.meshgrid(np.arange(side), np.arange(side), np.arange(side), indexing="ij")
    codes = encode(x.ravel(), y.ravel(), z.ravel())
    assert len(np.unique(codes)) == side ** 3
    assert codes.max() == side ** 3 - 1
    bx, by, bz = decode(codes)
    np.testing.assert_array_equal(bx, x.ravel())
    np.testing.assert_array_equal(by, y.ravel())
    np.testing.assert_array_equal(bz, z.ravel())


def test_parent_key_drops_three_bits():
    assert MortonKey(2, 53).parent() == MortonKey(1, 6)
    with pytest.raises(StructureError):
        MortonKey(0, 0).parent()


def test_single_voxel_gives_fifteen_leaves():
    bits = np.zeros((4, 4, 4), dtype=bool)
    bits[0, 0, 0] = True
    oct_ = build_octree(OccupancyGrid(bits)).validate()
    depths, codes, occupied = oct_.leaves()
    assert len(depths) == 15
    assert (depths == 1).sum() == 7 and (depths == 2).sum() == 8
    assert occupied.sum() == 1
    assert codes[occupied][0] == 0 and depths[occupied][0] == 2


def test_empty_grid_is_a_single_empty_root():
    oct_ = build_octree(OccupancyGrid(np.zeros((4, 4, 4), dtype=bool)))
    depths, _, occupied = oct_.leaves()
    assert list(depths) == [0]
    assert not occupied.any()
    assert octree_to_dense(oct_).count() == 0


def test_dense_round_trip_and_reference_leaves():
    rng = nc.Rng(11)
    for k in range(200):
        occ = random_occupancy(rng.split(k), max_extent=32 if k % 20 == 0 else 8)
        oct_ = build_octree(occ).validate()
        assert octree_to_dense(oct_) == occ
        if max(occ.dims) <= 8:
            d, c, o = oct_.leaves()
            got = {(int(a), int(b)): bool(v) for a, b, v in zip(d, c, o)}
            assert got == reference_leaves(occ)


def test_non_cubic_grid_keeps_outside_cells_empty():
    occ = OccupancyGrid(np.ones((4, 2, 1), dtype=bool))
    oct_ = build_octree(occ)
    assert oct_.max_depth == 2
    assert oct_.dims == (4, 2, 1)
    dense = octree_to_dense(oct_, (4, 4, 4))
    assert dense.count() == 8
    assert dense.bits[:4, :2, :1].all()


def test_validate_catches_orphan_nodes():
    oct_ = build_octree(OccupancyGrid(np.ones((2, 2, 2), dtype=bool)))
    keys = [oct_.keys[0], oct_.keys[1][:7]]
    broken = Octree(keys, [oct_.split[0], oct_.split[1][:7]], [oct_.occupied[0], oct_.occupied[1][:7]])
    with pytest.raises(StructureError, match="children"):
        broken.validate()


def test_truncate_marks_subdivided_nodes_occupied():
    bits = np.zeros((4, 4, 4), dtype=bool)
    bits[3, 3, 3] = True
    oct_ = build_octree(OccupancyGrid(bits))
    coarse = oct_.truncate(1).validate()
    assert coarse.max_depth == 1
    assert coarse.occupied[1].sum() == 1
    assert coarse.keys[1][coarse.occupied[1]][0] == 7
    assert coarse.dims == (2, 2, 2)
    assert oct_.truncate(2) == oct_
    with pytest.raises(StructureError):
        oct_.truncate(3)


def test_grow_adds_children_of_flagged_nodes():
    oct_ = build_octree(OccupancyGrid(np.ones((2, 2, 2), dtype=bool)))
    flags = np.zeros(8, dtype=bool)
    flags[[0, 5]] = True
    grown = oct_.grow(flags).validate()
    assert grown.max_depth == 2
    assert len(grown.keys[2]) == 16
    np.testing.assert_array_equal(grown.keys[2][8:], np.arange(40, 48, dtype=np.uint64))
    with pytest.raises(StructureError, match="3 split decisions"):
        oct_.grow(np.ones(3, dtype=bool))


def test_grow_by_splits_and_split_targets():
    coarse = np.zeros((2, 2, 2), dtype=bool)
    coarse[0, 0, 0] = coarse[1, 1, 0] = True
    oct_ = grow_by_splits(OccupancyGrid(coarse)).validate()
    assert oct_.max_depth == 2
    assert len(oct_.keys[2]) == 16
    assert oct_.occupied[2].all()
    levels, leaf_occ = split_targets(oct_, 1)
    assert len(levels) == 1
    assert levels[0].sum() == 2
    assert leaf_occ.all()


def test_grow_by_splits_on_empty_coarse_grid_is_root_only():
    coarse = OccupancyGrid(np.zeros((2, 2, 2), dtype=bool))
    oct_ = grow_by_splits(coarse, [np.zeros(0, dtype=bool)]).validate()
    assert oct_.max_depth == 3
    assert [len(k) for k in oct_.keys] == [1, 0, 0, 0]
    depths, _, occupied = oct_.leaves()
    assert list(depths) == [0]
    assert not occupied.any()
    assert octree_to_dense(oct_).count() == 0


def test_structure_octree_depth_limit():
    coarse = OccupancyGrid(np.ones((2, 2, 2), dtype=bool))
    assert structure_octree(coarse, 2).max_depth == 2
    with pytest.raises(StructureError, match="exceeds patch depth"):
        structure_octree(coarse, 1)


def test_ancestors_at():
    codes = np.array([53, 8, 63], dtype=np.uint64)
    np.testing.assert_array_equal(ancestors_at(codes, 2, 1), [6, 1, 7])
    np.testing.assert_array_equal(ancestors_at(codes, 2, 0), [0, 0, 0])
    with pytest.raises(StructureError):
        ancestors_at(codes, 1, 2)


def test_oct1_round_trip(tmp_path, rng):
    occ = random_occupancy(rng, max_extent=16)
    oct_ = build_octree(occ)
    path = tmp_path / "scene.oct"
    oct_.save(str(path))
    assert path.stat().st_size == oct_.nbytes
    back = load_octree(str(path), dims=occ.dims)
    assert back == oct_
    assert octree_to_dense(back) == occ


def test_oct1_bad_magic_and_truncation(tmp_path, rng):
    oct_ = build_octree(random_occupancy(rng, max_extent=8, density=0.3))
    blob = oct_.to_bytes()
    bad = tmp_path / "bad.oct"
    bad.write_bytes(b"OCT2" + blob[4:])
    with pytest.raises(FormatError) as info:
        load_octree(str(bad))
    assert info.value.offset == 0
    bad.write_bytes(blob[:-1])
    with pytest.raises(FormatError):
        load_octree(str(bad))


def test_sparse_scene_storage_is_small():
    # two clustered 16 x 16 x 8 objects in an outdoor-sized volume
    bits = np.zeros((256, 256, 32), dtype=bool)
    bits[0:16, 0:16, 0:8] = True
    bits[128:144, 64:80, 8:16] = True
    assert bits.mean() <= 0.05
    dense_label_bytes = 2 * bits.size
    oct_ = build_octree(OccupancyGrid(bits))
    assert oct_.nbytes < 0.1 * dense_label_bytes
    assert dualize(oct_).nbytes < 0.1 * dense_label_bytes
