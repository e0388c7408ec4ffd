# Dual graph construction against the brute-force face-contact oracle

import time

import numpy as np
import pytest

import numeric_core as nc
from dual_graph import (
    NUM_EDGE_TYPES, brute_force_adjacency, connected_components, dualize, edge_type, flip_type,
    pool_graph, type_axis, unpool_graph,
)
from errors import StructureError
from graph_layers import pool_features, unpool_features
from octree import Octree, build_octree
from selftest import random_occupancy
from voxel_io import OccupancyGrid


def _full(side):
    return build_octree(OccupancyGrid(np.ones((side, side, side), dtype=bool)))


def _split_first_octant():
    # root split, child 0 split again
    keys = [np.array([0], np.uint64), np.arange(8, dtype=np.uint64), np.arange(8, dtype=np.uint64)]
    split = [np.array([True]), np.array([True] + [False] * 7), np.zeros(8, dtype=bool)]
    occupied = [np.zeros(1, bool), np.ones(8, bool), np.ones(8, bool)]
    return Octree(keys, split, occupied).validate()


def _assert_matches_oracle(graph):
    edges, types = brute_force_adjacency(graph.lo, graph.hi)
    np.testing.assert_array_equal(graph.edges, edges)
    np.testing.assert_array_equal(graph.edge_types, types)


def test_root_only_graph():
    graph = dualize(build_octree(OccupancyGrid(np.zeros((1, 1, 1), dtype=bool))))
    assert graph.num_nodes == 1 and graph.num_edges == 0
    _assert_matches_oracle(graph)


def test_full_depth_one_has_twelve_edges():
    graph = dualize(_full(2))
    assert graph.num_edges == 12
    axes = type_axis(graph.edge_types)
    assert [int((axes == a).sum()) for a in range(3)] == [4, 4, 4]
    _assert_matches_oracle(graph)


def test_full_four_cubed_closed_form():
    graph = dualize(_full(4))
    assert graph.num_edges == 3 * 16 * 3 == 144
    _assert_matches_oracle(graph)


def test_cross_depth_contacts():
    graph = dualize(_split_first_octant())
    _assert_matches_oracle(graph)
    depths = graph.depths
    fine = set(np.flatnonzero(depths == 2))
    for octant in (1, 2, 4):
        node = int(graph.index_of(np.array([1]), np.array([octant], np.uint64))[0])
        across = [b if a == node else a for a, b in graph.edges if node in (a, b)]
        assert sum(1 for k in across if k in fine) == 4
    # 9 coarse-coarse, 12 fine-fine, 3 faces x 4 cross-depth
    assert graph.num_edges == 33


def test_random_grids_match_oracle():
    rng = nc.Rng(21)
    for k in range(200):
        graph = dualize(build_octree(random_occupancy(rng.split(k), max_extent=16 if k % 10 == 0 else 6)))
        _assert_matches_oracle(graph)


def test_edges_are_canonical():
    graph = dualize(build_octree(random_occupancy(nc.Rng(3), max_extent=8, density=0.3)))
    assert np.all(graph.edges[:, 0] < graph.edges[:, 1])
    order = np.lexsort((graph.edges[:, 1], graph.edges[:, 0]))
    np.testing.assert_array_equal(order, np.arange(graph.num_edges))


def test_edge_type_flip_keeps_axis():
    for axis in range(3):
        for sign in (1, -1):
            t = edge_type(axis, sign)
            assert type_axis(flip_type(t)) == axis
            assert flip_type(flip_type(t)) == t
            assert flip_type(t) != t


def test_neighbour_count_bounds():
    graph = dualize(build_octree(random_occupancy(nc.Rng(5), max_extent=8, density=0.2)))
    same_depth = graph.depths[graph.msg_target] == graph.depths[graph.msg_source]
    counts = np.zeros((graph.num_nodes, NUM_EDGE_TYPES), dtype=np.int64)
    np.add.at(counts, (graph.msg_target[same_depth], graph.msg_type[same_depth]), 1)
    assert counts.max() <= 1
    one_level = np.abs(graph.depths[graph.msg_target] - graph.depths[graph.msg_source]) == 1
    counts[:] = 0
    finer = one_level & (graph.depths[graph.msg_source] > graph.depths[graph.msg_target])
    np.add.at(counts, (graph.msg_target[finer], graph.msg_type[finer]), 1)
    assert counts.max() <= 4


def test_message_weights_average_per_type():
    graph = dualize(_split_first_octant())
    totals = np.zeros((graph.num_nodes, NUM_EDGE_TYPES))
    np.add.at(totals, (graph.msg_target, graph.msg_type), graph.msg_weight)
    present = graph.type_counts > 0
    np.testing.assert_allclose(totals[present], 1.0)


def test_face_connected_region_is_connected():
    bits = np.zeros((8, 8, 8), dtype=bool)
    bits[1:7, 3, 3] = True
    bits[6, 3:7, 3] = True
    graph = dualize(build_octree(OccupancyGrid(bits)))
    labels = connected_components(graph, graph.occupied)
    assert len(np.unique(labels[graph.occupied])) == 1
    assert np.all(labels[~graph.occupied] == -1)
    assert len(np.unique(connected_components(graph))) == 1


def test_oracle_rejects_overlapping_cubes():
    lo = np.array([[0, 0, 0], [1, 1, 1]])
    hi = np.array([[2, 2, 2], [2, 2, 2]])
    with pytest.raises(StructureError, match="overlap"):
        brute_force_adjacency(lo, hi)


def test_index_of_and_footprint():
    graph = dualize(_split_first_octant())
    idx = graph.index_of(np.array([1, 2, 1, 2]), np.array([3, 5, 0, 9], np.uint64))
    assert idx[0] >= 0 and idx[1] >= 0
    assert idx[2] == -1        # split node, not a leaf
    assert idx[3] == -1
    hits = graph.footprint_hits(np.array([0, 63], np.uint64), 2)
    assert set(np.flatnonzero(hits)) == {int(graph.index_of(np.array([2]), np.array([0], np.uint64))[0]),
                                         int(graph.index_of(np.array([1]), np.array([7], np.uint64))[0])}


def test_pooled_graph_equals_truncated_dualization():
    rng = nc.Rng(8)
    for k in range(20):
        graph = dualize(build_octree(random_occupancy(rng.split(k), max_extent=8)))
        if graph.max_depth == 0:
            continue
        coarse, pool_map = pool_graph(graph)
        assert coarse.same_structure(dualize(graph.octree.truncate(graph.max_depth - 1)))
        assert pool_map.n_fine == graph.num_nodes
        assert pool_map.counts.sum() == graph.num_nodes


def test_pool_of_identical_siblings_and_unpool_round_trip():
    graph = dualize(_full(2))
    coarse, pool_map = pool_graph(graph)
    assert coarse.num_nodes == 1
    h = np.tile([[0.5, -2.0]], (8, 1))
    np.testing.assert_allclose(pool_features(h, pool_map).value, [[0.5, -2.0]])

    fine, up_map = unpool_graph(coarse, np.array([True]))
    assert fine.same_structure(graph)
    parent = np.array([[1.5, 3.0]])
    children = unpool_features(parent, up_map)
    np.testing.assert_allclose(pool_features(children, up_map).value, parent)


def test_pool_rejects_root_graph():
    with pytest.raises(StructureError):
        pool_graph(dualize(build_octree(OccupancyGrid(np.zeros((1, 1, 1), dtype=bool)))))


def test_dump_lists_nodes_then_edges():
    text = dualize(_full(2)).dump()
    lines = text.splitlines()
    assert lines[0] == "node 0 1 0"
    assert sum(line.startswith("edge ") for line in lines) == 12
    assert "edge 0 1 x +" in lines


@pytest.mark.slow
def test_full_sixty_four_cubed_dualization_time():
    oct_ = _full(64)
    start = time.perf_counter()
    graph = dualize(oct_)
    elapsed = time.perf_counter() - start
    assert graph.num_nodes == 64 ** 3
    assert graph.num_edges == 3 * 64 * 64 * 63
    assert elapsed < 1.0
