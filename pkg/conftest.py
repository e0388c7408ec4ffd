# Shared pytest fixtures: seeded random streams, tiny run configs, synthetic scenes

import numpy as np
import pytest

import numeric_core as nc
from selftest import synthetic_scene, tiny_config as make_tiny_config
from voxel_io import SemanticVoxelGrid


@pytest.fixture
def rng():
    return nc.Rng(1234)


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture
def scene(rng):
    return synthetic_scene(rng.split("scene"))


@pytest.fixture
def scenes(rng):
    return [synthetic_scene(rng.split("scene", k)) for k in range(4)]


@pytest.fixture
def floor_scene():
    labels = np.zeros((8, 8, 4), dtype=np.uint16)
    labels[:, :, 0] = 1
    labels[2:4, 2:6, 1:3] = 2
    return SemanticVoxelGrid(labels, 0.5, 3)
