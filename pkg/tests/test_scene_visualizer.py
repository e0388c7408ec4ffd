import numpy as np
import pandas as pd

from scene_visualizer import SceneVisualizer, bev_labels, class_colormap
from voxel_io import SemanticVoxelGrid


def test_bev_takes_the_top_label(floor_scene):
    bev = bev_labels(floor_scene)
    assert bev.shape == (8, 8)
    assert (bev[2:4, 2:6] == 2).all()
    assert bev[0, 0] == 1


def test_bev_of_empty_columns_is_zero():
    grid = SemanticVoxelGrid.empty((4, 4, 2), 0.5, 3)
    assert not bev_labels(grid).any()


def test_colormap_starts_white():
    cmap = class_colormap(5)
    assert cmap.N == 5
    np.testing.assert_allclose(cmap(0)[:3], (1.0, 1.0, 1.0))


def test_figures_are_written(tmp_path, tiny_config, floor_scene):
    viz = SceneVisualizer(tiny_config, str(tmp_path / "viz"))
    assert (tmp_path / "viz" / "scene_bev.png").samefile(viz.render_bev(floor_scene))
    assert (tmp_path / "viz" / "pair.png").samefile(
        viz.render_comparison([floor_scene, floor_scene], ["a", "b"], name="pair.png"))
    curve = pd.DataFrame({"step": [0, 1, 2], "loss": [3.0, 2.0, 1.5]})
    assert not (tmp_path / "viz" / "loss_curves.png").exists()
    viz.plot_loss_curves({"vae": curve})
    assert (tmp_path / "viz" / "loss_curves.png").exists()


def test_no_curves_means_no_figure(tiny_config, tmp_path):
    assert SceneVisualizer(tiny_config, str(tmp_path)).plot_loss_curves({"vae": None}) is None
