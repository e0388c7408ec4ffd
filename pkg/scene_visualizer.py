# Scene Visualizer - bird's-eye-view renders and training curves
# Only used when `visualize` is on in the run config or via --out PNG paths.

import logging
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import seaborn as sns
from matplotlib.colors import ListedColormap

logger = logging.getLogger(__name__)


def bev_labels(grid):
    """Top-most non-empty label of every (x, y) column, 0 where the column is empty"""
    labels = grid.labels
    occupied = labels != 0
    # index of the highest occupied z per column
    top = labels.shape[2] - 1 - np.argmax(occupied[:, :, ::-1], axis=2)
    picked = np.take_along_axis(labels, top[:, :, None], axis=2)[:, :, 0]
    return np.where(occupied.any(axis=2), picked, 0).astype(np.int64)


def class_colormap(num_classes):
    # class 0 (empty) is white
    colors = [(1.0, 1.0, 1.0)] + list(sns.color_palette("husl", max(1, num_classes - 1)))
    return ListedColormap(colors[:num_classes])


class SceneVisualizer:
    """Writes PNG figures next to the run outputs"""

    def __init__(self, config, output_dir=None):
        self.config = config
        self.output_dir = output_dir
        sns.set_style("whitegrid")

    def _path(self, name):
        if self.output_dir is None or os.path.isabs(name) or os.path.dirname(name):
            return name
        os.makedirs(self.output_dir, exist_ok=True)
        return os.path.join(self.output_dir, name)

    def render_bev(self, grid, name="scene_bev.png", title="Scene (bird's-eye view)"):
        path = self._path(name)
        bev = bev_labels(grid)
        plt.figure(figsize=(8, 8))
        plt.imshow(bev.T, origin="lower", cmap=class_colormap(grid.num_classes),
                   vmin=0, vmax=grid.num_classes - 1, interpolation="nearest")
        plt.title(title, fontsize=16, fontweight="bold")
        plt.xlabel("x (voxels)", fontsize=12)
        plt.ylabel("y (voxels)", fontsize=12)
        plt.grid(False)
        plt.tight_layout()
        plt.savefig(path, dpi=300)
        plt.close()
        return path

    def render_comparison(self, grids, titles, name="comparison_bev.png"):
        """Side-by-side BEV renders, e.g. partial input / completion / ground truth"""
        path = self._path(name)
        cmap = class_colormap(max(g.num_classes for g in grids))
        fig, axes = plt.subplots(1, len(grids), figsize=(6 * len(grids), 6))
        axes = np.atleast_1d(axes)
        for ax, grid, title in zip(axes, grids, titles):
            ax.imshow(bev_labels(grid).T, origin="lower", cmap=cmap, vmin=0, vmax=cmap.N - 1,
                      interpolation="nearest")
            ax.set_title(title, fontsize=14, fontweight="bold")
            ax.grid(False)
        plt.tight_layout()
        plt.savefig(path, dpi=300)
        plt.close(fig)
        return path

    def plot_loss_curves(self, curves, name="loss_curves.png"):
        """One panel per training run; every non-step column is drawn as a line"""
        path = self._path(name)
        curves = {k: v for k, v in curves.items() if v is not None and len(v)}
        if not curves:
            logger.warning("no loss curves to plot")
            return None
        fig, axes = plt.subplots(1, len(curves), figsize=(6 * len(curves), 4), squeeze=False)
        for ax, (label, frame) in zip(axes[0], curves.items()):
            for column in frame.columns:
                if column == "step":
                    continue
                sns.lineplot(x=frame["step"], y=frame[column], ax=ax, label=column)
            ax.set_title(f"{label} training", fontsize=14, fontweight="bold")
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.set_yscale("log" if (frame.drop(columns="step") > 0).all().all() else "linear")
        plt.tight_layout()
        plt.savefig(path, dpi=300)
        plt.close(fig)
        return path
