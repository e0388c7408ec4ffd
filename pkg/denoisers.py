# Denoisers - noise predictors for the two diffusion stages
# StructureDenoiser: small 3D CNN over the coarse split grid
# LatentDenoiser: dual-graph U-Net over the code graph node latents
#
# Both output eps_hat. With prediction_type "sample" the network output is
# read as x0_hat and converted to eps_hat with the schedule.

import logging
import weakref

import numpy as np

import numeric_core as nc
from dual_graph import pool_graph
from errors import ShapeError
from graph_layers import (conv3d, conv3d_init, conv3d_table, dense_init, graph_conv, graph_conv_init, linear,
                          pool_features, position_features, position_width, timestep_embedding,
                          unpool_features)

logger = logging.getLogger(__name__)


def _to_epsilon(out, x_t, alpha_bar_t, prediction):
    if prediction == "epsilon":
        return out
    # out is x0_hat: eps_hat = (x_t - sqrt(ab) x0_hat) / sqrt(1 - ab)
    scaled = nc.sub(x_t, nc.mul(out, float(np.sqrt(alpha_bar_t))))
    return nc.mul(scaled, float(1.0 / np.sqrt(1.0 - alpha_bar_t)))


class StructureDenoiser:
    """3D CNN over the coarse grid; channels = x_t, a learned per-cell embedding, time features"""

    def __init__(self, config):
        self.config = config
        self.dims = tuple(config.coarse_dims)
        self.cells = int(np.prod(self.dims))
        self.table = conv3d_table(self.dims)
        w = config.model.widths
        self.hidden = w["structure_hidden"]
        self.time_width = w["time"]
        self.pos_width = w["position"]
        self.prediction = config.model.structure_prediction

    def init_params(self, rng):
        rng = rng.split("structure")
        c_in = 1 + self.pos_width + self.time_width
        params = {"structure.pos": 0.1 * nc.rng_normal(rng.split("pos"), (self.cells, self.pos_width))}
        params.update(conv3d_init(rng, "structure.conv1", c_in, self.hidden))
        params.update(conv3d_init(rng, "structure.conv2", self.hidden, self.hidden))
        params.update(conv3d_init(rng, "structure.out", self.hidden, 1, zero=True))
        return params

    def predict_eps_node(self, p, x_t, t, alpha_bar_t, context=None):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != self.dims:
            raise ShapeError(f"StructureDenoiser: input {x_t.shape}, expected coarse grid {self.dims}")
        temb = np.tile(timestep_embedding(t, self.time_width), (self.cells, 1))
        h = nc.concat([x_t.reshape(self.cells, 1), p["structure.pos"], temb])
        h = conv3d(h, self.table, p, "structure.conv1")
        h = conv3d(h, self.table, p, "structure.conv2")
        out = nc.reshape(conv3d(h, self.table, p, "structure.out", "linear"), self.dims)
        return _to_epsilon(out, x_t, alpha_bar_t, self.prediction)

    def predict(self, params, x_t, t, alpha_bar_t, context=None):
        return self.predict_eps_node(nc.as_leaves(params), x_t, t, alpha_bar_t).value


class LatentDenoiser:
    """Dual-graph U-Net: conv, `unet_levels` pool+conv stages, then unpool+skip+conv back up"""

    def __init__(self, config):
        self.config = config
        m = config.model
        self.width = m.code_width
        self.hidden = m.widths["unet_hidden"]
        self.time_width = m.widths["time"]
        self.levels = m.unet_levels
        self.frequencies = m.pos_frequencies
        self.pos_width = position_width(self.frequencies)
        self.ref_depth = config.patch_depth
        self.prediction = m.latent_prediction
        self._chains = weakref.WeakKeyDictionary()

    def init_params(self, rng):
        rng = rng.split("latent")
        h, f = self.hidden, self.pos_width
        params = graph_conv_init(rng, "latent.in", self.width + f + self.time_width, h)
        for level in range(self.levels):
            params.update(graph_conv_init(rng, f"latent.down{level}", h + f, h))
            params.update(graph_conv_init(rng, f"latent.up{level}", 2 * h + f, h))
        params.update(dense_init(rng, "latent.out", h, self.width, zero=True))
        return params

    def chain(self, graph):
        """Pooled graphs for the U-Net, cached per graph"""
        cached = self._chains.get(graph)
        if cached is None:
            cached, g = [], graph
            for _ in range(self.levels):
                coarse, pm = pool_graph(g)
                cached.append((pm, coarse, position_features(coarse, self.frequencies, self.ref_depth)))
                g = coarse
            self._chains[graph] = cached
        return cached

    def predict_eps_node(self, p, x_t, t, alpha_bar_t, graph):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != (graph.num_nodes, self.width):
            raise ShapeError(f"LatentDenoiser: input {x_t.shape}, expected ({graph.num_nodes}, {self.width})")
        pos = position_features(graph, self.frequencies, self.ref_depth)
        temb = np.tile(timestep_embedding(t, self.time_width), (graph.num_nodes, 1))
        h = graph_conv(graph, nc.concat([x_t, pos, temb]), p, "latent.in")
        skips = [(h, graph, pos)]
        chain = self.chain(graph)
        for level, (pm, coarse, cpos) in enumerate(chain):
            h = pool_features(h, pm)
            h = graph_conv(coarse, nc.concat([h, cpos]), p, f"latent.down{level}")
            skips.append((h, coarse, cpos))
        for level in reversed(range(len(chain))):
            pm = chain[level][0]
            skip, g, gpos = skips[level]
            h = unpool_features(h, pm)
            h = graph_conv(g, nc.concat([h, skip, gpos]), p, f"latent.up{level}")
        out = linear(h, p, "latent.out")
        return _to_epsilon(out, x_t, alpha_bar_t, self.prediction)

    def predict(self, params, x_t, t, alpha_bar_t, graph):
        return self.predict_eps_node(nc.as_leaves(params), x_t, t, alpha_bar_t, graph).value
