"""
Graph VAE
Compresses the patch-latent graph to a shallower octree depth and decodes it
back, predicting the split signals level by level with one shared head.

Training objective: L_sem + L_octree + beta * L_KL, with the decoder
forced onto the ground-truth octree so predictions line up with targets.
"""
import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

import numeric_core as nc
from dual_graph import DualOctreeGraph, dualize, pool_graph, unpool_graph
from errors import ShapeError, StructureError
from octree import ancestors_at
from graph_layers import (dense_init, graph_conv, graph_conv_init, linear, pool_features, pool_init,
                          position_features, position_width, unpool_features)
from patch_codec import LatentField, PatchCodec

logger = logging.getLogger(__name__)


@dataclass
class VaeCode:
    graph: DualOctreeGraph
    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class VaeLossBreakdown:
    l_sem: float
    l_octree: float
    l_kl: float
    beta: float
    total: float


@dataclass
class DecodeResult:
    field: LatentField                  # latents over the decoded patch-level graph
    split_logits: List[np.ndarray]      # one array per grown level
    split_flags: List[np.ndarray]       # decisions actually used for unpooling
    occupancy_logits: np.ndarray        # leaves at patch depth
    graphs: List[DualOctreeGraph]


@dataclass
class SceneTargets:
    """Everything about one training scene that stays fixed between steps"""

    graph: DualOctreeGraph
    encoder_chain: list                 # (fine graph, pool map, coarse graph) per pool level
    decoder_chain: list                 # (fine graph, pool map) per unpool level
    code_graph: DualOctreeGraph
    occ_index: np.ndarray
    labels: np.ndarray
    split_targets: List[np.ndarray]
    occupancy_target: np.ndarray


def vae_loss_nodes(voxel_logits, voxel_labels, split_logits, split_targets, mu, logvar, beta):
    l_sem = nc.softmax_cross_entropy(voxel_logits, voxel_labels)
    logits = nc.concat([nc.reshape(s, (-1,)) for s in split_logits], axis=0)
    targets = np.concatenate([np.asarray(t, dtype=np.float64).ravel() for t in split_targets])
    l_octree = nc.sigmoid_bce(logits, targets)
    l_kl = nc.gaussian_kl(mu, logvar)
    total = nc.add(nc.add(l_sem, l_octree), nc.mul(l_kl, float(beta)))
    return {"loss": total, "l_sem": l_sem, "l_octree": l_octree, "l_kl": l_kl}


def vae_loss(voxel_logits, voxel_labels, split_logits, split_targets, mu, logvar, beta):
    """L_sem + L_octree + beta * L_KL on plain arrays"""
    out = vae_loss_nodes(nc.leaf(voxel_logits), voxel_labels, [nc.leaf(np.ravel(s)) for s in split_logits],
                         split_targets, nc.leaf(mu), nc.leaf(logvar), beta)
    return VaeLossBreakdown(float(out["l_sem"].value), float(out["l_octree"].value),
                            float(out["l_kl"].value), float(beta), float(out["loss"].value))


class GraphVAE:
    """Dual-graph encoder / decoder between patch latents and codes"""

    def __init__(self, config):
        self.config = config
        self.codec = PatchCodec(config)
        m = config.model
        self.hidden = m.widths["vae_hidden"]
        self.code_width = m.code_width
        self.pool_levels = m.pool_levels
        self.pool_mode = m.pool_mode
        self.frequencies = m.pos_frequencies
        self.patch_depth = config.patch_depth
        self.code_depth = config.code_depth
        self.pos_width = position_width(self.frequencies)

    # -- parameters

    def init_params(self, rng):
        rng = rng.split("vae")
        h, f, d = self.hidden, self.pos_width, self.config.model.d_patch
        params = graph_conv_init(rng, "vae.enc_in", d + f, h)
        for level in range(self.pool_levels):
            params.update(graph_conv_init(rng, f"vae.enc{level}", h + f, h))
            if self.pool_mode == "learned":
                params.update(pool_init(f"vae.pool{level}", h))
        params.update(dense_init(rng, "vae.mu", h, self.code_width))
        params.update(dense_init(rng, "vae.logvar", h, self.code_width, zero=True))
        # start with a narrow posterior so reconstruction can get going
        params["vae.logvar.b"] = np.full((1, self.code_width), -4.0)
        params.update(graph_conv_init(rng, "vae.dec_in", self.code_width + f, h))
        for level in range(self.patch_depth - self.code_depth):
            params.update(graph_conv_init(rng, f"vae.dec{level}", h + f, h))
        params.update(dense_init(rng, "vae.split1", h + f, h))
        params.update(dense_init(rng, "vae.split2", h, 1))
        params.update(dense_init(rng, "vae.out", h, d))
        return params

    def init_all(self, rng):
        """Patch codec and VAE parameters together"""
        params = self.codec.init_params(rng)
        params.update(self.init_params(rng))
        return params

    # -- graphs

    def encoder_chain(self, graph):
        chain, g = [], graph
        for _ in range(self.pool_levels):
            coarse, pm = pool_graph(g)
            chain.append((g, pm, coarse))
            g = coarse
        return chain, g

    def code_graph(self, octree):
        return dualize(octree.truncate(self.code_depth))

    def _pos(self, graph):
        return position_features(graph, self.frequencies, self.patch_depth)

    # -- encoder

    def encode_nodes(self, p, x, graph, chain):
        """Node features at patch depth -> (mu, logvar) on the code graph"""
        h = graph_conv(graph, nc.concat([x, self._pos(graph)]), p, "vae.enc_in")
        for level, (_, pm, coarse) in enumerate(chain):
            h = pool_features(h, pm, self.pool_mode, p, f"vae.pool{level}")
            h = graph_conv(coarse, nc.concat([h, self._pos(coarse)]), p, f"vae.enc{level}")
        return linear(h, p, "vae.mu"), linear(h, p, "vae.logvar")

    def vae_encode(self, field: LatentField, params, rng=None):
        """mu / logvar per code-graph node; z uses eps drawn from rng (zeros without one)"""
        chain, code_graph = self.encoder_chain(field.graph)
        mu, logvar = self.encode_nodes(nc.as_leaves(params), nc.leaf(field.values), field.graph, chain)
        mu, logvar = mu.value, logvar.value
        eps = np.zeros_like(mu) if rng is None else nc.rng_normal(rng, mu.shape)
        return VaeCode(code_graph, mu, logvar, eps, mu + np.exp(0.5 * logvar) * eps)

    # -- decoder

    def _split_head(self, p, h, pos, idx):
        feats = nc.concat([nc.gather(h, idx), pos[idx]])
        hidden = linear(feats, p, "vae.split1", "tanh")
        return nc.reshape(linear(hidden, p, "vae.split2"), (len(idx),))

    def decode_nodes(self, p, z, graph, splits=None, force_leaves=None, chain=None, threshold=0.0):
        """
        Unpool from `graph` to patch depth. Per level, splits[level] fixes the
        decisions and None means threshold the logits. Every ancestor of a
        patch-depth code in `force_leaves` is split and the leaf itself kept
        occupied. `chain` supplies the (graph, pool map) pairs when the
        decisions are known in advance.
        """
        levels = self.patch_depth - graph.max_depth
        if levels < 0:
            raise StructureError(f"decode: graph depth {graph.max_depth} exceeds patch depth {self.patch_depth}")
        splits = list(splits) if splits is not None else []
        splits += [None] * (levels - len(splits))
        forced = np.zeros(0, np.uint64) if force_leaves is None else np.asarray(force_leaves, dtype=np.uint64)
        first = graph.max_depth - self.code_depth
        pos = self._pos(graph)
        h = graph_conv(graph, nc.concat([z, pos]), p, "vae.dec_in")
        split_logits, flags_used, graphs = [], [], [graph]
        for level in range(levels):
            idx = graph.nodes_at(graph.max_depth)
            logits = self._split_head(p, h, pos, idx)
            flags = splits[level] if splits[level] is not None else logits.value > threshold
            flags = np.asarray(flags, dtype=bool)
            if len(forced):
                need = ancestors_at(forced, self.patch_depth, graph.max_depth)
                flags = flags | np.isin(graph.codes[idx], need)
            if len(flags) != len(idx):
                raise ShapeError(f"decode level {level}: {len(flags)} split flags for {len(idx)} nodes")
            fine, pm = chain[level] if chain is not None else unpool_graph(graph, flags)
            h = unpool_features(h, pm)
            graph = fine
            pos = self._pos(graph)
            h = graph_conv(graph, nc.concat([h, pos]), p, f"vae.dec{first + level}")
            split_logits.append(logits)
            flags_used.append(flags)
            graphs.append(graph)
        idx = graph.nodes_at(self.patch_depth)
        return {"latents": linear(h, p, "vae.out"), "split_logits": split_logits,
                "occupancy_logits": self._split_head(p, h, pos, idx), "flags": flags_used,
                "graphs": graphs, "leaf_index": idx,
                "occupancy_force": np.isin(graph.codes[idx], forced)}

    def vae_decode(self, code, graph, params, splits=None, occupancy=None, force_leaves=None, threshold=0.0):
        """Latent field at patch depth plus per-level split logits"""
        z = code.z if isinstance(code, VaeCode) else np.asarray(code, dtype=np.float64)
        if z.shape != (graph.num_nodes, self.code_width):
            raise ShapeError(f"vae_decode: code {z.shape} for {graph.num_nodes} nodes of width {self.code_width}")
        out = self.decode_nodes(nc.as_leaves(params), nc.leaf(z), graph, splits, force_leaves, threshold=threshold)
        final = out["graphs"][-1]
        occ_logits = out["occupancy_logits"].value
        occ = np.asarray(occupancy, dtype=bool) if occupancy is not None else occ_logits > threshold
        occ = occ | out["occupancy_force"]
        mask = np.zeros(final.num_nodes, dtype=bool)
        mask[out["leaf_index"]] = occ
        field = LatentField(final, out["latents"].value, mask)
        return DecodeResult(field, [s.value for s in out["split_logits"]], out["flags"], occ_logits, out["graphs"])

    # -- training

    def scene_targets(self, grid):
        graph = self.codec.patch_graph(grid)
        chain, code_graph = self.encoder_chain(graph)
        octree = graph.octree
        mask = graph.occupied & (graph.depths == self.patch_depth)
        occ_index = np.flatnonzero(mask)
        if len(occ_index):
            labels = self.codec.node_labels(grid, graph, mask)
        else:
            labels = np.zeros((0, self.codec.spec.voxels))
        return SceneTargets(
            graph=graph,
            encoder_chain=chain,
            decoder_chain=[(g, pm) for g, pm, _ in reversed(chain)],
            code_graph=code_graph,
            occ_index=occ_index,
            labels=np.asarray(labels, dtype=np.int64),
            split_targets=[octree.split[d].copy() for d in range(self.code_depth, self.patch_depth)],
            occupancy_target=octree.occupied[self.patch_depth].copy(),
        )

    def loss_graph(self, targets: SceneTargets, eps, beta):
        """Differentiable end-to-end loss for one scene (decoder follows the true splits)"""
        graph = targets.graph

        def build(p):
            x = self.codec.encode_nodes(p, targets.labels)
            x = nc.scatter_add(x, targets.occ_index, graph.num_nodes)
            mu, logvar = self.encode_nodes(p, x, graph, targets.encoder_chain)
            z = nc.add(mu, nc.mul(nc.exp(nc.mul(logvar, 0.5)), eps))
            out = self.decode_nodes(p, z, targets.code_graph, splits=targets.split_targets,
                                    chain=targets.decoder_chain)
            logits = self.codec.decode_nodes(p, nc.gather(out["latents"], targets.occ_index))
            return vae_loss_nodes(logits, targets.labels.ravel(),
                                  out["split_logits"] + [out["occupancy_logits"]],
                                  targets.split_targets + [targets.occupancy_target], mu, logvar, beta)

        return nc.Graph(build, "vae_loss")

    def encode_scene(self, grid, params, targets: Optional[SceneTargets] = None):
        """Deterministic code (z = mu) of a scene on its own code graph"""
        targets = targets or self.scene_targets(grid)
        field = self.codec.patch_encode(grid, params, targets.graph)
        mu, logvar = self.encode_nodes(nc.as_leaves(params), nc.leaf(field.values), targets.graph,
                                       targets.encoder_chain)
        return VaeCode(targets.code_graph, mu.value, logvar.value, np.zeros_like(mu.value), mu.value.copy())


class VaeTrainer:
    """Trains patch codec + graph VAE end to end with Adam"""

    def __init__(self, config, vae: Optional[GraphVAE] = None):
        self.config = config
        self.vae = vae or GraphVAE(config)

    def train(self, scenes: Sequence, rng, steps=None, params=None, progress=True):
        m = self.config.model
        steps = m.vae_steps if steps is None else steps
        params = params or self.vae.init_all(rng.split("init"))
        state = nc.adam_init(params)
        targets = [self.vae.scene_targets(s) for s in scenes]
        names = sorted(params)
        rows = []
        start = time.time()
        bar = tqdm(range(steps), desc="train-vae", disable=not progress)
        for step in bar:
            t = targets[step % len(targets)]
            eps = nc.rng_normal(rng.split("eps", step), (t.code_graph.num_nodes, self.vae.code_width))
            g = self.vae.loss_graph(t, eps, m.beta)
            values, grads = nc.value_and_gradient(g, params, "loss", names)
            params, state = nc.adam_step(params, grads, state, lr=m.vae_lr)
            rows.append({"step": step, "loss": float(values["loss"]), "l_sem": float(values["l_sem"]),
                         "l_octree": float(values["l_octree"]), "l_kl": float(values["l_kl"])})
            if step % m.log_every == 0 or step == steps - 1:
                bar.set_postfix(loss=f"{rows[-1]['loss']:.4f}")
                logger.info("vae step %d loss %.5f (sem %.4f, octree %.4f, kl %.4f)", step, rows[-1]["loss"],
                            rows[-1]["l_sem"], rows[-1]["l_octree"], rows[-1]["l_kl"])
        logger.info("vae training finished in %.1fs", time.time() - start)
        return params, pd.DataFrame(rows, columns=["step", "loss", "l_sem", "l_octree", "l_kl"])

    def accuracy(self, scenes, params):
        """(voxel accuracy inside occupied patches, split-signal accuracy), decoded along the true splits with z = mu"""
        correct = total = split_ok = split_total = 0
        p = nc.as_leaves(params)
        for grid in scenes:
            t = self.vae.scene_targets(grid)
            code = self.vae.encode_scene(grid, params, t)
            out = self.vae.decode_nodes(p, nc.leaf(code.mu), t.code_graph, splits=t.split_targets,
                                        chain=t.decoder_chain)
            if len(t.occ_index):
                rows = out["latents"].value[t.occ_index]
                pred = self.vae.codec.decode_nodes(p, nc.leaf(rows)).value.argmax(axis=1)
                correct += int((pred == t.labels.ravel()).sum())
                total += pred.size
            for logit, target in zip(out["split_logits"] + [out["occupancy_logits"]],
                                     t.split_targets + [t.occupancy_target]):
                split_ok += int(((logit.value > 0) == np.asarray(target, bool)).sum())
                split_total += len(target)
        return correct / max(1, total), split_ok / max(1, split_total)
