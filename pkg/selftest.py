"""
Self-test
Oracle suites behind the `selftest` subcommand: dual graph against the
brute-force contact test, octree round trips, finite-difference gradient
checks of every trained network, metric oracles and blend fidelity.

The oracles and the tiny fixtures are shared with the test-suite.
"""
import itertools
import logging
import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

import numeric_core as nc
from config import RunConfig
from denoisers import LatentDenoiser, StructureDenoiser
from diffusion import BlendMask, DenoiserTrainer, TrainingItem, make_schedule, sample
from dual_graph import brute_force_adjacency, dualize, pool_graph
from graph_layers import graph_conv, graph_conv_init
from graph_vae import GraphVAE
from metrics import fid, iou, kid, mmd_rbf
from octree import build_octree, decode, encode, octree_to_dense
from voxel_io import OccupancyGrid, SemanticVoxelGrid

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# fixtures

def tiny_config(**overrides):
    """8x8x4 grid, 3 classes, 2x2 patches: patch depth 2, code depth 1"""
    data = {
        "grid_dims": [8, 8, 4],
        "voxel_size": 0.5,
        "num_classes": 3,
        "patch_dims": [1, 2, 2],
        "model": {
            "d_patch": 4,
            "widths": {"embed": 3, "patch_hidden": 6, "vae_hidden": 6, "code": 3, "unet_hidden": 6,
                       "structure_hidden": 4, "time": 4, "position": 2},
            "pool_levels": 1,
            "unet_levels": 1,
            "pos_frequencies": 1,
            "batch_size": 2,
            "log_every": 50,
        },
        "sampler": {"T": 20},
    }
    data.update(overrides)
    return RunConfig.from_dict(data)


def synthetic_scene(rng, dims=(8, 8, 4), num_classes=3, voxel_size=0.5):
    """Floor of class 1 at z = 0 plus a few boxes of the other classes"""
    gen = rng.generator()
    labels = np.zeros(dims, dtype=np.uint16)
    labels[:, :, 0] = 1
    nx, ny, nz = dims
    for _ in range(int(gen.integers(1, 4))):
        c = int(gen.integers(2, num_classes)) if num_classes > 2 else 1
        x0, y0 = int(gen.integers(0, nx - 1)), int(gen.integers(0, ny - 1))
        w, h = int(gen.integers(1, max(2, nx // 3))), int(gen.integers(1, max(2, ny // 3)))
        top = int(gen.integers(2, nz + 1))
        labels[x0:x0 + w, y0:y0 + h, 1:top] = c
    return SemanticVoxelGrid(labels, voxel_size, num_classes)


def random_occupancy(rng, max_extent=8, density=None):
    gen = rng.generator()
    dims = tuple(int(v) for v in gen.integers(1, max_extent + 1, size=3))
    p = float(gen.uniform(0.02, 0.6)) if density is None else density
    return OccupancyGrid(gen.random(dims) < p)


# ---------------------------------------------------------------------------
# oracles

def reference_leaves(occ: OccupancyGrid):
    """Recursive subdivision: every cube with an occupied cell splits; returns {(depth, code): occupied}"""
    bits = occ.bits
    depth = max(0, int(np.ceil(np.log2(max(bits.shape)))))
    out = {}

    def visit(d, x, y, z):
        size = 1 << (depth - d)
        block = bits[x * size:(x + 1) * size, y * size:(y + 1) * size, z * size:(z + 1) * size]
        occupied = bool(block.any())
        if not occupied or d == depth:
            out[(d, int(encode(np.array([x]), np.array([y]), np.array([z]))[0]))] = occupied
            return
        for dx, dy, dz in itertools.product((0, 1), repeat=3):
            visit(d + 1, 2 * x + dx, 2 * y + dy, 2 * z + dz)

    visit(0, 0, 0, 0)
    return out


def kid_oracle(a, b):
    """Scalar-loop version of kid (same canonical pairing for equal sizes)"""
    a = sorted(map(tuple, np.asarray(a, dtype=np.float64)))
    b = sorted(map(tuple, np.asarray(b, dtype=np.float64)))
    a, b = np.array(a), np.array(b)
    d = a.shape[1]

    def k(x, y):
        return (float(np.dot(x, y)) / d + 1.0) ** 3

    m, n = len(a), len(b)
    xx = sum(k(a[i], a[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(k(b[i], b[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    if m == n:
        xy = sum(k(a[i], b[j]) for i in range(m) for j in range(n) if i != j) / (m * (m - 1))
    else:
        xy = sum(k(a[i], b[j]) for i in range(m) for j in range(n)) / (m * n)
    return xx + yy - 2.0 * xy


def mmd_oracle(a, b, sigma):
    """Scalar-loop version of mmd_rbf"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)

    def k(x, y):
        return float(np.exp(-np.sum((x - y) ** 2) / (2.0 * sigma * sigma)))

    m, n = len(a), len(b)
    xx = sum(k(a[i], a[j]) for i in range(m) for j in range(m)) / (m * m)
    yy = sum(k(b[i], b[j]) for i in range(n) for j in range(n)) / (n * n)
    xy = sum(k(a[i], b[j]) for i in range(m) for j in range(n)) / (m * n)
    return xx + yy - 2.0 * xy


# ---------------------------------------------------------------------------
# suites

def check_dual_graph(count=50, seed=0):
    rng = nc.Rng(seed, 1)
    for k in range(count):
        occ = random_occupancy(rng.split(k))
        graph = dualize(build_octree(occ))
        edges, types = brute_force_adjacency(graph.lo, graph.hi)
        if not (np.array_equal(edges, graph.edges) and np.array_equal(types, graph.edge_types)):
            return False, f"grid {k} {occ.dims}: {graph.num_edges} edges vs {len(edges)} by brute force"
        if graph.max_depth > 0:
            coarse, _ = pool_graph(graph)
            if not coarse.same_structure(dualize(graph.octree.truncate(graph.max_depth - 1))):
                return False, f"grid {k}: pooled graph differs from the truncated octree's graph"
    return True, f"{count} random grids match"


def check_octree(count=50, seed=0):
    rng = nc.Rng(seed, 2)
    for k in range(count):
        occ = random_occupancy(rng.split(k), max_extent=16)
        oct_ = build_octree(occ).validate()
        if not octree_to_dense(oct_) == occ:
            return False, f"grid {k} {occ.dims}: dense round trip differs"
        d, c, o = oct_.leaves()
        ref = reference_leaves(occ)
        got = {(int(a), int(b)): bool(v) for a, b, v in zip(d, c, o)}
        if got != ref:
            return False, f"grid {k} {occ.dims}: leaves differ from recursive subdivision"
    side = 16
    x, y, z = np.meshgrid(np.arange(side), np.arange(side), np.arange(side), indexing="ij")
    codes = encode(x.ravel(), y.ravel(), z.ravel())
    back = np.stack(decode(codes), axis=1)
    if len(np.unique(codes)) != side ** 3 or not np.array_equal(back, np.stack([x.ravel(), y.ravel(), z.ravel()], 1)):
        return False, "morton encode/decode is not a bijection on 16^3"
    return True, f"{count} random grids round-trip, morton bijective"


def gradient_cases(seed=0):
    """(name, nc.Graph, inputs, parameter names) for every trained network"""
    config = tiny_config()
    rng = nc.Rng(seed, 3)
    cases = []

    occ = random_occupancy(rng.split("occ"), max_extent=4, density=0.4)
    graph = dualize(build_octree(occ))
    params = graph_conv_init(rng, "gc", 3, 2)
    h = nc.rng_normal(rng.split("h"), (graph.num_nodes, 3))
    target = nc.rng_normal(rng.split("target"), (graph.num_nodes, 2))
    params["h"] = h
    cases.append(("graph_conv",
                  nc.Graph(lambda p: {"loss": nc.squared_error(graph_conv(graph, p["h"], p, "gc"), target)}),
                  params, sorted(params)))

    vae = GraphVAE(config)
    scene = synthetic_scene(rng.split("scene"))
    targets = vae.scene_targets(scene)
    vparams = vae.init_all(rng.split("vae"))
    eps = nc.rng_normal(rng.split("eps"), (targets.code_graph.num_nodes, vae.code_width))
    cases.append(("patch codec + graph vae loss", vae.loss_graph(targets, eps, 0.1), vparams, sorted(vparams)))

    sched = make_schedule(config.sampler.T)
    structure = StructureDenoiser(config)
    trainer = DenoiserTrainer(config, structure, sched, name="structure")
    x0 = np.where(nc.rng_normal(rng.split("x0"), config.coarse_dims) > 0, 1.0, -1.0)
    batch = trainer.make_batch([TrainingItem(x0)], 0, rng.split("batch"))
    sparams = structure.init_params(rng.split("structure"))
    # zero-initialised output layers hide the upstream gradients
    sparams["structure.out.W"] = 0.1 * nc.rng_normal(rng.split("sw"), sparams["structure.out.W"].shape)
    cases.append(("structure denoiser objective", trainer.loss_graph(batch), sparams, sorted(sparams)))

    latent = LatentDenoiser(config)
    ltrainer = DenoiserTrainer(config, latent, sched, name="latent")
    code = vae.encode_scene(scene, vparams, targets)
    lbatch = ltrainer.make_batch([TrainingItem(code.mu, code.graph)], 0, rng.split("lbatch"))
    lparams = latent.init_params(rng.split("latent"))
    lparams["latent.out.W"] = 0.1 * nc.rng_normal(rng.split("lw"), lparams["latent.out.W"].shape)
    cases.append(("latent denoiser objective", ltrainer.loss_graph(lbatch), lparams, sorted(lparams)))
    return cases


def check_gradients(seeds=20, max_coords=3):
    worst = {}
    for seed in range(seeds):
        for name, graph, inputs, names in gradient_cases(seed):
            err = nc.check_gradients(graph, inputs, "loss", names, max_coords=max_coords, rng=nc.Rng(seed, 4))
            worst[name] = max(worst.get(name, 0.0), err)
    bad = {k: v for k, v in worst.items() if not v <= GRADIENT_TOLERANCE}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return not bad, detail


def check_metrics(seed=0):
    gen = nc.Rng(seed, 5).generator()
    a = gen.normal(size=(20, 4))
    if abs(fid(a, a)) > 1e-9:
        return False, "fid(a, a) is not 0"
    one = np.array([[-1.0], [1.0], [-1.0], [1.0]])
    if abs(fid(one, one + 1.0) - 1.0) > 1e-6:
        return False, "fid of a unit mean shift is not 1"
    b = gen.normal(size=(12, 4))
    if abs(kid(a, b) - kid_oracle(a, b)) > 1e-10 * max(1.0, abs(kid_oracle(a, b))):
        return False, "kid disagrees with the scalar oracle"
    if kid(a, a) != 0.0 or kid(a, a[::-1]) != 0.0:
        return False, "kid of a set with a reordering of itself is not exactly 0"
    c = gen.normal(loc=0.5, size=(20, 4))
    if kid(a, c) != kid(a, np.roll(c, 1, axis=0)):
        return False, "kid depends on the row order of its inputs"
    if abs(kid(a, c) - kid_oracle(a, c)) > 1e-10 * max(1.0, abs(kid_oracle(a, c))):
        return False, "kid disagrees with the scalar oracle on equal-size sets"
    sigma = 0.7
    x = np.zeros((1, 2))
    y = np.array([[sigma * np.sqrt(2.0), 0.0]])
    if abs(mmd_rbf(x, y, sigma) - (2.0 - 2.0 * np.exp(-1.0))) > 1e-12:
        return False, "mmd two-point closed form"
    if abs(mmd_rbf(a, b, 1.3) - mmd_oracle(a, b, 1.3)) > 1e-10:
        return False, "mmd disagrees with the scalar oracle"
    p = np.zeros((4, 1, 1), dtype=np.uint16)
    g = np.zeros((4, 1, 1), dtype=np.uint16)
    p[0:2] = 1
    g[1:3] = 1
    if abs(iou(SemanticVoxelGrid(p, 1.0, 2), SemanticVoxelGrid(g, 1.0, 2), 1) - 1.0 / 3.0) > 1e-15:
        return False, "iou hand case"
    return True, "fid / kid / mmd / iou oracles agree"


def blend_masks(shape, gen):
    """Empty, full, random, half-slab and single-element masks over `shape`"""
    half = np.zeros(shape, dtype=bool)
    half[: shape[0] // 2] = True
    single = np.zeros(shape, dtype=bool)
    single[tuple(int(gen.integers(0, n)) for n in shape)] = True
    return [np.zeros(shape, dtype=bool), np.ones(shape, dtype=bool), gen.random(shape) < 0.3, half, single]


def check_blending(seeds=20):
    sched = make_schedule(12)

    def model(x, t):
        return 0.4 * np.tanh(x) + 0.01 * t

    for seed in range(seeds):
        gen = nc.Rng(seed, 6).generator()
        cases = [("structure", (8, 8, 4), np.where(gen.random((8, 8, 4)) < 0.3, 1.0, -1.0)),
                 ("latent", (17,), gen.normal(size=(17, 3)))]
        for domain, mask_shape, ref in cases:
            plain = sample(model, ref.shape, sched, nc.Rng(seed))
            for k, m in enumerate(blend_masks(mask_shape, gen)):
                mask = BlendMask(m, ref)
                out = sample(model, ref.shape, sched, nc.Rng(seed), mask=mask)
                where = mask.broadcast(ref.shape)
                if not np.array_equal(out[where], ref[where]):
                    return False, f"{domain} seed {seed} mask {k}: masked entries differ from the reference"
                if domain == "structure" and not np.array_equal((out > 0)[where], (ref > 0)[where]):
                    return False, f"structure seed {seed} mask {k}: thresholded mask entries differ"
                if not m.any() and not np.array_equal(out, plain):
                    return False, f"{domain} seed {seed}: all-zero mask changes the sample"
    return True, f"{seeds} seeds x 5 masks, structure and latent, masked entries exact"


SUITES: List = [
    ("dual graph vs brute force", check_dual_graph),
    ("octree round trip", check_octree),
    ("gradient checks", check_gradients),
    ("metric oracles", check_metrics),
    ("blend fidelity", check_blending),
]


def run_selftest(suites=None, progress: Callable = None) -> List[CheckResult]:
    results = []
    for name, fn in suites or SUITES:
        start = time.time()
        try:
            passed, detail = fn()
        except Exception as e:
            logger.exception("selftest suite %s crashed", name)
            passed, detail = False, f"{type(e).__name__}: {e}"
        result = CheckResult(name, bool(passed), detail, time.time() - start)
        results.append(result)
        if progress is not None:
            progress(result)
    return results
