# Graph layers - the building blocks every network here is made of
# All structured ops (graph convolution, sibling pooling, 3D convolution)
# are compiled onto gather + scatter_add from numeric_core.

import numpy as np

import numeric_core as nc
from dual_graph import NUM_KERNEL_SLOTS, SELF_SLOT
from errors import ShapeError


# ---------------------------------------------------------------------------
# parameter initialisation

def dense_init(rng, prefix, fan_in, fan_out, zero=False):
    """{prefix.W, prefix.b} for a linear layer"""
    if zero:
        W = np.zeros((fan_in, fan_out))
    else:
        W = nc.init_weight(rng.split(prefix), fan_in, fan_out)
    return {f"{prefix}.W": W, f"{prefix}.b": np.zeros((1, fan_out))}


def graph_conv_init(rng, prefix, fan_in, fan_out):
    """Kernel bank laid out as (fan_in, 7 * fan_out), slot-major columns"""
    W = nc.init_weight(rng.split(prefix), fan_in, NUM_KERNEL_SLOTS * fan_out, gain=0.5)
    return {f"{prefix}.W": W, f"{prefix}.b": np.zeros((1, fan_out))}


def conv3d_init(rng, prefix, fan_in, fan_out, taps=27, zero=False):
    if zero:
        W = np.zeros((taps * fan_in, fan_out))
    else:
        W = nc.init_weight(rng.split(prefix), taps * fan_in, fan_out)
    return {f"{prefix}.W": W, f"{prefix}.b": np.zeros((1, fan_out))}


# ---------------------------------------------------------------------------
# layers

def linear(x, p, prefix, activation="linear"):
    return nc.activate(nc.add(nc.matmul(x, p[f"{prefix}.W"]), p[f"{prefix}.b"]), activation)


def graph_conv(graph, h, p, prefix, activation="tanh"):
    """
    out_i = W_self h_i + sum_type (1 / n_type(i)) sum_j W_type h_j, plus bias.
    One matmul produces all 7 slot projections; a single gather picks the
    (source, slot) rows and scatter_add sums them into their targets.
    """
    W = p[f"{prefix}.W"]
    cin = W.shape[0]
    if h.shape[1] != cin:
        raise ShapeError(f"graph_conv {prefix}: features have width {h.shape[1]}, kernel expects {cin}")
    if W.shape[1] % NUM_KERNEL_SLOTS:
        raise ShapeError(f"graph_conv {prefix}: kernel bank width {W.shape[1]} is not 7 slots")
    cout = W.shape[1] // NUM_KERNEL_SLOTS
    n = graph.num_nodes
    proj = nc.reshape(nc.matmul(h, W), (n * NUM_KERNEL_SLOTS, cout))
    rows = np.concatenate([graph.msg_source * NUM_KERNEL_SLOTS + graph.msg_type,
                           np.arange(n) * NUM_KERNEL_SLOTS + SELF_SLOT])
    targets = np.concatenate([graph.msg_target, np.arange(n)])
    weights = np.concatenate([graph.msg_weight, np.ones(n)])[:, None]
    msgs = nc.mul(nc.gather(proj, rows), weights)
    out = nc.add(nc.scatter_add(msgs, targets, n), p[f"{prefix}.b"])
    return nc.activate(out, activation)


def pool_features(h, pool_map, mode="mean", p=None, prefix=None):
    """Average each sibling octet into its parent; pass-through nodes keep their row"""
    inv = 1.0 / np.maximum(1, pool_map.counts)[pool_map.fine_to_coarse][:, None]
    if mode == "learned":
        # per-child-slot gains (slot 8 = pass-through), initialised at zero = plain mean
        gains = nc.add(nc.gather(p[f"{prefix}.slots"], pool_map.slot), 1.0)
        h = nc.mul(h, gains)
    return nc.scatter_add(nc.mul(h, inv), pool_map.fine_to_coarse, pool_map.n_coarse)


def pool_init(prefix, width):
    return {f"{prefix}.slots": np.zeros((9, width))}


def unpool_features(h, pool_map):
    """Children inherit their parent's row"""
    return nc.gather(h, pool_map.fine_to_coarse)


# ---------------------------------------------------------------------------
# dense 3D convolution over a small grid

def conv3d_table(dims, radius=1):
    """
    (cells, taps) gather table for a (2r+1)^3 stencil over a grid stored as
    rows in C order; out-of-grid taps point at the zero pad row `cells`.
    """
    nx, ny, nz = dims
    n = nx * ny * nz
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
    offsets = range(-radius, radius + 1)
    cols = []
    for dx in offsets:
        for dy in offsets:
            for dz in offsets:
                x, y, z = ix + dx, iy + dy, iz + dz
                inside = (x >= 0) & (x < nx) & (y >= 0) & (y < ny) & (z >= 0) & (z < nz)
                flat = (x * ny + y) * nz + z
                cols.append(np.where(inside, flat, n))
    return np.stack(cols, axis=1)


def conv3d(h, table, p, prefix, activation="tanh"):
    n, taps = table.shape
    width = h.shape[1]
    if h.shape[0] != n:
        raise ShapeError(f"conv3d {prefix}: {h.shape[0]} rows for a {n}-cell table")
    padded = nc.concat([h, np.zeros((1, width))], axis=0)
    cols = nc.reshape(nc.gather(padded, table.ravel()), (n, taps * width))
    return linear(cols, p, prefix, activation)


# ---------------------------------------------------------------------------
# constant input features

def fourier_features(points, frequencies):
    """sin/cos of 2^k * pi * p for k < frequencies, per coordinate"""
    points = np.asarray(points, dtype=np.float64)
    if frequencies <= 0:
        return np.zeros((len(points), 0))
    scales = np.pi * (2.0 ** np.arange(frequencies))
    angles = points[:, :, None] * scales[None, None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=2).reshape(len(points), -1)


def position_features(graph, frequencies, ref_depth=None):
    """Normalised depth plus Fourier features of normalised cube centres"""
    ref = max(1, graph.max_depth if ref_depth is None else ref_depth)
    depth = (graph.depths / ref)[:, None].astype(np.float64)
    return np.concatenate([depth, fourier_features(graph.centres, frequencies)], axis=1)


def position_width(frequencies):
    return 1 + 6 * max(0, frequencies)


def timestep_embedding(t, width):
    """Sinusoidal embedding of the timestep, shape (width,)"""
    half = max(1, (width + 1) // 2)
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angle = float(t) * freqs
    emb = np.concatenate([np.sin(angle), np.cos(angle)])
    return emb[:width]
