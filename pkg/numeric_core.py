"""
Numeric core
Small reverse-mode autodiff over numpy float64 arrays, Adam, a counter-based
RNG and the OLP1 parameter checkpoint format.

Every network in the package is written as plain functions over Node objects.
Graph convolution, pooling and 3D convolution are compiled onto gather and
scatter-add, so those two are the only structured primitives here.
"""
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from errors import FormatError, GraphError, NumericError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
FD_NOISE_FLOOR = 1e-5      # gradient norms below this (times |loss|) are at finite-difference roundoff
_M64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Nodes

class Node:
    """One value in the computation graph plus the rule to push gradients back"""

    __slots__ = ("value", "parents", "adjoint", "op", "name")

    def __init__(self, value, parents=(), adjoint=None, op="leaf", name=None):
        self.value = value
        self.parents = parents
        self.adjoint = adjoint
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"


def leaf(value, name=None):
    """Wrap an array as a graph leaf (parameter or input)"""
    arr = np.array(value, dtype=DTYPE)
    return Node(arr, op="leaf", name=name)


def _as_node(x):
    return x if isinstance(x, Node) else leaf(x)


def _finish(op, value, parents, adjoint):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op}")
    return Node(value, parents, adjoint, op)


def _unbroadcast(grad, shape):
    # sum out the axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast extents {a.shape} and {b.shape}") from None


def _scatter_rows(values, index, n):
    # sum rows of values into n output rows; bincount keeps the reduction order fixed
    values = np.asarray(values, dtype=DTYPE)
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(DTYPE)
    width = int(np.prod(values.shape[1:]))
    flat = values.reshape(len(index), width)
    target = (np.asarray(index, dtype=np.int64)[:, None] * width + np.arange(width)).ravel()
    out = np.bincount(target, weights=flat.ravel(), minlength=n * width)
    return out.reshape((n,) + values.shape[1:]).astype(DTYPE)


# ---------------------------------------------------------------------------
# Elementwise arithmetic

def add(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a, b)
    return _finish("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("sub", a, b)
    return _finish("sub", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("mul", a, b)
    return _finish("mul", a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def neg(a):
    a = _as_node(a)
    return _finish("neg", -a.value, (a,), lambda g: (-g,))


def exp(a):
    a = _as_node(a)
    out = np.exp(a.value)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = _as_node(a)
    if np.any(a.value <= 0):
        raise NumericError("log: non-positive input")
    return _finish("log", np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a):
    a = _as_node(a)
    out = np.tanh(a.value)
    return _finish("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = _as_node(a)
    out = _stable_sigmoid(a.value)
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def activate(x, kind):
    if kind == "tanh":
        return tanh(x)
    if kind == "linear":
        return x
    raise GraphError(f"unknown activation {kind!r}")


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Linear algebra and layout

def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible extents {a.shape} @ {b.shape}")
    return _finish("matmul", a.value @ b.value, (a, b),
                   lambda g: (g @ b.value.T, a.value.T @ g))


def gather(x, index):
    """Rows x[index]; the adjoint is scatter-add"""
    x = _as_node(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather: index out of range for {n} rows")
    return _finish("gather", x.value[index], (x,),
                   lambda g: (_scatter_rows(g, index, n),))


def scatter_add(x, index, n):
    """Sum rows of x into n rows at positions index; the adjoint is gather"""
    x = _as_node(x)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != x.shape[0]:
        raise ShapeError(f"scatter_add: {len(index)} indices for {x.shape[0]} rows")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"scatter_add: index out of range for {n} rows")
    return _finish("scatter_add", _scatter_rows(x.value, index, n), (x,),
                   lambda g: (g[index],))


def reshape(x, shape):
    x = _as_node(x)
    try:
        out = x.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view extents {x.shape} as {tuple(shape)}") from None
    old = x.shape
    return _finish("reshape", out, (x,), lambda g: (g.reshape(old),))


def concat(nodes, axis=-1):
    nodes = [_as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: extents {[n.shape for n in nodes]} along axis {axis}") from None
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return _finish("concat", out, tuple(nodes),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def total(x):
    """Sum of all elements (scalar)"""
    x = _as_node(x)
    shape = x.shape
    return _finish("sum", np.array(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x):
    x = _as_node(x)
    shape = x.shape
    n = max(1, x.value.size)
    return _finish("mean", np.array(x.value.sum() / n), (x,), lambda g: (np.full(shape, float(g) / n),))


def squared_error(pred, target):
    """Sum of squared residuals (scalar)"""
    diff = sub(pred, target)
    return total(mul(diff, diff))


# ---------------------------------------------------------------------------
# Losses

def softmax_cross_entropy(logits, labels, weights=None):
    """Weighted mean cross-entropy of rows of logits against integer labels"""
    logits = _as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        return _finish("softmax_cross_entropy", np.array(0.0), (logits,), lambda g: (np.zeros((0, c)),))
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"softmax_cross_entropy: label out of range for {c} classes")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=DTYPE)
    wsum = w.sum()
    if wsum <= 0:
        return _finish("softmax_cross_entropy", np.array(0.0), (logits,), lambda g: (np.zeros((n, c)),))
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_row = lse - shifted[np.arange(n), labels]
    value = np.array((w * per_row).sum() / wsum)

    def adjoint(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(n), labels] -= 1.0
        return (float(g) * probs * (w / wsum)[:, None],)

    return _finish("softmax_cross_entropy", value, (logits,), adjoint)


def sigmoid_bce(logits, targets):
    """Mean binary cross-entropy of logits against 0/1 targets"""
    logits = _as_node(logits)
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"sigmoid_bce: logits {logits.shape} vs targets {y.shape}")
    x = logits.value
    n = max(1, x.size)
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    value = np.array(per.sum() / n)
    return _finish("sigmoid_bce", value, (logits,),
                   lambda g: (float(g) * (_stable_sigmoid(x) - y) / n,))


def gaussian_kl(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, 1)), summed over components, mean over rows"""
    mu, logvar = _as_node(mu), _as_node(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"gaussian_kl: mu {mu.shape} vs logvar {logvar.shape}")
    rows = mu.shape[0] if mu.value.ndim >= 2 else 1
    rows = max(1, rows)
    ev = np.exp(logvar.value)
    per = 0.5 * (mu.value ** 2 + ev - 1.0 - logvar.value)
    value = np.array(per.sum() / rows)
    return _finish("gaussian_kl", value, (mu, logvar),
                   lambda g: (float(g) * mu.value / rows, float(g) * 0.5 * (ev - 1.0) / rows))


# ---------------------------------------------------------------------------
# Backward pass

def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, wrt):
    """Gradients of a scalar loss with respect to the named leaf nodes in wrt"""
    if loss.value.size != 1:
        raise ShapeError(f"gradient: loss must be scalar, got extents {loss.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.adjoint is None:
            continue
        for parent, pg in zip(node.parents, node.adjoint(g)):
            if pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return {name: grads.get(id(n), np.zeros_like(n.value)).reshape(n.shape) for name, n in wrt.items()}


# ---------------------------------------------------------------------------
# Graph: named define-by-run computation

class _Leaves:
    # hands out leaf nodes for named inputs, failing loudly on unbound names

    def __init__(self, inputs):
        self._inputs = inputs
        self.nodes = {}

    def __getitem__(self, name):
        if name not in self.nodes:
            if name not in self._inputs:
                raise GraphError(f"unbound leaf {name!r}")
            self.nodes[name] = leaf(self._inputs[name], name=name)
        return self.nodes[name]

    def __contains__(self, name):
        return name in self._inputs

    def get(self, name, default=None):
        return self[name] if name in self._inputs else default


class Graph:
    """A computation described by build(leaves) -> dict of output nodes"""

    def __init__(self, build: Callable, name: str = "graph"):
        self.build = build
        self.name = name

    def trace(self, inputs):
        leaves = _Leaves(inputs)
        outputs = self.build(leaves)
        if isinstance(outputs, Node):
            outputs = {"out": outputs}
        return outputs, leaves.nodes


def evaluate(graph, inputs):
    """Forward values of every named output"""
    outputs, _ = graph.trace(inputs)
    return {name: node.value.copy() for name, node in outputs.items()}


def gradient(graph, inputs, loss="loss", params=None):
    """d(loss)/d(p) for each requested parameter name; unused ones get zeros"""
    return value_and_gradient(graph, inputs, loss, params)[1]


def value_and_gradient(graph, inputs, loss="loss", params=None):
    """Forward values of every output plus the gradients, from a single trace"""
    outputs, leaves = graph.trace(inputs)
    if loss not in outputs:
        raise GraphError(f"graph {graph.name!r} has no output named {loss!r}")
    names = list(inputs) if params is None else list(params)
    wrt = {}
    for name in names:
        if name not in inputs:
            raise GraphError(f"unknown parameter {name!r}")
        wrt[name] = leaves.get(name) or leaf(inputs[name], name=name)
    values = {name: node.value.copy() for name, node in outputs.items()}
    return values, backward(outputs[loss], wrt)


def check_gradients(graph, inputs, loss="loss", params=None, step=1e-5, max_coords=None, rng=None):
    """
    Compare analytic gradients with central finite differences.
    Returns the worst per-tensor relative error ||a - n|| / max(||a||, ||n||, floor),
    where floor = FD_NOISE_FLOOR * max(1, |loss|) is the finite-difference roundoff scale.
    """
    analytic = gradient(graph, inputs, loss, params)
    floor = FD_NOISE_FLOOR * max(1.0, abs(float(evaluate(graph, inputs)[loss])))
    worst = 0.0
    for name, grad in analytic.items():
        base = np.array(inputs[name], dtype=DTYPE)
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            picker = (rng or Rng(0)).generator()
            coords = np.sort(picker.choice(base.size, size=max_coords, replace=False))
        numeric = np.zeros(len(coords))
        for k, flat in enumerate(coords):
            shifted = dict(inputs)
            plus = base.copy().ravel()
            plus[flat] += step
            shifted[name] = plus.reshape(base.shape)
            f_plus = float(evaluate(graph, shifted)[loss])
            minus = base.copy().ravel()
            minus[flat] -= step
            shifted[name] = minus.reshape(base.shape)
            f_minus = float(evaluate(graph, shifted)[loss])
            numeric[k] = (f_plus - f_minus) / (2 * step)
        a = grad.ravel()[coords]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params):
    return AdamState(0, {k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected adaptive-moment update; returns new params and state"""
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam_step: {name} param {p.shape}, grad {g.shape}, state {m.shape}/{v.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step, new_m, new_v)


# ---------------------------------------------------------------------------
# Counter-based RNG

def _mix64(x):
    # SplitMix64 finalizer
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def _stream_id(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & _M64


class Rng:
    """
    Deterministic random source addressed by (seed, stream, draw index).
    Each draw call starts at index 0 of its stream, so callers split a fresh
    stream per step / per component instead of advancing shared state.
    """

    def __init__(self, seed=0, stream=0):
        self.seed = int(seed) & _M64
        self.stream = int(stream) & _M64

    def split(self, *ids):
        s = self.stream
        for part in ids:
            s = _mix64(s ^ _mix64(_stream_id(part)))
        return Rng(self.seed, s)

    def generator(self):
        return np.random.Generator(np.random.Philox(key=self.seed | (self.stream << 64)))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream:#x})"


def rng_normal(rng, shape):
    """I.i.d. standard normal draws for this (seed, stream)"""
    return rng.generator().standard_normal(tuple(shape)).astype(DTYPE)


def init_weight(rng, fan_in, fan_out, gain=1.0):
    """Scaled-normal initial weights (variance gain / fan_in)"""
    return rng_normal(rng, (fan_in, fan_out)) * (gain / np.sqrt(max(1, fan_in)))


# ---------------------------------------------------------------------------
# OLP1 checkpoints

CHECKPOINT_MAGIC = b"OLP1"
CHECKPOINT_VERSION = 1


def _write_atomic(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_checkpoint(params, path, model_config=None):
    """Write named tensors (sorted by name) in the OLP1 container"""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    _write_atomic(path, b"".join(chunks))
    if model_config is not None:
        _write_atomic(f"{path}.json", json.dumps(model_config, indent=2, sort_keys=True).encode("utf-8"))
    logger.debug("saved %d tensors to %s", len(params), path)


def load_checkpoint(path):
    """Read an OLP1 container back into a dict of float64 arrays"""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise FormatError("checkpoint not found", path) from None
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", path, 0)
    if len(blob) < 8:
        raise FormatError("truncated checkpoint header", path, len(blob))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    params, pos = {}, 8
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + name_len].decode("utf-8")
            pos += 4 + name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
        except (struct.error, UnicodeDecodeError):
            raise FormatError("truncated checkpoint record", path, pos) from None
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(blob):
            raise FormatError(f"truncated tensor {name!r}", path, pos)
        params[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).astype(DTYPE).reshape(shape)
        pos += nbytes
    return params


def load_model_config(path):
    with open(f"{path}.json", "r", encoding="utf-8") as f:
        return json.load(f)


def prefixed(params, prefix):
    """Sub-dict of params whose names start with prefix"""
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def as_leaves(params, names: Optional[Iterable[str]] = None):
    """Turn a dict of arrays into named leaf nodes"""
    keys = params.keys() if names is None else names
    return {k: leaf(params[k], name=k) for k in keys}
