# Metrics - distribution distances between scene sets and segmentation IoU
# FID, KID (cubic polynomial kernel) and RBF MMD over feature vectors;
# per-class IoU / mIoU over voxel labels.
# Feature vectors come from the graph VAE: mean of the code-graph means over
# occupied nodes, one vector per scene.

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

import config as cfg
from errors import NumericError, ShapeError
from graph_vae import GraphVAE

logger = logging.getLogger(__name__)

EIGEN_TOLERANCE = 1e-8      # relative; smaller negative eigenvalues are rounding noise and clamp to 0


@dataclass(frozen=True, eq=False)
class FeatureSet:
    vectors: np.ndarray
    tag: str = "graph-vae-mean"

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ShapeError(f"FeatureSet: expected (n, d) vectors, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError(f"FeatureSet {self.tag!r}: non-finite feature values")
        object.__setattr__(self, "vectors", v)

    @property
    def n(self):
        return self.vectors.shape[0]

    @property
    def d(self):
        return self.vectors.shape[1]


@dataclass
class MetricReport:
    fid: float
    kid: float
    mmd: float
    mmd_bandwidth: float
    iou: Dict[int, float] = field(default_factory=dict)
    miou: Optional[float] = None
    n_real: int = 0
    n_generated: int = 0
    extractor: str = ""

    @property
    def kid_x1000(self):
        return 1000.0 * self.kid

    def to_json_dict(self):
        return {
            "fid": self.fid,
            "kid": self.kid,
            "kid_x1000": self.kid_x1000,
            "mmd": self.mmd,
            "mmd_bandwidth": self.mmd_bandwidth,
            "mmd_estimator": "biased",
            "iou": {str(k): v for k, v in sorted(self.iou.items())},
            "miou": self.miou,
            "n_real": self.n_real,
            "n_generated": self.n_generated,
            "extractor": self.extractor,
        }


def _as_set(x):
    return x if isinstance(x, FeatureSet) else FeatureSet(x)


def _same_width(a, b, op):
    if a.d != b.d:
        raise ShapeError(f"{op}: feature widths differ ({a.d} vs {b.d})")


def _psd_sqrt(mat, what):
    try:
        vals, vecs = linalg.eigh(mat)
    except linalg.LinAlgError as e:
        raise NumericError(f"fid: eigendecomposition of {what} failed: {e}") from e
    scale = max(1.0, float(np.abs(vals).max()) if len(vals) else 1.0)
    if len(vals) and vals.min() < -EIGEN_TOLERANCE * scale:
        cond = float(np.abs(vals).max() / max(np.abs(vals).min(), 1e-300))
        raise NumericError(f"fid: {what} is not positive semi-definite "
                           f"(smallest eigenvalue {vals.min():.3e}, condition number {cond:.3e})")
    vals = np.where(vals < 0.0, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T, vals


def _moments(fs):
    mu = fs.vectors.mean(axis=0)
    sigma = np.atleast_2d(np.cov(fs.vectors, rowvar=False))
    return mu, sigma


def fid(a, b):
    """
    Frechet distance between Gaussian fits of the two sets:
    |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)
    """
    a, b = _as_set(a), _as_set(b)
    _same_width(a, b, "fid")
    if a.n < 2 or b.n < 2:
        raise ShapeError(f"fid: need at least 2 vectors per set, got {a.n} and {b.n}")
    mu_a, sig_a = _moments(a)
    mu_b, sig_b = _moments(b)
    root_a, _ = _psd_sqrt(sig_a, "the first covariance")
    inner = root_a @ sig_b @ root_a
    _, vals = _psd_sqrt((inner + inner.T) / 2.0, "the covariance product")
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sig_a) + np.trace(sig_b) - 2.0 * np.sqrt(vals).sum())
    return max(value, 0.0)


def polynomial_kernel(x, y):
    """(x.y / d + 1)^3"""
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def canonical_rows(v):
    """Rows sorted lexicographically (first column most significant)"""
    v = np.asarray(v, dtype=np.float64)
    return v[np.lexsort(v.T[::-1])] if len(v) else v


def _off_diagonal_mean(k):
    n = k.shape[0]
    return (k.sum() - np.trace(k)) / (n * (n - 1))


def kid(a, b):
    """
    Unbiased squared MMD with the cubic polynomial kernel. Within-set sums
    skip i == j. For equally sized sets the cross sum skips i == j as well,
    with both sets in canonical row order so the pairing (and the result)
    does not depend on input order; equal multisets give exactly 0.
    """
    a, b = _as_set(a), _as_set(b)
    _same_width(a, b, "kid")
    if a.n < 2 or b.n < 2:
        raise ShapeError(f"kid: need at least 2 vectors per set, got {a.n} and {b.n}")
    x, y = canonical_rows(a.vectors), canonical_rows(b.vectors)
    kxy = polynomial_kernel(x, y)
    cross = _off_diagonal_mean(kxy) if a.n == b.n else kxy.mean()
    return float(_off_diagonal_mean(polynomial_kernel(x, x)) + _off_diagonal_mean(polynomial_kernel(y, y))
                 - 2.0 * cross)


def median_bandwidth(a, b):
    """Median pairwise distance of the pooled sets (1.0 when degenerate)"""
    pooled = np.concatenate([_as_set(a).vectors, _as_set(b).vectors])
    if len(pooled) < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd_rbf(a, b, bandwidth=None):
    """Biased (V-statistic) squared MMD with k(x, y) = exp(-|x - y|^2 / (2 s^2))"""
    a, b = _as_set(a), _as_set(b)
    _same_width(a, b, "mmd")
    sigma = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if sigma <= 0:
        raise ShapeError(f"mmd: bandwidth must be positive, got {sigma}")

    def k(x, y):
        return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * sigma * sigma))

    x, y = a.vectors, b.vectors
    return float(k(x, x).mean() + k(y, y).mean() - 2.0 * k(x, y).mean())


# ---------------------------------------------------------------------------
# segmentation

def _check_pair(pred, gt):
    if pred.dims != gt.dims:
        raise ShapeError(f"iou: prediction dims {pred.dims} vs ground truth {gt.dims}")


def iou(pred, gt, c):
    """|pred = c and gt = c| / |pred = c or gt = c|, nan when c is absent from both"""
    _check_pair(pred, gt)
    p, g = pred.labels == c, gt.labels == c
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return float("nan")
    return int(np.count_nonzero(p & g)) / union


def class_counts(pred, gt, num_classes):
    """(intersection, union) voxel counts per class"""
    _check_pair(pred, gt)
    p = pred.labels.ravel().astype(np.int64)
    g = gt.labels.ravel().astype(np.int64)
    inter = np.bincount(p[p == g], minlength=num_classes)[:num_classes]
    union = np.bincount(p, minlength=num_classes)[:num_classes] + \
        np.bincount(g, minlength=num_classes)[:num_classes] - inter
    return inter, union


def miou(pred, gt, include_empty=False):
    """Mean IoU over classes present in either grid (class 0 excluded unless asked for)"""
    num_classes = max(pred.num_classes, gt.num_classes)
    inter, union = class_counts(pred, gt, num_classes)
    classes = [c for c in range(0 if include_empty else 1, num_classes) if union[c] > 0]
    if not classes:
        return float("nan")
    return float(np.mean([inter[c] / union[c] for c in classes]))


def iou_table(preds: Sequence, gts: Sequence, num_classes, include_empty=False):
    """Per-class IoU accumulated over paired scenes, as a DataFrame"""
    if len(preds) != len(gts):
        raise ShapeError(f"iou: {len(preds)} predictions for {len(gts)} ground-truth scenes")
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for p, g in zip(preds, gts):
        i, u = class_counts(p, g, num_classes)
        inter += i
        union += u
    rows = []
    for c in range(0 if include_empty else 1, num_classes):
        if union[c] == 0:
            continue
        rows.append({"class": c, "intersection": int(inter[c]), "union": int(union[c]),
                     "iou": inter[c] / union[c]})
    return pd.DataFrame(rows, columns=["class", "intersection", "union", "iou"])


def pairwise_iou(preds: Sequence, gts: Sequence, num_classes):
    """mIoU of the per-class table built from paired scenes"""
    table = iou_table(preds, gts, num_classes)
    return float(table["iou"].mean()) if len(table) else float("nan")


# ---------------------------------------------------------------------------
# features

class MetricsCalculator:
    """Feature extraction with the trained graph VAE plus the full metric report"""

    def __init__(self, config, models, threads=None):
        self.config = config
        self.models = models.require("vae")
        self.vae = GraphVAE(config)
        self.threads = cfg.THREADS if threads is None else max(1, int(threads))

    def scene_feature(self, grid):
        if grid.dims != tuple(self.config.grid_dims) or grid.num_classes != self.config.num_classes:
            raise ShapeError(f"extract_features: scene {grid.dims} / {grid.num_classes} classes does not match "
                             f"the extractor config {tuple(self.config.grid_dims)} / {self.config.num_classes}")
        code = self.vae.encode_scene(grid, self.models.params)
        occupied = code.graph.occupied
        if not occupied.any():
            return np.zeros(self.vae.code_width)
        return code.mu[occupied].mean(axis=0)

    def extract_features(self, grids: Sequence, tag="graph-vae-mean") -> FeatureSet:
        if not grids:
            raise ShapeError("extract_features: no scenes")
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            rows = list(pool.map(self.scene_feature, grids))
        return FeatureSet(np.stack(rows), tag)

    def report(self, real: List, generated: List, bandwidth=None) -> MetricReport:
        fa = self.extract_features(real)
        fb = self.extract_features(generated)
        sigma = median_bandwidth(fa, fb) if bandwidth is None else bandwidth
        out = MetricReport(fid=fid(fa, fb), kid=kid(fa, fb), mmd=mmd_rbf(fa, fb, sigma), mmd_bandwidth=sigma,
                           n_real=fa.n, n_generated=fb.n, extractor=fa.tag)
        if len(real) == len(generated):
            table = iou_table(generated, real, self.config.num_classes)
            out.iou = {int(r["class"]): float(r["iou"]) for _, r in table.iterrows()}
            out.miou = float(table["iou"].mean()) if len(table) else None
        else:
            logger.info("iou skipped: %d real vs %d generated scenes are not paired", len(real), len(generated))
        logger.info("metrics: fid %.4f, kid %.4f (x1e3), mmd %.5f", out.fid, out.kid_x1000, out.mmd)
        return out
