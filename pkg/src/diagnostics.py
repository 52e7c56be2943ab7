"""
Alignment and caption-quality diagnostics
Centroid distance, RBF-MMD, 2-D PCA projection, corpus BLEU and loss-curve area
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist, pdist

from src import config
from src.errors import NumericalError, ShapeError


logger = logging.getLogger(__name__)

LABELS = ("real", "synthetic")


@dataclass(frozen=True)
class EmbeddingSet:
    """N x D descriptors with a real/synthetic label"""
    points: np.ndarray
    label: str = "real"

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if points.ndim != 2 or points.shape[0] < 1:
            raise ShapeError(f"EmbeddingSet needs an N x D array with N >= 1, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise NumericalError("EmbeddingSet entries must be finite")
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        object.__setattr__(self, "points", points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


PointsLike = Union[EmbeddingSet, np.ndarray]


def _points(x: PointsLike) -> np.ndarray:
    return x.points if isinstance(x, EmbeddingSet) else EmbeddingSet(x).points


def _pair(a: PointsLike, b: PointsLike) -> Tuple[np.ndarray, np.ndarray]:
    pa, pb = _points(a), _points(b)
    if pa.shape[1] != pb.shape[1]:
        raise ShapeError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    return pa, pb


def centroid_distance(a: PointsLike, b: PointsLike) -> float:
    """Euclidean distance between the two set means"""
    pa, pb = _pair(a, b)
    return float(np.linalg.norm(pa.mean(axis=0) - pb.mean(axis=0)))


def median_bandwidth(a: PointsLike, b: PointsLike) -> float:
    """Median pairwise distance over the pooled sets (1.0 when all points coincide)"""
    pa, pb = _pair(a, b)
    distances = pdist(np.vstack([pa, pb]))
    distances = distances[distances > 0]
    return float(np.median(distances)) if distances.size else 1.0


def mmd_rbf(a: PointsLike, b: PointsLike, bandwidth: Optional[float] = None) -> float:
    """
    Biased (V-statistic) squared MMD with kernel exp(-|x - y|^2 / (2 sigma^2)).

    Args:
        a, b: Point sets of equal width
        bandwidth: sigma; median pooled pairwise distance when None

    Returns:
        Squared MMD, clamped at 0
    """
    pa, pb = _pair(a, b)
    sigma = median_bandwidth(pa, pb) if bandwidth is None else bandwidth
    if not sigma > 0:
        raise ValueError(f"bandwidth must be positive, got {sigma}")
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-gamma * cdist(pa, pa, "sqeuclidean")).mean()
    kyy = np.exp(-gamma * cdist(pb, pb, "sqeuclidean")).mean()
    kxy = np.exp(-gamma * cdist(pa, pb, "sqeuclidean")).mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))


def pca_basis(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean and top-2 principal axes of a point cloud.

    Returns:
        (mean, axes as rows (<= 2 x D), singular values)
    """
    points = _points(points)
    if points.shape[0] < 2:
        raise ShapeError("pca_2d needs at least two points")
    mean = points.mean(axis=0)
    centered = points - mean
    if np.allclose(centered, 0.0):
        raise NumericalError("pca_2d of rank-0 data (all points identical)")
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    return mean, vt[:2], singular


def pca_2d(points: PointsLike) -> np.ndarray:
    """
    Project onto the top two principal axes of the mean-centred data.

    Axis signs are arbitrary; compare distances, not raw coordinates.
    """
    points = _points(points)
    mean, axes, _ = pca_basis(points)
    coords = (points - mean) @ axes.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
    return coords


def alignment_report(real: PointsLike, syn: PointsLike, bandwidth: Optional[float] = None,
                     bandwidth_2d: Optional[float] = None) -> Dict[str, float]:
    """
    Centroid distance and MMD in the ambient space and in a shared 2-D
    projection (fitted on the pooled points).
    """
    pr, ps = _pair(real, syn)
    projected = pca_2d(np.vstack([pr, ps]))
    qr, qs = projected[:len(pr)], projected[len(pr):]
    bandwidth = median_bandwidth(pr, ps) if bandwidth is None else bandwidth
    bandwidth_2d = median_bandwidth(qr, qs) if bandwidth_2d is None else bandwidth_2d
    return {
        "centroid_distance": centroid_distance(pr, ps),
        "mmd": mmd_rbf(pr, ps, bandwidth),
        "centroid_distance_2d": centroid_distance(qr, qs),
        "mmd_2d": mmd_rbf(qr, qs, bandwidth_2d),
        "bandwidth": bandwidth,
        "bandwidth_2d": bandwidth_2d,
    }


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
           max_n: int = config.MAX_BLEU_ORDER) -> Dict[str, float]:
    """
    Corpus BLEU-1..max_n on a 0-100 scale, single reference, no smoothing.

    Returns:
        {"bleu_1": ..., ..., "bleu_<max_n>": ...}

    Raises:
        ValueError: empty corpus or max_n outside [1, 4]
        ShapeError: candidate and reference counts differ
    """
    if not 1 <= max_n <= config.MAX_BLEU_ORDER:
        raise ValueError(f"max_n must lie in [1, {config.MAX_BLEU_ORDER}], got {max_n}")
    if len(candidates) != len(references):
        raise ShapeError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise ValueError("bleu_n needs a nonempty corpus")

    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            matches[n - 1] += sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)

    if cand_len == 0:
        brevity = 0.0
    elif cand_len > ref_len:
        brevity = 1.0
    else:
        brevity = math.exp(1.0 - ref_len / cand_len)

    scores = {}
    log_sum = 0.0
    for n in range(1, max_n + 1):
        precision = matches[n - 1] / totals[n - 1] if totals[n - 1] else 0.0
        if precision == 0.0 or log_sum == -math.inf:
            log_sum = -math.inf
            scores[f"bleu_{n}"] = 0.0
            continue
        log_sum += math.log(precision)
        scores[f"bleu_{n}"] = 100.0 * brevity * math.exp(log_sum / n)
    return scores


def loss_curve_auc(values: Sequence[float], skip_frac: float = config.AUC_SKIP_FRAC) -> float:
    """Trapezoidal area under a per-step loss curve, ignoring the first skip_frac of steps"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("loss_curve_auc needs at least one value")
    if not 0 <= skip_frac < 1:
        raise ValueError(f"skip_frac must lie in [0, 1), got {skip_frac}")
    tail = values[int(math.floor(skip_frac * values.size)):]
    if tail.size == 1:
        return float(tail[0])
    return float(trapezoid(tail))
