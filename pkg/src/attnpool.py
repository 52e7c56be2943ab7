"""
Attention pooling for the patchalign toolkit
Turns decoder cross-attention into text-conditioned patch weights and pooled descriptors
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from src import config
from src.errors import NumericalError, ShapeError


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttentionStack:
    """
    Cross-attention probabilities of one caption over one image.

    Attributes:
        values: L x Hd x T x S array; every (layer, head, token) row sums to 1
        token_mask: length-T booleans, True = valid token, False = PAD
    """
    values: np.ndarray
    token_mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.token_mask, dtype=bool)
        if values.ndim != 4:
            raise ShapeError(f"AttentionStack values must be L x Hd x T x S, got {values.shape}")
        if mask.shape != (values.shape[2],):
            raise ShapeError(f"token_mask has shape {mask.shape}, expected ({values.shape[2]},)")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise NumericalError("attention values must be finite and nonnegative")
        if np.any(np.abs(values.sum(axis=-1) - 1.0) > config.ROW_SUM_TOLERANCE):
            raise NumericalError("attention rows must sum to 1")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "token_mask", mask)

    @property
    def num_layers(self) -> int:
        return self.values.shape[0]

    @property
    def num_patches(self) -> int:
        return self.values.shape[3]


def aggregate_attention(stack: AttentionStack, last_k: int) -> np.ndarray:
    """
    Mean attention over the last K layers, all heads and valid token steps.

    Args:
        stack: Cross-attention probabilities
        last_k: Number of trailing layers to average

    Returns:
        Length-S saliency vector on the simplex

    Raises:
        ShapeError: last_k outside [1, L]
        NumericalError: every token is PAD
    """
    if not 1 <= last_k <= stack.num_layers:
        raise ShapeError(f"last_k={last_k} must lie in [1, {stack.num_layers}]")
    if not stack.token_mask.any():
        raise NumericalError("all caption tokens are PAD")
    selected = stack.values[-last_k:][:, :, stack.token_mask, :]
    return selected.mean(axis=(0, 1, 2))


def retention_mask(p: np.ndarray, rho: float, mode: str = config.DEFAULT_RETENTION_MODE) -> np.ndarray:
    """
    Patches kept by top-rho retention.

    "mass" keeps the smallest prefix in descending-weight order whose
    cumulative mass reaches rho; "count" keeps ceil(rho * S) patches. Ties
    go to the lower patch index. Works on the last axis.
    """
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    p = np.asarray(p, dtype=np.float64)
    order = np.argsort(-p, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=-1)
    size = p.shape[-1]

    if mode == "mass":
        cumulative = np.cumsum(sorted_p, axis=-1)
        before = cumulative - sorted_p
        # keep while the mass accumulated before this patch is still short of rho
        keep_sorted = before < rho * cumulative[..., -1:]
    elif mode == "count":
        keep_count = max(1, math.ceil(rho * size - 1e-12))
        keep_sorted = np.broadcast_to(np.arange(size) < keep_count, p.shape)
    else:
        raise ValueError(f"unknown retention mode {mode!r}")

    keep_sorted = keep_sorted.copy()
    keep_sorted[..., 0] = True
    mask = np.zeros(p.shape, dtype=bool)
    np.put_along_axis(mask, order, keep_sorted, axis=-1)
    return mask


def retention_margin(p: np.ndarray, rho: float) -> float:
    """
    Distance from p to a change in the mass-mode retention set.

    The minimum of the gap between cumulative mass and rho at every prefix
    and the gap between consecutive sorted weights (a swap would reorder
    the prefix). Gradient checks skip points where this is small.
    """
    sorted_p = np.sort(np.asarray(p, dtype=np.float64).reshape(-1))[::-1]
    cumulative = np.cumsum(sorted_p)
    gaps = np.abs(cumulative - rho * cumulative[-1])
    order_gaps = np.abs(np.diff(sorted_p)) if sorted_p.size > 1 else np.array([np.inf])
    return float(min(gaps.min(), order_gaps.min()))


def topk_softmax(saliency: np.ndarray, tau: float = config.TAU_ATTN, rho: float = config.RHO,
                 mode: str = config.DEFAULT_RETENTION_MODE) -> np.ndarray:
    """
    Tempered softmax followed by top-rho retention and renormalisation.

    Args:
        saliency: Length-S scores (last axis; leading axes are batched)
        tau: Softmax temperature
        rho: Retained mass (or fraction of patches in count mode)
        mode: "mass" or "count"

    Returns:
        PatchWeights on the simplex
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.shape[-1] < 1:
        raise ShapeError("saliency must have at least one patch")
    if not np.all(np.isfinite(saliency)):
        raise NumericalError("saliency contains non-finite entries")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    probs = softmax(saliency / tau, axis=-1)
    kept = np.where(retention_mask(probs, rho, mode), probs, 0.0)
    return kept / kept.sum(axis=-1, keepdims=True)


def weighted_pool(w: np.ndarray, e: np.ndarray) -> np.ndarray:
    """
    Text-weighted pooling r = sum_s w_s e_s.

    Args:
        w: Length-S weights
        e: S x D patch tokens

    Returns:
        Length-D descriptor
    """
    w = np.asarray(w, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if e.ndim < 2 or w.shape[-1] != e.shape[-2]:
        raise ShapeError(f"weights {w.shape} do not match patch tokens {e.shape}")
    pooled = np.einsum("...s,...sd->...d", w, e)
    if not np.all(np.isfinite(pooled)):
        raise NumericalError("pooled descriptor is not finite")
    return pooled
