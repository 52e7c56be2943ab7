"""
Loss functions for the patchalign toolkit
Masked cross-entropy, patch-alignment loss and paired InfoNCE (numpy evaluation)
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from src import config
from src.errors import NumericalError, ShapeError


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogitsBatch:
    """
    Teacher-forced decoder scores.

    Attributes:
        logits: B x T x V scores
        targets: B x T token ids in [0, V)
        pad_mask: B x T booleans, True = position counts toward the loss
    """
    logits: np.ndarray
    targets: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.int64)
        pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if logits.ndim != 3 or logits.shape[:-1] != targets.shape or targets.shape != pad_mask.shape:
            raise ShapeError(
                f"logits {logits.shape}, targets {targets.shape}, mask {pad_mask.shape} disagree"
            )
        vocab = logits.shape[-1]
        if np.any((targets < 0) | (targets >= vocab)):
            raise ShapeError(f"targets must lie in [0, {vocab})")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "pad_mask", pad_mask)


@dataclass(frozen=True)
class PooledPairBatch:
    """Paired B x D real and synthetic pooled descriptors"""
    r: np.ndarray
    r_syn: np.ndarray

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.r, dtype=np.float64))
        r_syn = np.atleast_2d(np.asarray(self.r_syn, dtype=np.float64))
        if r.shape != r_syn.shape or r.ndim != 2:
            raise ShapeError(f"descriptor shapes {r.shape} and {r_syn.shape} differ")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(r_syn))):
            raise NumericalError("pooled descriptors must be finite")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "r_syn", r_syn)

    @property
    def size(self) -> int:
        return self.r.shape[0]


def _checked_norms(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < config.NORM_FLOOR):
        raise NumericalError(f"{what} has a zero-norm vector")
    return norms


def masked_ce(batch: LogitsBatch) -> float:
    """
    Mean negative log-likelihood over unmasked positions.

    Raises:
        NumericalError: no unmasked position
    """
    count = int(batch.pad_mask.sum())
    if count == 0:
        raise NumericalError("masked_ce needs at least one unmasked position")
    log_probs = batch.logits - logsumexp(batch.logits, axis=-1, keepdims=True)
    nll = -np.take_along_axis(log_probs, batch.targets[..., None], axis=-1)[..., 0]
    return float(np.sum(nll[batch.pad_mask]) / count)


def pal_loss(r: np.ndarray, r_syn: np.ndarray) -> float:
    """
    Patch-alignment loss 1 - cos(r, r_syn), in [0, 2].

    Raises:
        NumericalError: either descriptor has zero norm
    """
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    r_syn = np.asarray(r_syn, dtype=np.float64).reshape(-1)
    if r.shape != r_syn.shape:
        raise ShapeError(f"descriptor shapes {r.shape} and {r_syn.shape} differ")
    cos = np.dot(r, r_syn) / (_checked_norms(r, "r")[0] * _checked_norms(r_syn, "r_syn")[0])
    return float(np.clip(1.0 - cos, 0.0, 2.0))


def pal_loss_batch(batch: PooledPairBatch) -> float:
    """Mean patch-alignment loss over a batch of pairs"""
    return float(np.mean([pal_loss(a, b) for a, b in zip(batch.r, batch.r_syn)]))


def infonce(batch: PooledPairBatch, temp: float = config.NCE_TEMP) -> float:
    """
    Paired InfoNCE over the 2B pooled descriptors.

    Each vector's positive is its real/synthetic counterpart; the other
    2B - 2 vectors are negatives. Every one of the 2B vectors is an anchor.

    Args:
        batch: Paired descriptors
        temp: Temperature

    Returns:
        Mean -log softmax(cos / temp) of the positives
    """
    if temp <= 0:
        raise ValueError(f"temp must be positive, got {temp}")
    size = batch.size

    z = np.vstack([batch.r, batch.r_syn])
    z = z / _checked_norms(z, "InfoNCE batch")
    logits = (z @ z.T) / temp
    np.fill_diagonal(logits, -np.inf)
    positive = np.concatenate([np.arange(size, 2 * size), np.arange(size)])
    pos_logits = logits[np.arange(2 * size), positive]
    loss = float(np.mean(logsumexp(logits, axis=1) - pos_logits))
    if not np.isfinite(loss):
        raise NumericalError("InfoNCE produced a non-finite value")
    return max(loss, 0.0)
