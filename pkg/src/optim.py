"""
Optimiser pieces for toy training
AdamW with decoupled weight decay, One-Cycle learning rate, global-norm clipping
and the progressive-unfreezing schedule
"""

import logging
import math
from typing import Dict, Iterable, Tuple

import numpy as np

from src import config
from src.errors import NumericalError


logger = logging.getLogger(__name__)


def one_cycle_lr(step: int, total_steps: int, peak_lr: float = config.PEAK_LR,
                 final_lr: float = config.FINAL_LR, warmup_frac: float = config.WARMUP_FRAC) -> float:
    """
    One-Cycle learning rate at a 0-based step.

    Linear warmup from peak / 25 to peak over the first warmup_frac of steps,
    then cosine annealing down to final_lr at the last step.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    step = min(max(step, 0), total_steps - 1)
    warmup = int(round(warmup_frac * total_steps))
    start = peak_lr / 25.0
    if step < warmup:
        return start + (peak_lr - start) * step / warmup
    span = total_steps - 1 - warmup
    if span <= 0:
        return peak_lr
    progress = (step - warmup) / span
    return final_lr + 0.5 * (peak_lr - final_lr) * (1.0 + math.cos(math.pi * progress))


def unfreeze_stage(step: int, total_steps: int,
                   fractions: Tuple[float, float] = config.UNFREEZE_FRACTIONS) -> int:
    """0 = bridge only, 1 = bridge + top layer, 2 = everything"""
    position = step / max(total_steps, 1)
    return sum(position >= f for f in fractions)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Rescale gradients so their joint L2 norm is at most max_norm.

    Returns:
        (clipped gradients, norm before clipping)
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericalError("gradient norm is not finite")
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


class AdamW:
    """
    Adam with decoupled weight decay over a dict of numpy parameters.

    Weight decay applies to matrices only; biases, LayerNorm scales and
    shifts are not decayed. Parameters are updated in place.
    """

    def __init__(self, params: Dict[str, np.ndarray], weight_decay: float = config.WEIGHT_DECAY,
                 betas: Tuple[float, float] = config.ADAM_BETAS, eps: float = config.ADAM_EPS):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}
        self.steps = {name: 0 for name in params}

    def step(self, grads: Dict[str, np.ndarray], lr: float, only: Iterable[str] = None) -> None:
        """Apply one update to every parameter in grads (restricted to `only` when given)"""
        allowed = set(grads) if only is None else set(only) & set(grads)
        for name in sorted(allowed):
            g = grads[name]
            self.steps[name] += 1
            t = self.steps[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            value = self.params[name]
            if value.ndim >= 2 and self.weight_decay:
                value -= lr * self.weight_decay * value
            value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "steps": self.steps}
