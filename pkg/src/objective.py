"""
Joint grounding objective for the patchalign toolkit

Builds CE + lambda * PAL + alpha * InfoNCE + beta * OT as a graph on a Tape
over the toy captioner, runs the backward pass and checks gradients
against central finite differences.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from src import config
from src.attnpool import aggregate_attention, retention_mask, topk_softmax, weighted_pool
from src.autodiff import Node, Tape
from src.errors import NumericalError, ShapeError, TapeError
from src.losses import PooledPairBatch
from src.numio import RunConfig
from src.toycap import (
    BranchGraph, ToyModel, TripletBatch, bind_parameters, branch_graph, forward,
    teacher_forcing_targets,
)
from src.utils import LossBreakdown


logger = logging.getLogger(__name__)

TERMS = ("ce", "pal", "nce", "ot")

# name -> (lambda_pal, alpha, beta, ce_on_synthetic)
VARIANTS: Dict[str, Tuple[float, float, float, bool]] = {
    "ce_real": (0.0, 0.0, 0.0, False),
    "ce_real_syn": (0.0, 0.0, 0.0, True),
    "ce_infonce": (0.0, config.ALPHA_NCE, 0.0, False),
    "ce_infonce_ot": (0.0, config.ALPHA_NCE, config.BETA_OT, False),
    "pal": (config.LAMBDA_PAL, 0.0, 0.0, False),
    "pal_infonce": (config.LAMBDA_PAL, config.ALPHA_NCE, 0.0, False),
    "pal_infonce_ot": (config.LAMBDA_PAL, config.ALPHA_NCE, config.BETA_OT, False),
}


def variant_config(base: RunConfig, variant: str) -> RunConfig:
    """RunConfig for a named ablation variant; other knobs come from base"""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    lambda_pal, alpha, beta, ce_on_synthetic = VARIANTS[variant]
    return base.merged(lambda_pal=lambda_pal, alpha=alpha, beta=beta, ce_on_synthetic=ce_on_synthetic)


def combine_terms(ce: float, pal: float, nce: float, ot: float, cfg: RunConfig) -> float:
    """ce + lambda * pal + alpha * nce + beta * ot, always in this order"""
    return ce + cfg.lambda_pal * pal + cfg.alpha * nce + cfg.beta * ot


# ---------------------------------------------------------------------------
# Term graphs
# ---------------------------------------------------------------------------

def ce_graph(tape: Tape, logits: Node, captions: np.ndarray, pad_mask: np.ndarray) -> Node:
    """Teacher-forced masked cross-entropy, mean over counted positions"""
    targets, target_mask = teacher_forcing_targets(captions, pad_mask)
    count = int(target_mask.sum())
    if count == 0:
        raise NumericalError("masked_ce needs at least one unmasked position")
    log_probs = tape.sub(logits, tape.logsumexp(logits, axis=-1, keepdims=True))
    picked = tape.take_along(log_probs, targets)
    return tape.scale(tape.sum(tape.mul(picked, target_mask.astype(np.float64))), -1.0 / count)


def patch_weights_graph(tape: Tape, branch: BranchGraph, pad_mask: np.ndarray, cfg: RunConfig) -> Node:
    """
    Differentiable PatchWeights (B, S) from a branch's cross-attention.

    The retained set is read off the forward values and held fixed, so
    gradients pass through the softmax and the renormalisation.
    """
    layers = len(branch.cross_attention)
    if not 1 <= cfg.last_k <= layers:
        raise ShapeError(f"last_k={cfg.last_k} must lie in [1, {layers}]")
    counts = pad_mask.sum(axis=1)
    if np.any(counts == 0):
        raise NumericalError("all caption tokens are PAD")

    selected = branch.cross_attention[-cfg.last_k:]
    batch, heads, steps, patches = selected[0].shape
    stacked = tape.concat([tape.reshape(p, (batch, 1, heads, steps, patches)) for p in selected], axis=1)
    token_weights = pad_mask / (counts[:, None] * cfg.last_k * heads)
    saliency = tape.sum(tape.mul(stacked, token_weights[:, None, None, :, None]), axis=(1, 2, 3))

    probs = tape.softmax(tape.scale(saliency, 1.0 / cfg.tau_attn), axis=-1)
    keep = retention_mask(probs.value, cfg.rho, cfg.retention_mode)
    weights = tape.renormalize(tape.mul(probs, keep.astype(np.float64)), axis=-1)
    if cfg.detach_weights:
        return tape.constant(weights.value)
    return weights


def pal_graph(tape: Tape, r: Node, r_syn: Node) -> Node:
    """Mean over the batch of 1 - cos(r, r_syn)"""
    cos = tape.cosine(r, r_syn, axis=-1)
    return tape.sub(1.0, tape.scale(tape.sum(cos), 1.0 / r.shape[0]))


def infonce_graph(tape: Tape, r: Node, r_syn: Node, temp: float) -> Node:
    """Paired InfoNCE with all 2B descriptors as anchors"""
    size = r.shape[0]
    z = tape.normalize(tape.concat([r, r_syn], axis=0), axis=-1)
    logits = tape.scale(tape.matmul(z, tape.transpose(z, (1, 0))), 1.0 / temp)
    logits = tape.add(logits, np.eye(2 * size) * config.MASK_FILL)
    positive = np.concatenate([np.arange(size, 2 * size), np.arange(size)])
    terms = tape.sub(tape.logsumexp(logits, axis=-1), tape.take_along(logits, positive))
    return tape.scale(tape.sum(terms), 1.0 / (2 * size))


def ot_graph(tape: Tape, e: Node, e_syn: Node, w: Node, w_syn: Node, cfg: RunConfig) -> Node:
    """Mean entropic transport cost between real and synthetic patch tokens"""
    cos = tape.matmul(tape.normalize(e, axis=-1), tape.transpose(tape.normalize(e_syn, axis=-1), (0, 2, 1)))
    cost = tape.sub(1.0, cos)
    _, transport = tape.sinkhorn(cost, w, w_syn, cfg.ot_eps, cfg.ot_iters)
    return tape.scale(tape.sum(transport), 1.0 / e.shape[0])


def build_terms(tape: Tape, model: ToyModel, batch: TripletBatch, cfg: RunConfig,
                params: Dict[str, Node]) -> Dict[str, Node]:
    """Term nodes for one triplet batch; alignment terms only with synthetic patches"""
    real = branch_graph(tape, model, params, batch.real_patches, batch.captions)
    terms = {"ce": ce_graph(tape, real.logits, batch.captions, batch.pad_mask)}
    if not batch.synthetic_present:
        return terms

    syn = branch_graph(tape, model, params, batch.syn_patches, batch.captions)
    if cfg.ce_on_synthetic:
        syn_ce = ce_graph(tape, syn.logits, batch.captions, batch.pad_mask)
        terms["ce"] = tape.scale(tape.add(terms["ce"], syn_ce), 0.5)

    w = patch_weights_graph(tape, real, batch.pad_mask, cfg)
    w_syn = patch_weights_graph(tape, syn, batch.pad_mask, cfg)
    r = tape.weighted_sum(w, real.memory)
    r_syn = tape.weighted_sum(w_syn, syn.memory)
    terms["pal"] = pal_graph(tape, r, r_syn)
    terms["nce"] = infonce_graph(tape, r, r_syn, cfg.nce_temp)
    terms["ot"] = ot_graph(tape, real.memory, syn.memory, w, w_syn, cfg)
    return terms


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def joint_loss(batch: TripletBatch, cfg: RunConfig, model: ToyModel, tape: Optional[Tape] = None,
               trainable: Optional[Iterable[str]] = None) -> LossBreakdown:
    """
    Evaluate the joint objective and leave its graph on the tape.

    Args:
        batch: Triplet batch; without synthetic patches only CE is active
        cfg: Loss weights and hyperparameters
        model: Captioner
        tape: Tape to record on (a fresh one when None)
        trainable: Parameter names recorded as variables (all when None)

    Returns:
        LossBreakdown; tape.loss holds the total node
    """
    tape = tape if tape is not None else Tape()
    trainable = set(model.params) if trainable is None else set(trainable)
    params = bind_parameters(tape, model, trainable)
    terms = build_terms(tape, model, batch, cfg, params)

    total = terms["ce"]
    if batch.synthetic_present:
        for name, weight in (("pal", cfg.lambda_pal), ("nce", cfg.alpha), ("ot", cfg.beta)):
            total = tape.add(total, tape.scale(terms[name], weight))
    tape.loss = total

    values = {name: float(terms[name].value) if name in terms else 0.0 for name in TERMS}
    breakdown = LossBreakdown(
        ce=values["ce"], pal=values["pal"], nce=values["nce"], ot=values["ot"],
        total=float(total.value), synthetic_present=batch.synthetic_present, tape=tape,
    )
    return breakdown


def backward(tape: Tape, breakdown: LossBreakdown) -> Dict[str, np.ndarray]:
    """
    Gradients of breakdown.total with respect to every trainable parameter.

    Parameters that did not influence the loss get zeros. The frozen
    encoder never appears on the tape.

    Raises:
        TapeError: tape holds no loss for this breakdown, or was already used
        NumericalError: a gradient is not finite
    """
    if tape.loss is None or (breakdown.tape is not None and breakdown.tape is not tape):
        raise TapeError("breakdown was not produced on this tape")
    tape.backward(tape.loss)
    grads = {}
    for name, node in tape.parameters.items():
        grad = node.grad if node.grad is not None else np.zeros_like(node.value)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for {name}")
        grads[name] = grad
    return grads


def term_gradients(model: ToyModel, batch: TripletBatch, cfg: RunConfig,
                   trainable: Optional[Iterable[str]] = None) -> Dict[str, Dict[str, np.ndarray]]:
    """Unweighted gradient of each active term, one fresh tape per term"""
    trainable = set(model.params) if trainable is None else set(trainable)
    result = {}
    for name in TERMS:
        if name != "ce" and not batch.synthetic_present:
            continue
        tape = Tape()
        params = bind_parameters(tape, model, trainable)
        term = build_terms(tape, model, batch, cfg, params)[name]
        tape.backward(term)
        result[name] = {
            key: node.grad if node.grad is not None else np.zeros_like(node.value)
            for key, node in tape.parameters.items()
        }
    return result


def pooled_pairs(model: ToyModel, batch: TripletBatch, cfg: RunConfig) -> PooledPairBatch:
    """Numpy path: forward, aggregate, TopKSoftmax and pool both branches"""
    if not batch.synthetic_present:
        raise ShapeError("pooled pairs need synthetic patches")
    out = forward(model, batch)

    def pool(stacks, memory):
        return np.stack([
            weighted_pool(topk_softmax(aggregate_attention(stack, cfg.last_k), cfg.tau_attn,
                                       cfg.rho, cfg.retention_mode), memory[i])
            for i, stack in enumerate(stacks)
        ])
    return PooledPairBatch(pool(out.real_attention, out.real_memory), pool(out.syn_attention, out.syn_memory))


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_relative_error: float
    worst_index: Tuple[int, ...]
    analytic: np.ndarray
    numeric: np.ndarray

    def to_dict(self) -> dict:
        return {
            "max_relative_error": self.max_relative_error,
            "worst_index": list(self.worst_index),
            "coordinates": int(self.analytic.size),
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|g - g_hat| / max(|g|, |g_hat|, floor), elementwise"""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), config.GRAD_CHECK_FLOOR)
    return np.abs(analytic - numeric) / scale


def grad_check(fn: Callable[[np.ndarray], Tuple[float, np.ndarray]], point: np.ndarray,
               h: float = 1e-5) -> GradCheckResult:
    """
    Compare an analytic gradient with central finite differences.

    Args:
        fn: Maps a point to (value, analytic gradient)
        point: Where to check (float64)
        h: Step size

    Raises:
        NumericalError: fn returns a non-finite value
    """
    point = np.array(point, dtype=np.float64)
    value, analytic = fn(point.copy())
    if not np.isfinite(value):
        raise NumericalError("grad_check: function value is not finite")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(point.shape)

    numeric = np.zeros_like(point)
    for index in np.ndindex(point.shape):
        shifted = point.copy()
        shifted[index] += h
        upper, _ = fn(shifted)
        shifted[index] -= 2 * h
        lower, _ = fn(shifted)
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NumericalError(f"grad_check: non-finite value near index {index}")
        numeric[index] = (upper - lower) / (2 * h)

    errors = relative_error(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(errors)), point.shape) if errors.size else ()
    return GradCheckResult(
        max_relative_error=float(errors.max()) if errors.size else 0.0,
        worst_index=tuple(int(i) for i in worst),
        analytic=analytic,
        numeric=numeric,
    )


def parameter_function(model: ToyModel, batch: TripletBatch, cfg: RunConfig, name: str,
                       term: Optional[str] = None) -> Callable[[np.ndarray], Tuple[float, np.ndarray]]:
    """
    Joint loss (or one unweighted term of it) as a function of one model
    parameter, for grad_check.

    The parameter is restored after every call.
    """
    if name not in model.params:
        raise KeyError(f"unknown parameter {name!r}")
    if term is not None and term not in TERMS:
        raise KeyError(f"unknown term {term!r}; choose from {list(TERMS)}")
    if term not in (None, "ce") and not batch.synthetic_present:
        raise ShapeError(f"term {term!r} needs synthetic patches")

    def fn(value: np.ndarray) -> Tuple[float, np.ndarray]:
        original = model.params[name]
        model.params[name] = value.reshape(original.shape)
        try:
            tape = Tape()
            if term is None:
                breakdown = joint_loss(batch, cfg, model, tape=tape, trainable=[name])
                grads = backward(tape, breakdown)
                loss = breakdown.total
            else:
                params = bind_parameters(tape, model, [name])
                node = build_terms(tape, model, batch, cfg, params)[term]
                tape.backward(node)
                grad = params[name].grad
                grads = {name: grad if grad is not None else np.zeros_like(params[name].value)}
                loss = float(node.value)
        finally:
            model.params[name] = original
        return loss, grads[name]
    return fn


def term_grad_checks(model: ToyModel, batch: TripletBatch, cfg: RunConfig, name: str,
                     h: float = 1e-5) -> Dict[str, GradCheckResult]:
    """grad_check of every active term with respect to one parameter"""
    active = TERMS if batch.synthetic_present else ("ce",)
    return {term: grad_check(parameter_function(model, batch, cfg, name, term), model.params[name], h)
            for term in active}
