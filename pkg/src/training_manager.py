"""
Training Manager for the toy captioner
Runs the optimisation loop, tracks real/synthetic alignment and runs ablations
"""

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import config
from src.autodiff import Tape
from src.diagnostics import alignment_report, bleu_n, loss_curve_auc
from src.errors import DivergenceError
from src.numio import RunConfig
from src.objective import VARIANTS, backward, joint_loss, pooled_pairs, variant_config
from src.optim import AdamW, clip_by_global_norm, one_cycle_lr, unfreeze_stage
from src.scenes import SceneSample, decode_caption, make_samples
from src.toycap import ToyModel, collate, generate, make_batches
from src.utils import AlignmentSnapshot, LossBreakdown, StepRecord, TrainingResult, generate_run_id


logger = logging.getLogger(__name__)

DEFAULT_TRAIN_SIZE = 64
DEFAULT_EVAL_SIZE = 16


def build_dataset(count: int, seed: int) -> List[SceneSample]:
    """Paired scenes from their own generator"""
    return make_samples(count, np.random.default_rng(seed))


def mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    """Average of micro-batch breakdowns (tapes are not carried over)"""
    count = len(parts)
    return LossBreakdown(
        ce=sum(p.ce for p in parts) / count,
        pal=sum(p.pal for p in parts) / count,
        nce=sum(p.nce for p in parts) / count,
        ot=sum(p.ot for p in parts) / count,
        total=sum(p.total for p in parts) / count,
        synthetic_present=all(p.synthetic_present for p in parts),
    )


class TrainingManager:
    """
    Trains a ToyModel under one RunConfig.

    Alignment is measured on a held-out set of paired scenes before the
    first step, after every epoch and at the end. MMD bandwidths are fixed
    from the step-0 descriptors so snapshots stay comparable.
    """

    def __init__(self, cfg: RunConfig, variant: str = "custom",
                 eval_samples: Optional[Sequence[SceneSample]] = None):
        """
        Initialize training manager.

        Args:
            cfg: Run configuration (seed drives model init and shuffling)
            variant: Label stored with the result
            eval_samples: Held-out scenes for alignment and BLEU
        """
        self.cfg = cfg
        self.variant = variant
        self.eval_samples = list(eval_samples) if eval_samples is not None else \
            build_dataset(DEFAULT_EVAL_SIZE, cfg.seed + 1)
        self.model = ToyModel(seed=cfg.seed)
        self.optimizer = AdamW(self.model.params, weight_decay=cfg.weight_decay)
        self._bandwidths = None

    def snapshot(self, step: int) -> AlignmentSnapshot:
        """Alignment of pooled real/synthetic descriptors on the held-out scenes"""
        pairs = pooled_pairs(self.model, collate(self.eval_samples), self.cfg)
        if self._bandwidths is None:
            first = alignment_report(pairs.r, pairs.r_syn)
            self._bandwidths = (first["bandwidth"], first["bandwidth_2d"])
        report = alignment_report(pairs.r, pairs.r_syn, *self._bandwidths)
        return AlignmentSnapshot(
            step=step,
            centroid_distance=report["centroid_distance"],
            mmd=report["mmd"],
            centroid_distance_2d=report["centroid_distance_2d"],
            mmd_2d=report["mmd_2d"],
        )

    def evaluate_bleu(self) -> Dict[str, float]:
        """Corpus BLEU-1..4 of generated captions on the held-out real images"""
        candidates, references = [], []
        for sample in self.eval_samples:
            ids = generate(self.model, sample.real_patches, self.cfg.max_len, self.cfg.beams,
                           self.cfg.no_repeat_ngram, self.cfg.length_penalty)
            candidates.append(decode_caption(ids))
            references.append(sample.scene.caption_words())
        return bleu_n(candidates, references)

    def _trainable(self, step: int, total_steps: int) -> List[str]:
        if not self.cfg.progressive_unfreeze:
            return list(self.model.params)
        return sorted(self.model.parameter_group(unfreeze_stage(step, total_steps)))

    def train(self, dataset: Sequence[SceneSample], epochs: int = config.DEFAULT_EPOCHS,
              with_synthetic: bool = True) -> TrainingResult:
        """
        Run the full training protocol.

        Args:
            dataset: Paired training scenes
            epochs: Passes over the dataset
            with_synthetic: Feed synthetic patches (alignment terms need them)

        Returns:
            TrainingResult with one StepRecord per optimiser step

        Raises:
            DivergenceError: a loss became non-finite
        """
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        micro_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
        steps_per_epoch = math.ceil(micro_per_epoch / cfg.accumulation_steps)
        total_steps = steps_per_epoch * epochs
        logger.info(f"Training {self.variant}: {len(dataset)} scenes, {epochs} epochs, "
                    f"{total_steps} steps, seed {cfg.seed}")

        alignment = [self.snapshot(0)]
        history = []
        step = 0
        for epoch in range(epochs):
            order = rng.permutation(len(dataset))
            batches = make_batches([dataset[i] for i in order], cfg.batch_size, with_synthetic)
            for start in range(0, len(batches), cfg.accumulation_steps):
                group = batches[start:start + cfg.accumulation_steps]
                history.append(self._step(group, step, total_steps))
                step += 1
            alignment.append(self.snapshot(step))
            logger.info(f"Epoch {epoch + 1}/{epochs}: total={history[-1].losses.total:.4f} "
                        f"centroid={alignment[-1].centroid_distance:.4f}")

        result = TrainingResult(
            run_id=generate_run_id(self.variant, cfg.seed, epochs),
            variant=self.variant,
            seed=cfg.seed,
            epochs=epochs,
            history=history,
            alignment=alignment,
            bleu=self.evaluate_bleu(),
            timestamp=datetime.now(),
        )
        logger.info(f"Finished {result.run_id}: BLEU-4 {result.bleu.get('bleu_4', 0.0):.2f}")
        return result

    def _step(self, group, step: int, total_steps: int) -> StepRecord:
        cfg = self.cfg
        trainable = self._trainable(step, total_steps)
        summed = {}
        parts = []
        for batch in group:
            tape = Tape()
            breakdown = joint_loss(batch, cfg, self.model, tape=tape, trainable=trainable)
            if not math.isfinite(breakdown.total):
                raise DivergenceError(step)
            grads = backward(tape, breakdown)
            for name, grad in grads.items():
                summed[name] = summed[name] + grad if name in summed else grad
            parts.append(breakdown)

        grads = {name: grad / len(group) for name, grad in summed.items()}
        grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
        lr = one_cycle_lr(step, total_steps, cfg.peak_lr, cfg.final_lr, cfg.warmup_frac)
        self.optimizer.step(grads, lr, only=trainable)

        losses = mean_breakdown(parts)
        logger.debug(f"step {step}: lr={lr:.2e} |g|={norm:.3f} total={losses.total:.4f}")
        return StepRecord(
            step=step,
            lr=lr,
            grad_norm=norm,
            unfreeze_stage=unfreeze_stage(step, total_steps) if cfg.progressive_unfreeze else 2,
            losses=losses,
        )


def train(dataset: Sequence[SceneSample], cfg: RunConfig, epochs: int = config.DEFAULT_EPOCHS,
          variant: str = "custom", eval_samples: Optional[Sequence[SceneSample]] = None) -> TrainingResult:
    """Train a fresh ToyModel and return its result"""
    return TrainingManager(cfg, variant, eval_samples).train(dataset, epochs)


def summarize(result: TrainingResult) -> dict:
    """Compact per-variant summary: final losses, alignment change, BLEU, curve areas"""
    first, last = result.alignment[0], result.alignment[-1]
    totals = [record.losses.total for record in result.history]
    ces = [record.losses.ce for record in result.history]

    def relative_drop(before, after):
        return (before - after) / before if before > 0 else 0.0

    return {
        "variant": result.variant,
        "final": result.final.losses.to_dict() if result.final else None,
        "centroid_start": first.centroid_distance,
        "centroid_end": last.centroid_distance,
        "centroid_drop": relative_drop(first.centroid_distance, last.centroid_distance),
        "mmd_start": first.mmd,
        "mmd_end": last.mmd,
        "mmd_2d_start": first.mmd_2d,
        "mmd_2d_end": last.mmd_2d,
        "total_auc": loss_curve_auc(totals),
        "ce_auc": loss_curve_auc(ces),
        "bleu": result.bleu,
    }


def _run_job(args) -> TrainingResult:
    cfg, label, epochs, train_size, eval_size = args
    dataset = build_dataset(train_size, cfg.seed)
    eval_samples = build_dataset(eval_size, cfg.seed + 1)
    return train(dataset, cfg, epochs, label, eval_samples)


def _fan_out(jobs: List[tuple], workers: int) -> List[TrainingResult]:
    """Run training jobs in order, across processes when workers > 1"""
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(_run_job, jobs))
    return [_run_job(job) for job in jobs]


def run_ablation(base: RunConfig, variants: Optional[Sequence[str]] = None,
                 epochs: int = config.DEFAULT_EPOCHS, train_size: int = DEFAULT_TRAIN_SIZE,
                 eval_size: int = DEFAULT_EVAL_SIZE, workers: int = 1) -> Dict[str, dict]:
    """
    Train every variant on the same scenes with the same seed.

    Args:
        base: Shared configuration; the variant sets the loss weights
        variants: Names from objective.VARIANTS (all when None)
        epochs: Epochs per variant
        train_size / eval_size: Scene counts
        workers: Parallel processes (results are identical either way)

    Returns:
        variant -> summary dict
    """
    variants = list(variants) if variants is not None else list(VARIANTS)
    jobs = [(variant_config(base, variant), variant, epochs, train_size, eval_size) for variant in variants]
    logger.info(f"Running ablation over {variants} with {workers} worker(s)")
    return {result.variant: summarize(result) for result in _fan_out(jobs, workers)}


def sweep_grid(lambdas: Sequence[float], taus: Sequence[float],
               rhos: Sequence[float]) -> List[Tuple[float, float, float]]:
    """Cartesian product of (lambda_pal, tau_attn, rho) values"""
    return [tuple(float(v) for v in point) for point in itertools.product(lambdas, taus, rhos)]


def sweep_label(lambda_pal: float, tau_attn: float, rho: float) -> str:
    return f"lambda{lambda_pal:g}_tau{tau_attn:g}_rho{rho:g}"


def sweep(base: RunConfig, points: Optional[Sequence[Tuple[float, float, float]]] = None,
          epochs: int = config.DEFAULT_EPOCHS, train_size: int = DEFAULT_TRAIN_SIZE,
          eval_size: int = DEFAULT_EVAL_SIZE, workers: int = 1) -> List[dict]:
    """
    Sensitivity of the full objective to the pooling hyperparameters.

    Every point trains CE + PAL + InfoNCE + OT on the same scenes with the
    same seed; only lambda_pal, tau_attn and rho change.

    Args:
        base: Shared configuration (alpha and beta come from the full variant)
        points: (lambda_pal, tau_attn, rho) settings (config.SWEEP_POINTS when None)
        epochs / train_size / eval_size / workers: as for run_ablation

    Returns:
        One summary per point, in the order given, with the point's values attached
    """
    points = [tuple(float(v) for v in p) for p in (points if points is not None else config.SWEEP_POINTS)]
    if not points:
        raise ValueError("sweep needs at least one (lambda, tau, rho) point")
    full = variant_config(base, "pal_infonce_ot")
    jobs = []
    for lambda_pal, tau_attn, rho in points:
        cfg = full.merged(lambda_pal=lambda_pal, tau_attn=tau_attn, rho=rho)
        jobs.append((cfg, sweep_label(lambda_pal, tau_attn, rho), epochs, train_size, eval_size))
    logger.info(f"Running sensitivity sweep over {len(points)} point(s) with {workers} worker(s)")
    summaries = []
    for (lambda_pal, tau_attn, rho), result in zip(points, _fan_out(jobs, workers)):
        summary = summarize(result)
        summary.update(lambda_pal=lambda_pal, tau_attn=tau_attn, rho=rho)
        summaries.append(summary)
    return summaries
