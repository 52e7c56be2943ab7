"""
Main entry point for the patchalign toolkit

Every subcommand prints exactly one JSON document on stdout; logs go to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

from scipy.special import softmax

from src import config
from src.attnpool import aggregate_attention, retention_margin
from src.datapipe import (
    audit_records, build_prompt_sidecars, merge_shards, verify_shard_files,
)
from src.diagnostics import EmbeddingSet, alignment_report, bleu_n
from src.errors import PatchAlignError, UsageError, error_payload
from src.losses import infonce, pal_loss_batch
from src.numio import RunConfig, load_array, read_records, write_records
from src.objective import VARIANTS, grad_check, parameter_function, pooled_pairs, term_grad_checks
from src.ot import lp_oracle, sinkhorn
from src.results_manager import ResultsManager, load_checkpoint, save_checkpoint
from src.scenes import decode_caption
from src.schemas import validate_output
from src.toycap import ToyModel, collate, forward, generate
from src.training_manager import (
    DEFAULT_EVAL_SIZE, DEFAULT_TRAIN_SIZE, TrainingManager, build_dataset, run_ablation, sweep,
    sweep_grid,
)
from src.utils import dumps_json


logger = logging.getLogger("patchalign")


def setup_logging(verbose: bool = False, log_file: str = None):
    """
    Setup logging configuration.

    Console output goes to stderr so stdout stays machine-readable. The
    PATCHALIGN_LOG_LEVEL environment variable overrides the default level.

    Args:
        verbose: Enable debug logging
        log_file: Optional log file path
    """
    log_level = logging.DEBUG if verbose else logging.INFO
    env_level = os.environ.get(config.LOG_LEVEL_ENV)
    if env_level and not verbose:
        log_level = getattr(logging, env_level.upper(), log_level)

    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    simple_formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s'
    )

    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        if getattr(handler, "_patchalign", False):
            root_logger.removeHandler(handler)
            handler.close()
    root_logger.setLevel(min(log_level, logging.DEBUG) if log_file else log_level)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(simple_formatter)
    console_handler._patchalign = True
    root_logger.addHandler(console_handler)

    if log_file:
        directory = os.path.dirname(log_file)
        if directory:
            os.makedirs(directory, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(detailed_formatter)
        file_handler._patchalign = True
        root_logger.addHandler(file_handler)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class JsonArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of printing and exiting"""

    def error(self, message):
        raise UsageError(message)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _add_run_config_flags(parser: argparse.ArgumentParser) -> None:
    """One --flag per RunConfig field (seed comes from the common flags)"""
    group = parser.add_argument_group("run configuration")
    for f in fields(RunConfig):
        if f.name == "seed":
            continue
        kind = type(f.default)
        parse = _parse_bool if kind is bool else kind
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=parse, default=None,
                           help=f"(default {f.default})")


def build_parser() -> JsonArgumentParser:
    common = JsonArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='Random seed (default from config)')
    common.add_argument('--config', help='RunConfig JSON file; explicit flags win')
    common.add_argument('--verbose', action='store_true', help='Enable debug logging')
    common.add_argument('--log-file', help='Log file path')

    parser = JsonArgumentParser(description="Patch-alignment grounding toolkit")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('verify-pairs', parents=[common], help='Verify caption translations')
    p.add_argument('--records', nargs='+', required=True, help='Record shards (CSV/JSONL)')
    p.add_argument('--embeddings', nargs='+', required=True, help='Embedding tensor per shard')
    p.add_argument('--threshold', type=float, default=config.VERIFY_THRESHOLD)
    p.add_argument('--output-dir', help='Write annotated shards here')
    p.add_argument('--workers', type=int, default=config.SHARD_WORKERS)

    p = sub.add_parser('build-prompts', parents=[common], help='Prompts and sidecars for accepted pairs')
    p.add_argument('--records', required=True, help='Verified record file')
    p.add_argument('--versions', nargs='*', default=[], help='model=version entries')
    p.add_argument('--output', help='Write sidecars as JSONL')

    p = sub.add_parser('merge-shards', parents=[common], help='Merge verified shards')
    p.add_argument('--shards', nargs='+', required=True)
    p.add_argument('--output', help='Merged record file (CSV/JSONL by suffix)')
    p.add_argument('--threshold', type=float, default=config.VERIFY_THRESHOLD)

    p = sub.add_parser('train-toy', parents=[common], help='Train the toy captioner')
    p.add_argument('--epochs', type=int, default=config.DEFAULT_EPOCHS)
    p.add_argument('--train-size', type=int, default=DEFAULT_TRAIN_SIZE)
    p.add_argument('--eval-size', type=int, default=DEFAULT_EVAL_SIZE)
    p.add_argument('--output-dir', help='Save result tables and checkpoint here')
    _add_run_config_flags(p)

    p = sub.add_parser('generate', parents=[common], help='Caption images')
    p.add_argument('--checkpoint', help='Checkpoint directory (untrained model when omitted)')
    p.add_argument('--patches', help='Tensor of S x P or N x S x P patch pixels')
    p.add_argument('--count', type=int, default=4, help='Procedural scenes when --patches is omitted')
    _add_run_config_flags(p)

    p = sub.add_parser('sinkhorn', parents=[common], help='Entropic transport between two marginals')
    p.add_argument('--cost', required=True)
    p.add_argument('--a', required=True)
    p.add_argument('--b', required=True)
    p.add_argument('--eps', type=float, default=config.OT_EPS)
    p.add_argument('--iters', type=int, default=config.OT_ITERS)
    p.add_argument('--tol', type=float, default=None, help='Stop once the residual is below this')
    p.add_argument('--exact', action='store_true', help='Also compute the exact transport cost')

    p = sub.add_parser('grad-check', parents=[common], help='Finite-difference check of the joint loss')
    p.add_argument('--parameter', default='bridge.bias')
    p.add_argument('--samples', type=int, default=2, help='Procedural scenes in the checked batch')
    p.add_argument('--h', type=float, default=1e-5)
    _add_run_config_flags(p)

    p = sub.add_parser('diagnose', parents=[common], help='Alignment of two embedding sets')
    p.add_argument('--real', required=True, help='N x D tensor')
    p.add_argument('--synthetic', required=True, help='M x D tensor')
    p.add_argument('--bandwidth', type=float, default=None)

    p = sub.add_parser('bleu', parents=[common], help='Corpus BLEU-1..n')
    p.add_argument('--candidates', required=True, help='JSONL of strings or token lists')
    p.add_argument('--references', required=True, help='JSONL of strings or token lists')
    p.add_argument('--max-n', type=int, default=config.MAX_BLEU_ORDER)

    p = sub.add_parser('pal-eval', parents=[common], help='PAL and InfoNCE on procedural pairs')
    p.add_argument('--checkpoint', help='Checkpoint directory (untrained model when omitted)')
    p.add_argument('--count', type=int, default=DEFAULT_EVAL_SIZE)
    _add_run_config_flags(p)

    p = sub.add_parser('ablate', parents=[common], help='Train every loss variant with matched seeds')
    p.add_argument('--variants', nargs='*', choices=sorted(VARIANTS), default=None)
    p.add_argument('--epochs', type=int, default=config.DEFAULT_EPOCHS)
    p.add_argument('--train-size', type=int, default=DEFAULT_TRAIN_SIZE)
    p.add_argument('--eval-size', type=int, default=DEFAULT_EVAL_SIZE)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--output-dir', help='Save ablation tables here')
    _add_run_config_flags(p)

    p = sub.add_parser('sweep', parents=[common], help='Sensitivity of the full objective to lambda, tau and rho')
    p.add_argument('--lambdas', nargs='+', type=float, help='lambda_pal values (grid mode)')
    p.add_argument('--taus', nargs='+', type=float, help='tau_attn values (grid mode)')
    p.add_argument('--rhos', nargs='+', type=float, help='rho values (grid mode)')
    p.add_argument('--epochs', type=int, default=config.DEFAULT_EPOCHS)
    p.add_argument('--train-size', type=int, default=DEFAULT_TRAIN_SIZE)
    p.add_argument('--eval-size', type=int, default=DEFAULT_EVAL_SIZE)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--output-dir', help='Save sweep tables here')
    _add_run_config_flags(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file merged under explicit flags"""
    base = RunConfig.from_json_file(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)}
    return base.merged(**overrides)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_verify_pairs(args, cfg: RunConfig) -> dict:
    shards = verify_shard_files(args.records, args.embeddings, args.threshold, args.workers)
    outputs = []
    if args.output_dir:
        os.makedirs(args.output_dir, exist_ok=True)
        for path, records in zip(args.records, shards):
            target = os.path.join(args.output_dir, Path(path).name)
            write_records(target, records)
            outputs.append(target)
    return {
        "threshold": args.threshold,
        "shards": len(shards),
        "summary": {
            "total": sum(len(s) for s in shards),
            "accepted": sum(1 for s in shards for r in s if r.valid is True),
            "rejected": sum(1 for s in shards for r in s if r.valid is False),
            "unverified": sum(1 for s in shards for r in s if r.valid is None),
        },
        "outputs": outputs,
    }


def cmd_build_prompts(args, cfg: RunConfig) -> dict:
    versions = {}
    for entry in args.versions:
        if "=" not in entry:
            raise UsageError(f"--versions entries must look like model=version, got {entry!r}")
        key, value = entry.split("=", 1)
        versions[key] = value
    prompts = build_prompt_sidecars(read_records(args.records), versions, cfg.seed)
    if args.output:
        directory = os.path.dirname(args.output)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(args.output, 'w', encoding='utf-8') as f:
            for entry in prompts:
                f.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")
    return {"count": len(prompts), "output": args.output, "prompts": prompts}


def cmd_merge_shards(args, cfg: RunConfig) -> dict:
    merged, summary = merge_shards(args.shards)
    if args.output:
        write_records(args.output, merged)
    return {
        "summary": summary.to_dict(),
        "audit_inconsistencies": audit_records(merged, args.threshold),
        "output": args.output,
    }


def cmd_train_toy(args, cfg: RunConfig) -> dict:
    dataset = build_dataset(args.train_size, cfg.seed)
    manager = TrainingManager(cfg, "custom", build_dataset(args.eval_size, cfg.seed + 1))
    result = manager.train(dataset, args.epochs)
    checkpoint = None
    if args.output_dir:
        results_manager = ResultsManager(args.output_dir)
        run_dir = results_manager.save_training_result(result)
        checkpoint = str(save_checkpoint(manager.model, os.path.join(run_dir, "checkpoint"), cfg,
                                         len(result.history)))
    return {
        "run_id": result.run_id,
        "steps": len(result.history),
        "final": result.final.to_dict() if result.final else {},
        "alignment": [snap.to_dict() for snap in result.alignment],
        "bleu": result.bleu,
        "checkpoint": checkpoint,
    }


def _load_model(args, cfg: RunConfig) -> ToyModel:
    if getattr(args, "checkpoint", None):
        model, _, _ = load_checkpoint(args.checkpoint)
        return model
    return ToyModel(seed=cfg.seed)


def cmd_generate(args, cfg: RunConfig) -> dict:
    model = _load_model(args, cfg)
    references: List[Optional[List[str]]]
    if args.patches:
        patches = load_array(args.patches)
        images = patches[None] if patches.ndim == 2 else patches
        references = [None] * len(images)
    else:
        samples = build_dataset(args.count, cfg.seed + 1)
        images = [s.real_patches for s in samples]
        references = [s.scene.caption_words() for s in samples]
    captions = []
    for index, (image, reference) in enumerate(zip(images, references)):
        ids = generate(model, image, cfg.max_len, cfg.beams, cfg.no_repeat_ngram, cfg.length_penalty)
        captions.append({
            "index": index,
            "tokens": [int(i) for i in ids],
            "text": " ".join(decode_caption(ids)),
            "reference": " ".join(reference) if reference else None,
        })
    return {"captions": captions}


def cmd_sinkhorn(args, cfg: RunConfig) -> dict:
    c, a, b = load_array(args.cost), load_array(args.a), load_array(args.b)
    plan, cost = sinkhorn(c, a, b, args.eps, args.iters, args.tol)
    exact = lp_oracle(c, a, b)[1] if args.exact else None
    return {
        "cost": cost,
        "plan": plan.p.tolist(),
        "row_residual": plan.row_residual(),
        "column_residual": plan.column_residual(),
        "marginal_residual": plan.marginal_residual(),
        "iterations": plan.iterations,
        "exact_cost": exact,
    }


def cmd_grad_check(args, cfg: RunConfig) -> dict:
    model = ToyModel(seed=cfg.seed)
    batch = collate(build_dataset(args.samples, cfg.seed))
    out = forward(model, batch)
    margin = min(
        retention_margin(softmax(aggregate_attention(stack, cfg.last_k) / cfg.tau_attn), cfg.rho)
        for stack in out.real_attention + out.syn_attention
    )
    if margin < 1e-4:
        logger.warning(f"Retention margin {margin:.2e} is small; finite differences may cross a boundary")
    result = grad_check(parameter_function(model, batch, cfg, args.parameter),
                        model.params[args.parameter], args.h)
    terms = term_grad_checks(model, batch, cfg, args.parameter, args.h)
    for term, check in terms.items():
        logger.info(f"{term}: max relative error {check.max_relative_error:.2e}")
    return {
        "parameter": args.parameter,
        "retention_margin": margin,
        **result.to_dict(),
        "terms": {term: check.max_relative_error for term, check in terms.items()},
    }


def cmd_diagnose(args, cfg: RunConfig) -> dict:
    real = EmbeddingSet(load_array(args.real), "real")
    syn = EmbeddingSet(load_array(args.synthetic), "synthetic")
    return alignment_report(real, syn, args.bandwidth)


def _read_token_lines(path: str) -> List[List[str]]:
    lines = []
    with open(path, 'r', encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                value = json.loads(line)
            except json.JSONDecodeError as e:
                raise UsageError(f"{path} line {number}: {e}") from e
            lines.append(value.split() if isinstance(value, str) else [str(t) for t in value])
    return lines


def cmd_bleu(args, cfg: RunConfig) -> dict:
    candidates = _read_token_lines(args.candidates)
    references = _read_token_lines(args.references)
    return {"scores": bleu_n(candidates, references, args.max_n), "segments": len(candidates)}


def cmd_pal_eval(args, cfg: RunConfig) -> dict:
    model = _load_model(args, cfg)
    pairs = pooled_pairs(model, collate(build_dataset(args.count, cfg.seed + 1)), cfg)
    report = alignment_report(pairs.r, pairs.r_syn)
    return {
        "pal": pal_loss_batch(pairs),
        "nce": infonce(pairs, cfg.nce_temp),
        "size": pairs.size,
        "centroid_distance": report["centroid_distance"],
        "mmd": report["mmd"],
    }


def cmd_ablate(args, cfg: RunConfig) -> dict:
    summaries = run_ablation(cfg, args.variants, args.epochs, args.train_size, args.eval_size, args.workers)
    if args.output_dir:
        ResultsManager(args.output_dir).save_ablation(summaries)
    return {"epochs": args.epochs, "variants": summaries}


def cmd_sweep(args, cfg: RunConfig) -> dict:
    points = None
    if args.lambdas or args.taus or args.rhos:
        points = sweep_grid(args.lambdas or [cfg.lambda_pal], args.taus or [cfg.tau_attn],
                            args.rhos or [cfg.rho])
    summaries = sweep(cfg, points, args.epochs, args.train_size, args.eval_size, args.workers)
    if args.output_dir:
        ResultsManager(args.output_dir).save_sweep(summaries)
    return {"epochs": args.epochs, "runs": summaries}


COMMANDS = {
    'verify-pairs': cmd_verify_pairs,
    'build-prompts': cmd_build_prompts,
    'merge-shards': cmd_merge_shards,
    'train-toy': cmd_train_toy,
    'generate': cmd_generate,
    'sinkhorn': cmd_sinkhorn,
    'grad-check': cmd_grad_check,
    'diagnose': cmd_diagnose,
    'bleu': cmd_bleu,
    'pal-eval': cmd_pal_eval,
    'ablate': cmd_ablate,
    'sweep': cmd_sweep,
}


def run(argv: Optional[List[str]] = None) -> Dict:
    """Parse, execute and validate one command; returns the stdout document"""
    args = build_parser().parse_args(argv)
    setup_logging(verbose=args.verbose, log_file=args.log_file)
    cfg = resolve_config(args)
    if args.seed is not None:
        cfg = cfg.merged(seed=args.seed)
    logger.info(f"Running {args.command} (seed {cfg.seed})")
    payload = {"command": args.command, "seed": cfg.seed, **COMMANDS[args.command](args, cfg)}
    payload = json.loads(dumps_json(payload))
    validate_output(args.command, payload)
    return payload


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    try:
        payload = run(argv)
    except PatchAlignError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(dumps_json(error_payload(e)))
        return e.exit_code
    except (OSError, ValueError, KeyError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(dumps_json(error_payload(e)))
        return 1
    print(dumps_json(payload))
    return 0


if __name__ == '__main__':
    sys.exit(main())
