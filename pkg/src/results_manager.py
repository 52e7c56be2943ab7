"""
Results Manager for the patchalign toolkit
Writes training histories, ablation tables and model checkpoints
"""

import os
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd

from src.config import RESULTS_DIR
from src.errors import TensorFormatError
from src.numio import RunConfig, load_array, write_tensor
from src.toycap import ToyModel
from src.utils import TrainingResult, load_json, save_json


logger = logging.getLogger(__name__)

CHECKPOINT_MANIFEST = "manifest.json"


class ResultsManager:
    """
    Stores run artifacts under one output directory.

    Layout:
        <output_dir>/<run_id>/result.json      full TrainingResult
        <output_dir>/<run_id>/history.csv      one row per optimiser step
        <output_dir>/<run_id>/alignment.csv    one row per alignment snapshot
        <output_dir>/<run_id>/checkpoint/      tensors + manifest.json
        <output_dir>/ablation.json / .csv      ablation summaries
        <output_dir>/sweep.json / .csv         sensitivity sweep summaries
    """

    def __init__(self, output_dir: str = None):
        """
        Initialize results manager.

        Args:
            output_dir: Base directory for results (default from config)
        """
        self.output_dir = output_dir if output_dir else RESULTS_DIR
        os.makedirs(self.output_dir, exist_ok=True)

    def run_dir(self, run_id: str) -> str:
        path = os.path.join(self.output_dir, run_id)
        os.makedirs(path, exist_ok=True)
        return path

    def save_training_result(self, result: TrainingResult) -> str:
        """
        Save a training run as JSON plus per-step and per-snapshot CSV tables.

        Returns:
            Run directory
        """
        run_dir = self.run_dir(result.run_id)
        save_json(result.to_dict(), os.path.join(run_dir, "result.json"))

        history = pd.DataFrame([record.to_dict() for record in result.history])
        history.to_csv(os.path.join(run_dir, "history.csv"), index=False)
        alignment = pd.DataFrame([snap.to_dict() for snap in result.alignment])
        alignment.to_csv(os.path.join(run_dir, "alignment.csv"), index=False)
        logger.info(f"Saved training result {result.run_id} to {run_dir}")
        return run_dir

    def save_ablation(self, summaries: Dict[str, dict]) -> str:
        """Save ablation summaries as JSON and a flat CSV table (one row per variant)"""
        save_json(summaries, os.path.join(self.output_dir, "ablation.json"))
        rows = []
        for variant, summary in summaries.items():
            row = {key: value for key, value in summary.items() if not isinstance(value, dict)}
            row.update({f"final_{k}": v for k, v in (summary.get("final") or {}).items()})
            row.update(summary.get("bleu", {}))
            row["variant"] = variant
            rows.append(row)
        path = os.path.join(self.output_dir, "ablation.csv")
        pd.DataFrame(rows).to_csv(path, index=False)
        logger.info(f"Saved ablation table to {path}")
        return path

    def save_sweep(self, summaries: List[dict]) -> str:
        """Save sensitivity-sweep summaries as JSON and a CSV with one row per point"""
        save_json(summaries, os.path.join(self.output_dir, "sweep.json"))
        rows = []
        for summary in summaries:
            row = {key: value for key, value in summary.items() if not isinstance(value, dict)}
            row.update(summary.get("bleu", {}))
            rows.append(row)
        columns = ["lambda_pal", "tau_attn", "rho"]
        table = pd.DataFrame(rows)
        table = table[columns + [c for c in table.columns if c not in columns]]
        path = os.path.join(self.output_dir, "sweep.csv")
        table.to_csv(path, index=False)
        logger.info(f"Saved sweep table to {path}")
        return path


def save_checkpoint(model: ToyModel, directory: Union[str, Path], cfg: RunConfig,
                    step: int) -> Path:
    """
    Write every trainable parameter as a tensor file plus a JSON manifest
    holding the run config, model shape, step and seed.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, value in sorted(model.params.items()):
        filename = f"{name}.tnsr"
        write_tensor(directory / filename, value)
        files[name] = filename
    manifest = {
        "config": cfg.to_dict(),
        "model": model.config_dict(),
        "step": step,
        "seed": cfg.seed,
        "parameters": files,
    }
    save_json(manifest, str(directory / CHECKPOINT_MANIFEST))
    logger.info(f"Saved checkpoint ({len(files)} tensors) to {directory}")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Tuple[ToyModel, RunConfig, dict]:
    """
    Rebuild a ToyModel from a checkpoint directory.

    The frozen encoder is regenerated from the recorded seed.

    Returns:
        (model, run config, manifest)
    """
    directory = Path(directory)
    manifest = load_json(str(directory / CHECKPOINT_MANIFEST))
    model = ToyModel(**manifest["model"])
    for name, filename in manifest["parameters"].items():
        if name not in model.params:
            raise TensorFormatError(f"checkpoint parameter {name} is unknown to the model")
        value = load_array(directory / filename)
        if value.shape != model.params[name].shape:
            raise TensorFormatError(
                f"checkpoint parameter {name} has shape {value.shape}, expected {model.params[name].shape}"
            )
        model.params[name] = value.astype("float64")
    missing = sorted(set(model.params) - set(manifest["parameters"]))
    if missing:
        raise TensorFormatError(f"checkpoint is missing parameters {missing}")
    return model, RunConfig.from_dict(manifest["config"]), manifest
