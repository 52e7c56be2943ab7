"""
Result records and helper functions for the patchalign toolkit
"""

from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional
import json
import os

import numpy as np


@dataclass
class LossBreakdown:
    """Per-term values of the joint objective for one step"""
    ce: float
    pal: float
    nce: float
    ot: float
    total: float
    synthetic_present: bool
    tape: Optional[Any] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "ce": self.ce,
            "pal": self.pal,
            "nce": self.nce,
            "ot": self.ot,
            "total": self.total,
            "synthetic_present": self.synthetic_present
        }


@dataclass
class StepRecord:
    """One optimiser step of a training run"""
    step: int
    lr: float
    grad_norm: float
    unfreeze_stage: int
    losses: LossBreakdown

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "lr": self.lr,
            "grad_norm": self.grad_norm,
            "unfreeze_stage": self.unfreeze_stage,
            **self.losses.to_dict()
        }


@dataclass
class AlignmentSnapshot:
    """Real/synthetic alignment of pooled descriptors at one point of training"""
    step: int
    centroid_distance: float
    mmd: float
    centroid_distance_2d: float
    mmd_2d: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "centroid_distance": self.centroid_distance,
            "mmd": self.mmd,
            "centroid_distance_2d": self.centroid_distance_2d,
            "mmd_2d": self.mmd_2d
        }


@dataclass
class TrainingResult:
    """Complete outcome of a training run"""
    run_id: str
    variant: str
    seed: int
    epochs: int
    history: List[StepRecord]
    alignment: List[AlignmentSnapshot] = field(default_factory=list)
    bleu: Dict[str, float] = field(default_factory=dict)
    timestamp: Optional[datetime] = None

    @property
    def final(self) -> Optional[StepRecord]:
        return self.history[-1] if self.history else None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "variant": self.variant,
            "seed": self.seed,
            "epochs": self.epochs,
            "steps": len(self.history),
            "final": self.final.to_dict() if self.final else None,
            "history": [record.to_dict() for record in self.history],
            "alignment": [snap.to_dict() for snap in self.alignment],
            "bleu": self.bleu
        }


def to_jsonable(value):
    """Convert numpy scalars and arrays into plain JSON types"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def dumps_json(data) -> str:
    """Deterministic JSON text (sorted keys)"""
    return json.dumps(to_jsonable(data), indent=2, sort_keys=True)


def save_json(data: dict, filepath: str) -> None:
    """Save data to JSON file"""
    directory = os.path.dirname(filepath)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(filepath, 'w', encoding='utf-8') as f:
        f.write(dumps_json(data))


def load_json(filepath: str) -> dict:
    """Load data from JSON file"""
    with open(filepath, 'r', encoding='utf-8') as f:
        return json.load(f)


def generate_run_id(variant: str, seed: int, epochs: int) -> str:
    """Deterministic run ID"""
    return f"{variant}_seed{seed}_ep{epochs}"
