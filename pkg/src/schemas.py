"""
Output schemas for CLI commands

Each command's stdout document is a JSON object; SCHEMAS maps the command name
to its required keys and their accepted Python types.
"""

from numbers import Real
from typing import Any, Dict, Tuple

from src.errors import SchemaError


NUMBER = (Real,)
OPTIONAL_NUMBER = (Real, type(None))
OPTIONAL_STRING = (str, type(None))

COMMON: Dict[str, Tuple[type, ...]] = {
    "command": (str,),
    "seed": (int,),
}

SCHEMAS: Dict[str, Dict[str, Tuple[type, ...]]] = {
    "verify-pairs": {
        "threshold": NUMBER,
        "shards": (int,),
        "summary": (dict,),
        "outputs": (list,),
    },
    "build-prompts": {
        "count": (int,),
        "output": OPTIONAL_STRING,
        "prompts": (list,),
    },
    "merge-shards": {
        "summary": (dict,),
        "audit_inconsistencies": (int,),
        "output": OPTIONAL_STRING,
    },
    "train-toy": {
        "run_id": (str,),
        "steps": (int,),
        "final": (dict,),
        "alignment": (list,),
        "bleu": (dict,),
        "checkpoint": OPTIONAL_STRING,
    },
    "generate": {
        "captions": (list,),
    },
    "sinkhorn": {
        "cost": NUMBER,
        "plan": (list,),
        "row_residual": NUMBER,
        "column_residual": NUMBER,
        "marginal_residual": NUMBER,
        "iterations": (int,),
        "exact_cost": OPTIONAL_NUMBER,
    },
    "grad-check": {
        "parameter": (str,),
        "max_relative_error": NUMBER,
        "worst_index": (list,),
        "coordinates": (int,),
        "retention_margin": NUMBER,
        "terms": (dict,),
    },
    "diagnose": {
        "centroid_distance": NUMBER,
        "mmd": NUMBER,
        "centroid_distance_2d": NUMBER,
        "mmd_2d": NUMBER,
        "bandwidth": NUMBER,
        "bandwidth_2d": NUMBER,
    },
    "bleu": {
        "scores": (dict,),
        "segments": (int,),
    },
    "pal-eval": {
        "pal": NUMBER,
        "nce": NUMBER,
        "size": (int,),
    },
    "ablate": {
        "epochs": (int,),
        "variants": (dict,),
    },
    "sweep": {
        "epochs": (int,),
        "runs": (list,),
    },
}

ERROR_SCHEMA = {"type": (str,), "message": (str,)}


def _check_keys(data: Dict[str, Any], schema: Dict[str, Tuple[type, ...]], where: str) -> None:
    for key, types in schema.items():
        if key not in data:
            raise SchemaError(f"{where}: missing key '{key}'")
        value = data[key]
        # bool is an int subclass; only accept it where bool is listed
        if isinstance(value, bool) and bool not in types:
            raise SchemaError(f"{where}: '{key}' must not be a boolean")
        if not isinstance(value, types):
            raise SchemaError(f"{where}: '{key}' has type {type(value).__name__}")


def validate_output(command: str, data: Any) -> None:
    """
    Check a command's stdout document.

    Raises:
        SchemaError: unknown command, missing key or wrong type
    """
    if command not in SCHEMAS:
        raise SchemaError(f"No schema for command '{command}'")
    if not isinstance(data, dict):
        raise SchemaError(f"{command}: output must be a JSON object")
    _check_keys(data, COMMON, command)
    if data["command"] != command:
        raise SchemaError(f"{command}: output names command '{data['command']}'")
    _check_keys(data, SCHEMAS[command], command)


def validate_error(data: Any) -> None:
    """Check the {"error": {...}} document printed on failure"""
    if not isinstance(data, dict) or not isinstance(data.get("error"), dict):
        raise SchemaError("error output must be {'error': {...}}")
    _check_keys(data["error"], ERROR_SCHEMA, "error")
