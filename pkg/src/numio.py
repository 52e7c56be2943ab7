"""
Numeric I/O for the patchalign toolkit
Tensor container, caption-pair records and run configuration
"""

import json
import logging
import math
import re
import struct
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src import config
from src.errors import ConfigError, RecordFormatError, TensorFormatError


logger = logging.getLogger(__name__)


TENSOR_MAGIC = b"PATCHTNS"
DTYPE_TAGS = {"float64": 0, "float32": 1, "int64": 2}
TAG_DTYPES = {tag: name for name, tag in DTYPE_TAGS.items()}
_LE_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TensorFile:
    """
    A shaped, typed, row-major payload.

    Attributes:
        shape: dimensions (empty tuple for a scalar)
        dtype: one of float64, float32, int64
        payload: flat values in row-major order
    """
    shape: Tuple[int, ...]
    dtype: str
    payload: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPE_TAGS:
            raise TensorFormatError(f"Unsupported dtype {self.dtype!r}")
        if any(int(d) < 1 for d in self.shape):
            raise TensorFormatError(f"Shape dimensions must be positive, got {list(self.shape)}")
        expected = int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1
        if np.ndim(self.payload) != 1 or len(self.payload) != expected:
            raise TensorFormatError(
                f"Payload length {np.size(self.payload)} does not match shape {list(self.shape)}"
            )

    @property
    def rank(self) -> int:
        return len(self.shape)

    @classmethod
    def from_array(cls, array) -> "TensorFile":
        array = np.asarray(array)
        if array.dtype == np.float64:
            dtype = "float64"
        elif array.dtype == np.float32:
            dtype = "float32"
        elif np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
            dtype = "int64"
        else:
            raise TensorFormatError(f"Cannot store arrays of dtype {array.dtype}")
        flat = np.ascontiguousarray(array, dtype=np.dtype(dtype)).reshape(-1)
        return cls(shape=tuple(int(d) for d in array.shape), dtype=dtype, payload=flat)

    def to_array(self) -> np.ndarray:
        return np.asarray(self.payload, dtype=np.dtype(self.dtype)).reshape(self.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorFile):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and np.asarray(self.payload).tobytes() == np.asarray(other.payload).tobytes()
        )


def write_tensor(path: Union[str, Path], t: Union[TensorFile, np.ndarray]) -> None:
    """
    Write a tensor in the little-endian container format.

    Layout: 8-byte magic, uint32 rank, rank x uint64 dims, uint8 dtype tag, payload.

    Args:
        path: Destination file
        t: TensorFile or numpy array
    """
    if not isinstance(t, TensorFile):
        t = TensorFile.from_array(t)
    payload = np.asarray(t.payload, dtype=_LE_DTYPES[t.dtype])
    header = TENSOR_MAGIC + struct.pack("<I", t.rank)
    header += struct.pack(f"<{t.rank}Q", *t.shape) if t.rank else b""
    header += struct.pack("<B", DTYPE_TAGS[t.dtype])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())
    logger.debug(f"Wrote tensor {list(t.shape)} {t.dtype} to {path}")


def read_tensor(path: Union[str, Path]) -> TensorFile:
    """
    Read a tensor written by write_tensor.

    Raises:
        TensorFormatError: bad magic, unknown dtype tag or truncated payload
    """
    data = Path(path).read_bytes()
    if data[:8] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: not a tensor file (bad magic)")
    offset = 8
    try:
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", data, offset) if rank else ()
        offset += 8 * rank
        (tag,) = struct.unpack_from("<B", data, offset)
        offset += 1
    except struct.error as e:
        raise TensorFormatError(f"{path}: truncated header") from e

    if tag not in TAG_DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype tag {tag}")
    dtype = TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    itemsize = np.dtype(_LE_DTYPES[dtype]).itemsize
    if len(data) - offset != count * itemsize:
        raise TensorFormatError(
            f"{path}: payload has {len(data) - offset} bytes, shape {list(shape)} needs {count * itemsize}"
        )
    payload = np.frombuffer(data, dtype=_LE_DTYPES[dtype], count=count, offset=offset)
    return TensorFile(shape=tuple(int(d) for d in shape), dtype=dtype,
                      payload=payload.astype(np.dtype(dtype)))


def load_array(path: Union[str, Path]) -> np.ndarray:
    """Read a tensor file straight into a numpy array"""
    return read_tensor(path).to_array()


def write_embeddings(path: Union[str, Path], caption_ids, emb_en, emb_bn) -> None:
    """
    Store one shard of precomputed sentence embeddings.

    Row i is [caption_id, emb_en (E values), emb_bn (E values)] as float64.
    """
    ids = np.asarray(caption_ids, dtype=np.float64).reshape(-1, 1)
    emb_en = np.asarray(emb_en, dtype=np.float64)
    emb_bn = np.asarray(emb_bn, dtype=np.float64)
    if emb_en.shape != emb_bn.shape or emb_en.shape[0] != ids.shape[0]:
        raise TensorFormatError(
            f"Embedding shapes disagree: ids {ids.shape[0]}, en {emb_en.shape}, bn {emb_bn.shape}"
        )
    write_tensor(path, np.hstack([ids, emb_en, emb_bn]))


def read_embeddings(path: Union[str, Path]) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Load a shard written by write_embeddings, keyed by caption_id"""
    table = load_array(path)
    if table.ndim != 2 or table.shape[1] < 3 or (table.shape[1] - 1) % 2:
        raise TensorFormatError(f"{path}: embedding table has shape {list(table.shape)}")
    dim = (table.shape[1] - 1) // 2
    return {
        int(row[0]): (row[1:1 + dim].copy(), row[1 + dim:].copy())
        for row in table
    }


# ---------------------------------------------------------------------------
# Caption-pair records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaptionPairRecord:
    """One EN-BN caption pair, optionally verified"""
    caption_id: int
    image_id: int
    text_en: str
    text_bn: str
    similarity: Optional[float] = None
    valid: Optional[bool] = None

    def __post_init__(self):
        if (self.similarity is None) != (self.valid is None):
            raise ValueError("valid must be present exactly when similarity is present")

    def to_dict(self) -> dict:
        return asdict(self)

    def same_text(self, other: "CaptionPairRecord") -> bool:
        return (
            self.image_id == other.image_id
            and self.text_en == other.text_en
            and self.text_bn == other.text_bn
        )


_REQUIRED_FIELDS = config.RECORD_FIELDS[:4]
_TRUE = {"true", "1"}
_FALSE = {"false", "0"}


def _parse_int(value, name: str, line: int) -> int:
    if isinstance(value, bool):
        raise RecordFormatError(f"{name} must be an integer, got {value!r}", line)
    if isinstance(value, int):
        return value
    if isinstance(value, str) and re.fullmatch(r"[+-]?\d+", value.strip()):
        return int(value)
    raise RecordFormatError(f"{name} must be an integer, got {value!r}", line)


def _parse_similarity(value, line: int) -> Optional[float]:
    if value is None or value == "":
        return None
    if isinstance(value, bool):
        raise RecordFormatError(f"similarity must be a number, got {value!r}", line)
    try:
        s = float(value)
    except (TypeError, ValueError):
        raise RecordFormatError(f"similarity must be a number, got {value!r}", line)
    if not math.isfinite(s) or not (-1.0 - 1e-9 <= s <= 1.0 + 1e-9):
        raise RecordFormatError(f"similarity {s} outside [-1, 1]", line)
    return s


def _parse_valid(value, line: int) -> Optional[bool]:
    if value is None or value == "":
        return None
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
    raise RecordFormatError(f"valid must be a boolean, got {value!r}", line)


def _build_record(row: dict, line: int) -> CaptionPairRecord:
    for name in _REQUIRED_FIELDS:
        if name not in row:
            raise RecordFormatError(f"missing field {name!r}", line)
    for name in ("text_en", "text_bn"):
        if not isinstance(row[name], str):
            raise RecordFormatError(f"{name} must be a string", line)

    similarity = _parse_similarity(row.get("similarity"), line)
    valid = _parse_valid(row.get("valid"), line)
    if (similarity is None) != (valid is None):
        raise RecordFormatError("similarity and valid must be present together", line)

    return CaptionPairRecord(
        caption_id=_parse_int(row["caption_id"], "caption_id", line),
        image_id=_parse_int(row["image_id"], "image_id", line),
        text_en=row["text_en"],
        text_bn=row["text_bn"],
        similarity=similarity,
        valid=valid,
    )


def _read_csv_records(path: Path) -> List[CaptionPairRecord]:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise RecordFormatError("missing header row", 1) from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise RecordFormatError(str(e), int(match.group(1)) if match else None) from e

    columns = list(df.columns)
    unknown = [c for c in columns if c not in config.RECORD_FIELDS]
    if unknown:
        raise RecordFormatError(f"unknown columns {unknown}", 1)
    missing = [c for c in _REQUIRED_FIELDS if c not in columns]
    if missing:
        raise RecordFormatError(f"header lacks columns {missing}", 1)

    records = []
    for index, row in enumerate(df.to_dict(orient="records")):
        records.append(_build_record(row, line=index + 2))
    return records


def _read_jsonl_records(path: Path) -> List[CaptionPairRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordFormatError(f"invalid JSON: {e.msg}", line_number) from e
            if not isinstance(row, dict):
                raise RecordFormatError("record must be a JSON object", line_number)
            unknown = [k for k in row if k not in config.RECORD_FIELDS]
            if unknown:
                raise RecordFormatError(f"unknown fields {unknown}", line_number)
            records.append(_build_record(row, line_number))
    return records


def infer_format(path: Union[str, Path]) -> str:
    """Record format from file suffix"""
    return "jsonl" if Path(path).suffix.lower() in (".jsonl", ".json") else "csv"


def read_records(path: Union[str, Path], format: Optional[str] = None) -> List[CaptionPairRecord]:
    """
    Parse caption-pair records in file order.

    Args:
        path: CSV or JSONL file
        format: "csv" or "jsonl" (inferred from suffix if omitted)

    Returns:
        List of CaptionPairRecord

    Raises:
        RecordFormatError: malformed row, naming its line number
    """
    path = Path(path)
    format = format or infer_format(path)
    if format == "csv":
        records = _read_csv_records(path)
    elif format == "jsonl":
        records = _read_jsonl_records(path)
    else:
        raise RecordFormatError(f"unknown record format {format!r}")
    logger.debug(f"Read {len(records)} records from {path}")
    return records


def _csv_cells(record: CaptionPairRecord) -> dict:
    return {
        "caption_id": str(record.caption_id),
        "image_id": str(record.image_id),
        "text_en": record.text_en,
        "text_bn": record.text_bn,
        "similarity": "" if record.similarity is None else repr(float(record.similarity)),
        "valid": "" if record.valid is None else ("true" if record.valid else "false"),
    }


def write_records(path: Union[str, Path], records: List[CaptionPairRecord],
                  format: Optional[str] = None) -> None:
    """Write records as CSV (header + UTF-8) or JSONL"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    format = format or infer_format(path)
    if format == "csv":
        df = pd.DataFrame([_csv_cells(r) for r in records], columns=list(config.RECORD_FIELDS))
        df.to_csv(path, index=False, encoding="utf-8")
    elif format == "jsonl":
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
    else:
        raise RecordFormatError(f"unknown record format {format!r}")
    logger.debug(f"Wrote {len(records)} records to {path}")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """
    Hyperparameters for the joint objective and the toy training protocol.

    Defaults follow src.config; from_dict rejects unknown keys.
    """
    lambda_pal: float = config.LAMBDA_PAL
    alpha: float = config.ALPHA_NCE
    beta: float = config.BETA_OT
    tau_attn: float = config.TAU_ATTN
    rho: float = config.RHO
    last_k: int = config.LAST_K
    nce_temp: float = config.NCE_TEMP
    ot_eps: float = config.OT_EPS
    ot_iters: int = config.OT_ITERS
    seed: int = config.DEFAULT_SEED
    retention_mode: str = config.DEFAULT_RETENTION_MODE
    detach_weights: bool = False
    ce_on_synthetic: bool = False
    batch_size: int = config.BATCH_SIZE
    peak_lr: float = config.PEAK_LR
    final_lr: float = config.FINAL_LR
    warmup_frac: float = config.WARMUP_FRAC
    weight_decay: float = config.WEIGHT_DECAY
    clip_norm: float = config.CLIP_NORM
    accumulation_steps: int = config.ACCUMULATION_STEPS
    progressive_unfreeze: bool = False
    max_len: int = config.MAX_CAPTION_LEN
    beams: int = config.BEAMS
    no_repeat_ngram: int = config.NO_REPEAT_NGRAM
    length_penalty: float = config.LENGTH_PENALTY

    def __post_init__(self):
        for name in ("lambda_pal", "alpha", "beta", "weight_decay", "final_lr"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("tau_attn", "nce_temp", "ot_eps", "peak_lr", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("last_k", "ot_iters", "batch_size", "accumulation_steps", "max_len", "beams"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not 0 < self.rho <= 1:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.retention_mode not in config.RETENTION_MODES:
            raise ConfigError(f"retention_mode must be one of {config.RETENTION_MODES}")
        if self.no_repeat_ngram < 0:
            raise ConfigError("no_repeat_ngram must be nonnegative")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must be a JSON object")
        return cls.from_dict(data)

    def merged(self, **overrides) -> "RunConfig":
        """Copy with explicit (non-None) overrides applied"""
        updates = {k: v for k, v in overrides.items() if v is not None}
        return self.from_dict({**self.to_dict(), **updates}) if updates else self

    def with_weights(self, lambda_pal: float, alpha: float, beta: float) -> "RunConfig":
        return replace(self, lambda_pal=lambda_pal, alpha=alpha, beta=beta)

    def to_dict(self) -> dict:
        return asdict(self)
