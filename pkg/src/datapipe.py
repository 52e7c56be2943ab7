"""
Caption data pipeline
Verification of EN-BN caption pairs, bilingual prompt synthesis with reproducibility
sidecars, and shard merging with dedupe and audit
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from src import config
from src.errors import NumericalError, RecordFormatError, ShapeError
from src.numio import CaptionPairRecord, read_embeddings, read_records


logger = logging.getLogger(__name__)

EN_STOPWORDS: FrozenSet[str] = frozenset({
    "a", "an", "the", "of", "in", "on", "at", "to", "and", "or", "is", "are", "was",
    "with", "for", "by", "from", "its", "it", "this", "that", "as", "be", "there",
})
BN_STOPWORDS: FrozenSet[str] = frozenset({
    "এবং", "ও", "একটি", "এর", "যে", "এই", "সেই", "তে", "থেকে", "করে", "হয়", "আছে",
})

Splitter = Callable[[str], List[str]]


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingPair:
    """Precomputed sentence embeddings of one caption and its translation"""
    caption_id: int
    emb_en: np.ndarray
    emb_bn: np.ndarray

    def __post_init__(self):
        emb_en = np.asarray(self.emb_en, dtype=np.float64).reshape(-1)
        emb_bn = np.asarray(self.emb_bn, dtype=np.float64).reshape(-1)
        if emb_en.shape != emb_bn.shape:
            raise ShapeError(f"caption {self.caption_id}: embedding sizes {emb_en.size} and {emb_bn.size} differ")
        if np.linalg.norm(emb_en) < config.NORM_FLOOR or np.linalg.norm(emb_bn) < config.NORM_FLOOR:
            raise NumericalError(f"caption {self.caption_id}: zero-norm embedding")
        object.__setattr__(self, "emb_en", emb_en)
        object.__setattr__(self, "emb_bn", emb_bn)


def verify_pair(pair: EmbeddingPair, threshold: float = config.VERIFY_THRESHOLD) -> Tuple[float, bool]:
    """
    Cosine similarity of the two embeddings and whether it clears the threshold.

    A similarity equal to the threshold is accepted.
    """
    cos = float(np.dot(pair.emb_en, pair.emb_bn) / (np.linalg.norm(pair.emb_en) * np.linalg.norm(pair.emb_bn)))
    cos = min(max(cos, -1.0), 1.0)
    return cos, cos >= threshold


def verify_shard(records: Sequence[CaptionPairRecord], embeddings: Dict[int, Tuple[np.ndarray, np.ndarray]],
                 threshold: float = config.VERIFY_THRESHOLD) -> List[CaptionPairRecord]:
    """
    Annotate one shard with similarity and valid flags.

    Records without an embedding are returned unchanged (unverified).
    """
    annotated = []
    missing = 0
    for record in records:
        if record.caption_id not in embeddings:
            missing += 1
            annotated.append(record)
            continue
        emb_en, emb_bn = embeddings[record.caption_id]
        similarity, valid = verify_pair(EmbeddingPair(record.caption_id, emb_en, emb_bn), threshold)
        annotated.append(replace(record, similarity=similarity, valid=valid))
    if missing:
        logger.warning(f"{missing} record(s) had no embedding and stay unverified")
    return annotated


def verify_shard_files(record_paths: Sequence[Union[str, Path]], embedding_paths: Sequence[Union[str, Path]],
                       threshold: float = config.VERIFY_THRESHOLD,
                       workers: int = config.SHARD_WORKERS) -> List[List[CaptionPairRecord]]:
    """
    Verify shards in parallel; results come back in shard order.

    Args:
        record_paths: One CSV/JSONL record file per shard
        embedding_paths: Matching embedding tensor files
        threshold: Acceptance threshold
        workers: Thread count
    """
    if len(record_paths) != len(embedding_paths):
        raise ShapeError(f"{len(record_paths)} record shards but {len(embedding_paths)} embedding shards")

    def work(paths):
        record_path, embedding_path = paths
        annotated = verify_shard(read_records(record_path), read_embeddings(embedding_path), threshold)
        logger.info(f"Verified {record_path}: {sum(bool(r.valid) for r in annotated)}/{len(annotated)} accepted")
        return annotated

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(work, zip(record_paths, embedding_paths)))


def audit_records(records: Sequence[CaptionPairRecord], threshold: float = config.VERIFY_THRESHOLD) -> int:
    """Number of verified records whose valid flag disagrees with similarity >= threshold"""
    return sum(
        1 for r in records
        if r.similarity is not None and r.valid != (r.similarity >= threshold)
    )


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------

def build_prompt(text_en: str, text_bn: str) -> str:
    """Bilingual text-to-image prompt"""
    if not text_en:
        raise ValueError("English text must be nonempty")
    return config.PROMPT_TEMPLATE.format(en=text_en, bn=text_bn)


def _fit_budget(tokens: List[str], budget: int, stopwords: FrozenSet[str]) -> List[str]:
    """Drop stopwords from the last occurrence backwards, then cut the tail"""
    if len(tokens) <= budget:
        return list(tokens)
    excess = len(tokens) - budget
    dropped = set()
    for index in range(len(tokens) - 1, -1, -1):
        if len(dropped) == excess:
            break
        if tokens[index].lower() in stopwords:
            dropped.add(index)
    kept = [token for index, token in enumerate(tokens) if index not in dropped]
    return kept[:budget]


def truncate_bilingual(en_tokens: Sequence[str], bn_tokens: Sequence[str],
                       cap: int = config.PROMPT_TOKEN_CAP,
                       en_budget: int = config.EN_TOKEN_BUDGET,
                       bn_budget: int = config.BN_TOKEN_BUDGET,
                       en_stopwords: FrozenSet[str] = EN_STOPWORDS,
                       bn_stopwords: FrozenSet[str] = BN_STOPWORDS) -> Tuple[List[str], List[str]]:
    """
    Fit both token lists into their budgets, preferring to keep content words.

    Each side is trimmed independently; budget unused by one language is not
    given to the other. When the two budgets together exceed cap, the Bengali
    side is trimmed further by the same rule.

    Raises:
        ValueError: negative cap or budget
    """
    if min(cap, en_budget, bn_budget) < 0:
        raise ValueError(f"budgets must be nonnegative (cap={cap}, en={en_budget}, bn={bn_budget})")
    en = _fit_budget(list(en_tokens), min(en_budget, cap), en_stopwords)
    bn = _fit_budget(list(bn_tokens), bn_budget, bn_stopwords)
    if len(en) + len(bn) > cap:
        bn = _fit_budget(bn, cap - len(en), bn_stopwords)
    return en, bn


def truncated_prompt(text_en: str, text_bn: str, splitter: Splitter = str.split, **budgets) -> str:
    """Split, truncate and build the prompt for one caption pair"""
    en, bn = truncate_bilingual(splitter(text_en), splitter(text_bn), **budgets)
    return build_prompt(" ".join(en), " ".join(bn))


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptSidecar:
    """Reproducibility record stored next to a synthesized image"""
    prompt: str
    model_versions: Dict[str, str] = field(default_factory=dict)
    negative_prompt: str = config.NEGATIVE_PROMPT
    seed: int = config.SIDECAR_SEED
    sha256_of_prompt: str = ""

    def validate(self) -> bool:
        """True when the stored hash matches the prompt"""
        return self.sha256_of_prompt == prompt_hash(self.prompt)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PromptSidecar":
        return cls(**data)


def sidecar_for(prompt: str, versions: Optional[Dict[str, str]] = None,
                seed: int = config.SIDECAR_SEED) -> PromptSidecar:
    return PromptSidecar(
        prompt=prompt,
        model_versions=dict(sorted((versions or {}).items())),
        seed=seed,
        sha256_of_prompt=prompt_hash(prompt),
    )


def build_prompt_sidecars(records: Sequence[CaptionPairRecord], versions: Optional[Dict[str, str]] = None,
                          seed: int = config.SIDECAR_SEED, splitter: Splitter = str.split) -> List[dict]:
    """Prompt and sidecar for every accepted record, in record order"""
    entries = []
    for record in records:
        if record.valid is not True:
            continue
        prompt = truncated_prompt(record.text_en, record.text_bn, splitter)
        entries.append({
            "caption_id": record.caption_id,
            "image_id": record.image_id,
            "sidecar": sidecar_for(prompt, versions, seed).to_dict(),
        })
    logger.info(f"Built {len(entries)} prompts from {len(records)} records")
    return entries


# ---------------------------------------------------------------------------
# Merge
# ---------------------------------------------------------------------------

@dataclass
class MergeSummary:
    total: int = 0
    accepted: int = 0
    rejected: int = 0
    unverified: int = 0
    duplicates: int = 0
    shards: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def merge_records(shards: Sequence[Sequence[CaptionPairRecord]]) -> Tuple[List[CaptionPairRecord], MergeSummary]:
    """
    Concatenate shards in order, keeping the first record per caption_id.

    Raises:
        RecordFormatError: a repeated caption_id carries different text
    """
    seen: Dict[int, CaptionPairRecord] = {}
    merged = []
    summary = MergeSummary(shards=len(shards))
    for shard_index, shard in enumerate(shards):
        for record in shard:
            first = seen.get(record.caption_id)
            if first is not None:
                if not first.same_text(record):
                    raise RecordFormatError(
                        f"caption_id {record.caption_id} in shard {shard_index} conflicts with an earlier record"
                    )
                summary.duplicates += 1
                continue
            seen[record.caption_id] = record
            merged.append(record)

    summary.total = len(merged)
    summary.accepted = sum(1 for r in merged if r.valid is True)
    summary.rejected = sum(1 for r in merged if r.valid is False)
    summary.unverified = sum(1 for r in merged if r.valid is None)
    if summary.duplicates:
        logger.warning(f"Dropped {summary.duplicates} duplicate record(s) while merging")
    return merged, summary


def merge_shards(paths: Sequence[Union[str, Path]]) -> Tuple[List[CaptionPairRecord], MergeSummary]:
    """Read and merge record shards from disk"""
    merged, summary = merge_records([read_records(path) for path in paths])
    logger.info(f"Merged {summary.shards} shards: {summary.total} records, "
                f"{summary.accepted} accepted, {summary.rejected} rejected")
    return merged, summary
