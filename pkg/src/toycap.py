"""
Toy captioner for the patchalign toolkit

Frozen random patch encoder -> trainable linear + LayerNorm bridge -> small
pre-norm transformer decoder with causal self-attention, cross-attention over
patch tokens and a vocabulary head. Patch tokens carry no positional encoding.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np

from src import config
from src.attnpool import AttentionStack
from src.autodiff import Node, Tape
from src.errors import ShapeError
from src.losses import LogitsBatch
from src.scenes import SceneSample


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TripletBatch:
    """
    B paired samples sharing captions.

    Attributes:
        real_patches: B x S x P raw patch pixels of the real images
        syn_patches: B x S x P synthetic counterparts, or None
        captions: B x T token ids starting with bos, PAD-padded at the end
        pad_mask: B x T booleans, True = real token, False = PAD
    """
    real_patches: np.ndarray
    syn_patches: Optional[np.ndarray]
    captions: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        if self.captions.shape != self.pad_mask.shape or self.captions.ndim != 2:
            raise ShapeError(f"captions {self.captions.shape} and mask {self.pad_mask.shape} disagree")
        if self.real_patches.ndim != 3 or self.real_patches.shape[0] != self.captions.shape[0]:
            raise ShapeError(f"real patches {self.real_patches.shape} do not match batch size")
        if self.syn_patches is not None and self.syn_patches.shape != self.real_patches.shape:
            raise ShapeError("synthetic patches must match real patches")
        if not np.all(self.captions[:, 0] == config.BOS_ID):
            raise ShapeError("every caption must begin with bos")
        # PAD positions must be a contiguous tail
        if np.any(~self.pad_mask[:, :-1] & self.pad_mask[:, 1:]):
            raise ShapeError("PAD positions must be contiguous at the end")

    @property
    def size(self) -> int:
        return self.captions.shape[0]

    @property
    def synthetic_present(self) -> bool:
        return self.syn_patches is not None

    def without_synthetic(self) -> "TripletBatch":
        return TripletBatch(self.real_patches, None, self.captions, self.pad_mask)


def collate(samples: Sequence[SceneSample], with_synthetic: bool = True) -> TripletBatch:
    """Stack samples into a TripletBatch, padding captions with PAD"""
    length = max(len(s.caption) for s in samples)
    captions = np.full((len(samples), length), config.PAD_ID, dtype=np.int64)
    for row, sample in enumerate(samples):
        captions[row, :len(sample.caption)] = sample.caption
    return TripletBatch(
        real_patches=np.stack([s.real_patches for s in samples]),
        syn_patches=np.stack([s.syn_patches for s in samples]) if with_synthetic else None,
        captions=captions,
        pad_mask=captions != config.PAD_ID,
    )


def make_batches(samples: Sequence[SceneSample], batch_size: int,
                 with_synthetic: bool = True) -> List[TripletBatch]:
    return [
        collate(samples[i:i + batch_size], with_synthetic)
        for i in range(0, len(samples), batch_size)
    ]


def teacher_forcing_targets(captions: np.ndarray, pad_mask: np.ndarray):
    """Targets are the captions shifted left; the final position never counts"""
    targets = np.full_like(captions, config.PAD_ID)
    targets[:, :-1] = captions[:, 1:]
    target_mask = np.zeros_like(pad_mask)
    target_mask[:, :-1] = pad_mask[:, 1:]
    return targets, target_mask


class ToyModel:
    """
    Desk-scale captioner.

    Encoder weights are read-only arrays created at construction; everything
    in `params` (bridge + decoder) is trainable.
    """

    def __init__(self, seed: int = config.DEFAULT_SEED,
                 patch_dim: int = config.PATCH_SIZE ** 2 * config.IMAGE_CHANNELS,
                 encoder_width: int = config.ENCODER_WIDTH,
                 width: int = config.MODEL_WIDTH,
                 num_layers: int = config.NUM_LAYERS,
                 num_heads: int = config.NUM_HEADS,
                 ffn_width: int = config.FFN_WIDTH,
                 vocab_size: int = config.VOCAB_SIZE,
                 max_len: int = config.MAX_CAPTION_LEN):
        if width % num_heads:
            raise ShapeError(f"width {width} is not divisible by {num_heads} heads")
        self.seed = seed
        self.patch_dim = patch_dim
        self.encoder_width = encoder_width
        self.width = width
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.ffn_width = ffn_width
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.bos_id, self.pad_id, self.eos_id = config.BOS_ID, config.PAD_ID, config.EOS_ID

        rng = np.random.default_rng(seed)
        self.encoder_weight = rng.standard_normal((patch_dim, encoder_width)) * (2.0 / math.sqrt(patch_dim))
        self.encoder_bias = rng.standard_normal(encoder_width) * 0.1
        self.encoder_weight.flags.writeable = False
        self.encoder_bias.flags.writeable = False

        self.params: Dict[str, np.ndarray] = {}
        self._init_params(rng)
        logger.debug(f"ToyModel with {self.num_parameters()} trainable parameters (seed {seed})")

    def _init_params(self, rng: np.random.Generator) -> None:
        d, c, f, v = self.width, self.encoder_width, self.ffn_width, self.vocab_size

        def dense(rows, cols):
            return rng.standard_normal((rows, cols)) / math.sqrt(rows)

        p = self.params
        p["bridge.weight"] = dense(c, d)
        p["bridge.bias"] = np.zeros(d)
        p["bridge.ln.gamma"] = np.ones(d)
        p["bridge.ln.beta"] = np.zeros(d)
        p["embed.tokens"] = rng.standard_normal((v, d)) * 0.5
        p["embed.positions"] = rng.standard_normal((self.max_len, d)) * 0.1
        for layer in range(self.num_layers):
            for block in ("self", "cross"):
                prefix = f"layers.{layer}.{block}"
                p[f"{prefix}.ln.gamma"] = np.ones(d)
                p[f"{prefix}.ln.beta"] = np.zeros(d)
                for name in ("wq", "wk", "wv", "wo"):
                    p[f"{prefix}.{name}"] = dense(d, d)
            prefix = f"layers.{layer}.ffn"
            p[f"{prefix}.ln.gamma"] = np.ones(d)
            p[f"{prefix}.ln.beta"] = np.zeros(d)
            p[f"{prefix}.w1"] = dense(d, f)
            p[f"{prefix}.b1"] = np.zeros(f)
            p[f"{prefix}.w2"] = dense(f, d)
            p[f"{prefix}.b2"] = np.zeros(d)
        p["final.ln.gamma"] = np.ones(d)
        p["final.ln.beta"] = np.zeros(d)
        p["head.weight"] = dense(d, v)
        p["head.bias"] = np.zeros(v)

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def parameter_group(self, stage: int) -> Set[str]:
        """
        Trainable names at a progressive-unfreezing stage.

        0: bridge only; 1: bridge + top decoder layer + output head; 2: everything.
        """
        names = set(self.params)
        bridge = {n for n in names if n.startswith("bridge.")}
        if stage <= 0:
            return bridge
        if stage == 1:
            top = f"layers.{self.num_layers - 1}."
            return bridge | {n for n in names if n.startswith((top, "final.", "head."))}
        return names

    def encode(self, patches: np.ndarray) -> np.ndarray:
        """Frozen encoder: (..., S, P) pixels -> (..., S, C) features"""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape[-1] != self.patch_dim:
            raise ShapeError(f"patch width {patches.shape[-1]} != {self.patch_dim}")
        return np.tanh(patches @ self.encoder_weight + self.encoder_bias)

    def config_dict(self) -> dict:
        return {
            "seed": self.seed,
            "patch_dim": self.patch_dim,
            "encoder_width": self.encoder_width,
            "width": self.width,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_width": self.ffn_width,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
        }


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------

@dataclass
class BranchGraph:
    """Decoder pass over one image branch"""
    logits: Node
    memory: Node
    cross_attention: List[Node] = field(default_factory=list)


def bind_parameters(tape: Tape, model: ToyModel, trainable: Optional[Iterable[str]] = None) -> Dict[str, Node]:
    """Put model parameters on the tape: trainable ones as variables, the rest as constants"""
    trainable = set(trainable) if trainable is not None else set()
    return {
        name: tape.variable(value, name=name) if name in trainable else tape.constant(value)
        for name, value in model.params.items()
    }


def _split_heads(tape: Tape, x: Node, heads: int) -> Node:
    b, t, d = x.shape
    return tape.transpose(tape.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(tape: Tape, x: Node) -> Node:
    b, h, t, dh = x.shape
    return tape.reshape(tape.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attention(tape: Tape, p: Dict[str, Node], prefix: str, queries: Node, keys: Node,
               heads: int, mask: Optional[np.ndarray] = None):
    q = _split_heads(tape, tape.matmul(queries, p[f"{prefix}.wq"]), heads)
    k = _split_heads(tape, tape.matmul(keys, p[f"{prefix}.wk"]), heads)
    v = _split_heads(tape, tape.matmul(keys, p[f"{prefix}.wv"]), heads)
    scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = tape.add(scores, mask)
    probs = tape.softmax(scores, axis=-1)
    out = tape.matmul(_merge_heads(tape, tape.matmul(probs, v)), p[f"{prefix}.wo"])
    return out, probs


def bridge_graph(tape: Tape, model: ToyModel, p: Dict[str, Node], patches: np.ndarray) -> Node:
    """Projected, layer-normalised patch tokens (B, S, D)"""
    features = tape.constant(model.encode(patches))
    projected = tape.add(tape.matmul(features, p["bridge.weight"]), p["bridge.bias"])
    return tape.layer_norm(projected, p["bridge.ln.gamma"], p["bridge.ln.beta"])


def decode_graph(tape: Tape, model: ToyModel, p: Dict[str, Node], memory: Node,
                 captions: np.ndarray) -> BranchGraph:
    """Teacher-forced decoder pass over token ids (B, T) attending to memory"""
    batch, length = captions.shape
    if length > model.max_len:
        raise ShapeError(f"sequence length {length} exceeds maximum {model.max_len}")

    h = tape.add(tape.embed(p["embed.tokens"], captions),
                 tape.embed(p["embed.positions"], np.arange(length)))
    causal = np.triu(np.full((length, length), config.MASK_FILL), k=1)
    cross_probs = []
    for layer in range(model.num_layers):
        prefix = f"layers.{layer}"
        a = tape.layer_norm(h, p[f"{prefix}.self.ln.gamma"], p[f"{prefix}.self.ln.beta"])
        out, _ = _attention(tape, p, f"{prefix}.self", a, a, model.num_heads, causal)
        h = tape.add(h, out)

        a = tape.layer_norm(h, p[f"{prefix}.cross.ln.gamma"], p[f"{prefix}.cross.ln.beta"])
        out, probs = _attention(tape, p, f"{prefix}.cross", a, memory, model.num_heads)
        cross_probs.append(probs)
        h = tape.add(h, out)

        a = tape.layer_norm(h, p[f"{prefix}.ffn.ln.gamma"], p[f"{prefix}.ffn.ln.beta"])
        hidden = tape.relu(tape.add(tape.matmul(a, p[f"{prefix}.ffn.w1"]), p[f"{prefix}.ffn.b1"]))
        h = tape.add(h, tape.add(tape.matmul(hidden, p[f"{prefix}.ffn.w2"]), p[f"{prefix}.ffn.b2"]))

    h = tape.layer_norm(h, p["final.ln.gamma"], p["final.ln.beta"])
    logits = tape.add(tape.matmul(h, p["head.weight"]), p["head.bias"])
    return BranchGraph(logits=logits, memory=memory, cross_attention=cross_probs)


def branch_graph(tape: Tape, model: ToyModel, p: Dict[str, Node], patches: np.ndarray,
                 captions: np.ndarray) -> BranchGraph:
    return decode_graph(tape, model, p, bridge_graph(tape, model, p, patches), captions)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    """
    Numpy view of a forward pass.

    Attributes:
        logits: teacher-forced LogitsBatch for the real branch
        real_attention: one AttentionStack per sample (real images)
        syn_attention: same for synthetic images, or None
        real_memory / syn_memory: bridge outputs (B, S, D)
    """
    logits: LogitsBatch
    real_attention: List[AttentionStack]
    syn_attention: Optional[List[AttentionStack]]
    real_memory: np.ndarray
    syn_memory: Optional[np.ndarray]


def attention_stacks(branch: BranchGraph, pad_mask: np.ndarray) -> List[AttentionStack]:
    """Per-sample L x H x T x S stacks from a branch's cross-attention nodes"""
    values = np.stack([probs.value for probs in branch.cross_attention], axis=1)
    return [AttentionStack(values=values[i], token_mask=pad_mask[i]) for i in range(values.shape[0])]


def forward(model: ToyModel, batch: TripletBatch) -> ForwardOutput:
    """
    Teacher-forced pass over the real branch and, when present, the
    synthetic branch under the same captions.
    """
    tape = Tape()
    p = bind_parameters(tape, model)
    real = branch_graph(tape, model, p, batch.real_patches, batch.captions)
    targets, target_mask = teacher_forcing_targets(batch.captions, batch.pad_mask)
    syn = None
    if batch.synthetic_present:
        syn = branch_graph(tape, model, p, batch.syn_patches, batch.captions)
    return ForwardOutput(
        logits=LogitsBatch(real.logits.value, targets, target_mask),
        real_attention=attention_stacks(real, batch.pad_mask),
        syn_attention=attention_stacks(syn, batch.pad_mask) if syn else None,
        real_memory=real.memory.value,
        syn_memory=syn.memory.value if syn else None,
    )


def next_token_log_probs(model: ToyModel, memory: Node, prefixes: np.ndarray) -> np.ndarray:
    """Log-probabilities of the token after each prefix (N, V)"""
    tape = Tape()
    p = bind_parameters(tape, model)
    logits = decode_graph(tape, model, p, memory, prefixes).logits.value[:, -1, :]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _repeats_ngram(tokens: Sequence[int], candidate: int, n: int) -> bool:
    if n <= 0 or len(tokens) < n - 1:
        return False
    new = tuple(tokens[len(tokens) - (n - 1):]) + (candidate,) if n > 1 else (candidate,)
    seen = {tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)}
    return new in seen


def generate(model: ToyModel, patches: np.ndarray, max_len: int = config.MAX_CAPTION_LEN,
             beams: int = config.BEAMS, no_repeat_ngram: int = config.NO_REPEAT_NGRAM,
             length_penalty: float = config.LENGTH_PENALTY) -> List[int]:
    """
    Beam-search decoding with a forced bos.

    Args:
        model: Captioner
        patches: S x P raw patch pixels of one image
        max_len: Maximum sequence length including bos
        beams: Beam width (1 = greedy argmax)
        no_repeat_ngram: Forbid repeating any n-gram of this size (0 = off)
        length_penalty: Finished scores are divided by length ** length_penalty

    Returns:
        Token ids starting with bos, ending with eos or at max_len
    """
    if beams < 1:
        raise ValueError(f"beams must be at least 1, got {beams}")
    if max_len < 1:
        raise ValueError(f"max_len must be at least 1, got {max_len}")
    max_len = min(max_len, model.max_len)
    tape = Tape()
    memory_value = bridge_graph(tape, model, bind_parameters(tape, model), patches[None]).value

    live = [([model.bos_id], 0.0)]
    finished = []
    while live and len(live[0][0]) < max_len:
        prefixes = np.array([tokens for tokens, _ in live], dtype=np.int64)
        memory = tape.constant(np.repeat(memory_value, len(live), axis=0))
        log_probs = next_token_log_probs(model, memory, prefixes)

        candidates = []
        for index, (tokens, score) in enumerate(live):
            order = np.argsort(-log_probs[index], kind="stable")
            taken = 0
            for token in order:
                if _repeats_ngram(tokens, int(token), no_repeat_ngram):
                    continue
                candidates.append((score + float(log_probs[index, token]), index, int(token)))
                taken += 1
                if taken == beams:
                    break
        # stable sort keeps beam order then token order among equal scores
        candidates.sort(key=lambda item: -item[0])

        next_live = []
        for score, index, token in candidates[:beams]:
            tokens = live[index][0] + [token]
            if token == model.eos_id:
                finished.append((tokens, score / (len(tokens) ** length_penalty)))
            else:
                next_live.append((tokens, score))
        live = next_live
        if len(finished) >= beams:
            break

    finished.extend((tokens, score / (len(tokens) ** length_penalty)) for tokens, score in live)
    best_tokens, _ = max(finished, key=lambda item: item[1])
    return best_tokens
