"""Small encoder-decoder transformer over token ids.

The model exposes exactly what the objectives consume: per-step next-token
probability rows under teacher forcing, a single-step distribution for
search, and mean/max/first-pooled source and target representations that
stay differentiable.  Sources are the flat concatenation
BOS u1 SEP u2 SEP ... SEP k EOS with a boolean mask over the knowledge
positions.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .corpus import BOS_ID, EOS_ID, PAD_ID, SEP_ID, DialogueExample, Vocabulary
from .errors import ConfigurationError, ValidationError, VocabularyError
from .ioutil import atomic_write_bytes

_CHECKPOINT_MAGIC = b"MACLCKPT"
_FORMAT_VERSION = 1

_POOLING_MODES = ("mean", "max", "first")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embedding_dim: int = 64
    hidden_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    max_source_len: int = 48
    max_target_len: int = 24
    pooling: str = "mean"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "embedding_dim", "hidden_dim", "encoder_layers",
                     "decoder_layers", "attention_heads", "max_source_len", "max_target_len"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.hidden_dim % self.attention_heads != 0:
            raise ConfigurationError(
                f"attention_heads={self.attention_heads} must divide hidden_dim={self.hidden_dim}"
            )
        if self.pooling not in _POOLING_MODES:
            raise ConfigurationError(f"pooling must be one of {_POOLING_MODES}")


@dataclass
class SourceEncoding:
    """Encoder output for one source sequence (inference use, no grads)."""

    states: torch.Tensor  # [S, hidden]
    source_ids: tuple[int, ...]
    knowledge_token_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.source_ids) != len(self.knowledge_token_mask):
            raise ValidationError("knowledge mask length must equal source length")


@dataclass
class StepDistributions:
    """Per-step next-token rows plus pooled representations for one example."""

    probs: torch.Tensor  # [T, vocab], rows sum to 1
    source_pooled: torch.Tensor  # [hidden]
    target_pooled: torch.Tensor  # [hidden]
    differentiable: bool


@dataclass
class BatchStepDistributions:
    probs: torch.Tensor  # [B, Tmax, vocab]
    target_mask: torch.Tensor  # [B, Tmax] True on real steps
    source_pooled: torch.Tensor  # [B, hidden]
    target_pooled: torch.Tensor  # [B, hidden]


def build_source(
    example: DialogueExample, vocab: Vocabulary, max_source_len: int
) -> tuple[list[int], list[bool]]:
    """Flatten one example into source ids plus a knowledge-position mask.

    Truncation drops whole context turns starting from the oldest; the
    knowledge sentence is never truncated.
    """
    knowledge = vocab.encode(example.gold_knowledge)
    turns = [vocab.encode(t) for t in example.context_turns]
    while True:
        length = 1 + sum(len(t) + 1 for t in turns) + len(knowledge) + 1
        if length <= max_source_len or not turns:
            break
        turns.pop(0)
    if length > max_source_len:
        raise ConfigurationError(
            f"example {example.example_id!r}: knowledge of {len(knowledge)} tokens does not fit "
            f"max_source_len={max_source_len}"
        )
    ids: list[int] = [BOS_ID]
    for t in turns:
        ids.extend(t)
        ids.append(SEP_ID)
    mask = [False] * len(ids) + [True] * len(knowledge)
    ids.extend(knowledge)
    ids.append(EOS_ID)
    mask.append(False)
    return ids, mask


def knowledge_token_ids(example: DialogueExample, vocab: Vocabulary) -> set[int]:
    """Unique non-reserved ids of the gold knowledge sentence."""
    return {i for i in vocab.encode(example.gold_knowledge) if i > 4}


def _causal_mask(size: int, device: torch.device) -> torch.Tensor:
    return torch.triu(torch.ones(size, size, dtype=torch.bool, device=device), diagonal=1)


class Seq2SeqModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            h = config.hidden_dim
            self.token_emb = nn.Embedding(config.vocab_size, config.embedding_dim, padding_idx=PAD_ID)
            self.in_proj = nn.Linear(config.embedding_dim, h)
            self.src_pos = nn.Embedding(config.max_source_len, h)
            self.tgt_pos = nn.Embedding(config.max_target_len + 2, h)
            enc_layer = nn.TransformerEncoderLayer(
                h, config.attention_heads, dim_feedforward=2 * h,
                dropout=0.0, batch_first=True, norm_first=True,
            )
            dec_layer = nn.TransformerDecoderLayer(
                h, config.attention_heads, dim_feedforward=2 * h,
                dropout=0.0, batch_first=True, norm_first=True,
            )
            self.encoder = nn.TransformerEncoder(
                enc_layer, config.encoder_layers, enable_nested_tensor=False
            )
            self.decoder = nn.TransformerDecoder(dec_layer, config.decoder_layers)
            self.out_proj = nn.Linear(h, config.vocab_size)

    # -- low-level batched pieces ------------------------------------------

    def _embed_source(self, src: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(src.size(1), device=src.device)
        return self.in_proj(self.token_emb(src)) + self.src_pos(pos)

    def _embed_target(self, tgt: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(tgt.size(1), device=tgt.device)
        return self.in_proj(self.token_emb(tgt)) + self.tgt_pos(pos)

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        return self.encoder(self._embed_source(src), src_key_padding_mask=src_pad)

    def decoder_states(
        self, memory: torch.Tensor, mem_pad: torch.Tensor, tgt_in: torch.Tensor
    ) -> torch.Tensor:
        # causal mask keeps real positions independent of trailing padding
        return self.decoder(
            self._embed_target(tgt_in),
            memory,
            tgt_mask=_causal_mask(tgt_in.size(1), tgt_in.device),
            memory_key_padding_mask=mem_pad,
        )

    def _pool(self, states: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
        mode = self.config.pooling
        if mode == "first":
            return states[:, 0]
        if mode == "max":
            masked = states.masked_fill(~real.unsqueeze(-1), float("-inf"))
            return masked.max(dim=1).values
        mask = real.unsqueeze(-1).to(states.dtype)
        return (states * mask).sum(dim=1) / mask.sum(dim=1).clamp_min(1.0)

    # -- contract surface ---------------------------------------------------

    def _validate_ids(self, ids: Sequence[int]) -> None:
        for i in ids:
            if not 0 <= i < self.config.vocab_size:
                raise VocabularyError(f"token id {i} outside vocabulary of {self.config.vocab_size}")

    def _pad_batch(self, seqs: list[list[int]], limit: int, what: str) -> tuple[torch.Tensor, torch.Tensor]:
        device = self.out_proj.weight.device
        for s in seqs:
            self._validate_ids(s)
            if len(s) > limit:
                raise ConfigurationError(f"{what} of {len(s)} tokens exceeds limit {limit}")
            if not s:
                raise ValidationError(f"empty {what}")
        width = max(len(s) for s in seqs)
        batch = torch.full((len(seqs), width), PAD_ID, dtype=torch.long, device=device)
        real = torch.zeros(len(seqs), width, dtype=torch.bool, device=device)
        for r, s in enumerate(seqs):
            batch[r, : len(s)] = torch.tensor(s, dtype=torch.long, device=device)
            real[r, : len(s)] = True
        return batch, real

    def forward_batch(
        self, sources: list[list[int]], targets: list[list[int]]
    ) -> BatchStepDistributions:
        """Teacher-forced rows p(y_t | source, y_<t) for a batch of examples."""
        if len(sources) != len(targets):
            raise ValidationError("sources and targets must have equal batch size")
        src, src_real = self._pad_batch(sources, self.config.max_source_len, "source")
        tgt, tgt_real = self._pad_batch(targets, self.config.max_target_len + 1, "target")
        tgt_in = torch.cat([torch.full_like(tgt[:, :1], BOS_ID), tgt[:, :-1]], dim=1)
        # shifted rows past a sequence's end are padding; mark them BOS-safe
        tgt_in = tgt_in.masked_fill(~tgt_real, PAD_ID)

        memory = self.encode(src, ~src_real)
        states = self.decoder_states(memory, ~src_real, tgt_in)
        probs = torch.softmax(self.out_proj(states), dim=-1)
        return BatchStepDistributions(
            probs=probs,
            target_mask=tgt_real,
            source_pooled=self._pool(memory, src_real),
            target_pooled=self._pool(states, tgt_real),
        )

    def forward_teacher_forced(
        self, source: Sequence[int], target: Sequence[int]
    ) -> StepDistributions:
        batch = self.forward_batch([list(source)], [list(target)])
        return StepDistributions(
            probs=batch.probs[0, : len(target)],
            source_pooled=batch.source_pooled[0],
            target_pooled=batch.target_pooled[0],
            differentiable=torch.is_grad_enabled(),
        )

    def target_representations(
        self, sources: list[list[int]], targets: list[list[int]]
    ) -> torch.Tensor:
        """Pooled decoder representations of arbitrary target sequences [B, hidden]."""
        return self.forward_batch(sources, targets).target_pooled

    def encode_source(
        self, source_ids: Sequence[int], knowledge_token_mask: Sequence[bool]
    ) -> SourceEncoding:
        self._validate_ids(source_ids)
        if len(source_ids) > self.config.max_source_len:
            raise ConfigurationError(
                f"source of {len(source_ids)} tokens exceeds max_source_len={self.config.max_source_len}"
            )
        with torch.no_grad():
            src = torch.tensor([list(source_ids)], dtype=torch.long)
            states = self.encode(src, torch.zeros_like(src, dtype=torch.bool))[0]
        return SourceEncoding(
            states=states,
            source_ids=tuple(source_ids),
            knowledge_token_mask=tuple(bool(b) for b in knowledge_token_mask),
        )

    def decode_prefixes(self, encoding: SourceEncoding, prefixes: list[list[int]]) -> torch.Tensor:
        """Next-token distributions [n, vocab] for equal-length decoded prefixes."""
        width = len(prefixes[0])
        for p in prefixes:
            if len(p) != width:
                raise ValidationError("prefixes in one step must share a length")
            if p[0] != BOS_ID:
                raise ValidationError("decode prefix must begin with BOS")
            self._validate_ids(p)
        if width > self.config.max_target_len + 1:
            raise ConfigurationError(
                f"prefix of {width} tokens exceeds max_target_len={self.config.max_target_len}"
            )
        with torch.no_grad():
            tgt_in = torch.tensor(prefixes, dtype=torch.long)
            memory = encoding.states.unsqueeze(0).expand(len(prefixes), -1, -1)
            mem_pad = torch.zeros(len(prefixes), encoding.states.size(0), dtype=torch.bool)
            states = self.decoder_states(memory, mem_pad, tgt_in)
            return torch.softmax(self.out_proj(states[:, -1]), dim=-1)

    def decode_step(self, encoding: SourceEncoding, prefix: Sequence[int]) -> torch.Tensor:
        """Distribution over the next token after `prefix` (must start with BOS)."""
        return self.decode_prefixes(encoding, [list(prefix)])[0]


# --------------------------------------------------------------------------
# Checkpoint format: magic | header length | header JSON | raw tensor blob
# --------------------------------------------------------------------------


def save_checkpoint(
    model: Seq2SeqModel,
    vocab: Vocabulary,
    path: str | Path,
    frozen: bool = False,
    extra: dict | None = None,
) -> None:
    names = sorted(model.state_dict().keys())
    state = model.state_dict()
    tensors = []
    blobs = []
    for name in names:
        t = state[name].detach().cpu().contiguous()
        tensors.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).removeprefix("torch.")})
        blobs.append(t.numpy().tobytes())
    header = {
        "format_version": _FORMAT_VERSION,
        "config": asdict(model.config),
        "vocab_content": list(vocab.surfaces[5:]),
        "vocab_sha256": vocab.sha256,
        "frozen": frozen,
        "tensors": tensors,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = _CHECKPOINT_MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(blobs)
    atomic_write_bytes(path, payload)


def load_checkpoint(
    path: str | Path, expected_vocab: Vocabulary | None = None
) -> tuple[Seq2SeqModel, Vocabulary, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a model checkpoint")
    offset = len(_CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack("<Q", raw[offset : offset + 8])
    offset += 8
    header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    if header["format_version"] != _FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format version {header['format_version']}")
    vocab = Vocabulary(header["vocab_content"])
    if vocab.sha256 != header["vocab_sha256"]:
        raise ValidationError(f"{path}: checkpoint vocab hash does not match its own vocabulary")
    if expected_vocab is not None and expected_vocab.sha256 != header["vocab_sha256"]:
        raise ValidationError(f"{path}: checkpoint vocab hash does not match the provided vocabulary")

    model = Seq2SeqModel(ModelConfig(**header["config"]))
    state = {}
    for meta in header["tensors"]:
        dtype = getattr(torch, meta["dtype"])
        shape = tuple(meta["shape"])
        count = 1
        for d in shape:
            count *= d
        nbytes = count * torch.empty((), dtype=dtype).element_size()
        t = torch.frombuffer(bytearray(raw[offset : offset + nbytes]), dtype=dtype).reshape(shape)
        state[meta["name"]] = t
        offset += nbytes
    model.load_state_dict(state)
    return model, vocab, header


def checkpoint_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def model_parameter_sha256(model: Seq2SeqModel) -> str:
    digest = hashlib.sha256()
    for name in sorted(model.state_dict().keys()):
        digest.update(name.encode())
        digest.update(model.state_dict()[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
