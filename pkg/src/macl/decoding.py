"""Inference-time decoding: beam search, greedy, nucleus sampling.

All strategies operate on a frozen model through `decode_prefixes` and
never propose reserved ids other than EOS.  Hypothesis scores are raw sums
of log-probabilities; length-normalized comparison of finished hypotheses
is available behind a flag.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .corpus import BOS_ID, EOS_ID, DialogueExample, GenerationRecord, Vocabulary
from .errors import ParameterError
from .model import Seq2SeqModel, SourceEncoding, build_source

_STRATEGIES = ("beam", "greedy", "nucleus")

# PAD/BOS/SEP/UNK must never appear inside a generated response
_FORBIDDEN_IDS = (0, 1, 3, 4)


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "beam"
    beam_size: int = 3
    nucleus_p: float = 0.9
    max_target_len: int = 24
    seed: int = 0
    length_normalize: bool = False

    def __post_init__(self):
        if self.strategy not in _STRATEGIES:
            raise ParameterError(f"strategy must be one of {_STRATEGIES}")
        if self.beam_size < 1:
            raise ParameterError(f"beam_size must be >= 1, got {self.beam_size}")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ParameterError(f"nucleus_p must be in (0, 1], got {self.nucleus_p}")
        if self.max_target_len < 1:
            raise ParameterError("max_target_len must be >= 1")

    def params(self) -> dict:
        out = {"max_target_len": self.max_target_len, "length_normalize": self.length_normalize}
        if self.strategy == "beam":
            out["beam_size"] = self.beam_size
        elif self.strategy == "nucleus":
            out["nucleus_p"] = self.nucleus_p
            out["seed"] = self.seed
        return out


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # content ids, no BOS/EOS
    log_score: float
    truncated: bool


def _hypothesis_key(h: Hypothesis, length_normalize: bool) -> float:
    if length_normalize:
        return h.log_score / max(len(h.tokens) + 1, 1)
    return h.log_score


def beam_search(
    model,
    encoding: SourceEncoding,
    beam_size: int,
    max_target_len: int,
    length_normalize: bool = False,
) -> list[Hypothesis]:
    """Return up to `beam_size` finished hypotheses, best first.

    Selection keeps a shrinking frontier: each hypothesis that emits EOS
    retires and frees its slot, so every slot yields exactly one finished
    sequence (truncated at max_target_len if EOS never came).
    """
    active: list[tuple[tuple[int, ...], float]] = [((BOS_ID,), 0.0)]
    need = beam_size
    finished: list[Hypothesis] = []
    for _ in range(max_target_len):
        if not active:
            break
        rows = model.decode_prefixes(encoding, [list(seq) for seq, _ in active])
        logp = torch.log(rows)
        logp[:, list(_FORBIDDEN_IDS)] = float("-inf")
        scores = torch.tensor([s for _, s in active], dtype=logp.dtype).unsqueeze(1) + logp
        flat = scores.flatten()
        k = min(need, int(torch.isfinite(flat).sum()))
        if k == 0:
            break
        top = torch.topk(flat, k)
        next_active: list[tuple[tuple[int, ...], float]] = []
        vocab_size = rows.size(1)
        for rank in range(k):
            idx = int(top.indices[rank])
            beam, token = divmod(idx, vocab_size)
            seq = active[beam][0] + (token,)
            score = float(top.values[rank])
            if token == EOS_ID:
                finished.append(Hypothesis(tokens=seq[1:-1], log_score=score, truncated=False))
                need -= 1
            else:
                next_active.append((seq, score))
        active = next_active
    for seq, score in active:
        finished.append(Hypothesis(tokens=seq[1:], log_score=score, truncated=True))
    finished.sort(key=lambda h: (-_hypothesis_key(h, length_normalize), h.tokens))
    return finished


def nucleus_sample(
    model,
    encoding: SourceEncoding,
    p: float,
    max_target_len: int,
    seed: int,
) -> Hypothesis:
    """Sample from the smallest sorted prefix whose mass reaches p."""
    generator = torch.Generator().manual_seed(seed)
    prefix: list[int] = [BOS_ID]
    score = 0.0
    for _ in range(max_target_len):
        raw = model.decode_prefixes(encoding, [prefix])[0]
        row = raw.clone()
        row[list(_FORBIDDEN_IDS)] = 0.0
        row = row / row.sum()
        sorted_p, sorted_idx = torch.sort(row, descending=True, stable=True)
        cum = torch.cumsum(sorted_p, dim=0)
        cutoff = min(int(torch.searchsorted(cum, p)), row.size(0) - 1)
        support = sorted_p[: cutoff + 1]
        support = support / support.sum()
        u = torch.rand((), generator=generator)
        pick = min(int(torch.searchsorted(torch.cumsum(support, 0), u, right=True)), cutoff)
        token = int(sorted_idx[pick])
        score += math.log(float(raw[token]))  # raw model probability, like beam scores
        if token == EOS_ID:
            return Hypothesis(tokens=tuple(prefix[1:]), log_score=score, truncated=False)
        prefix.append(token)
    return Hypothesis(tokens=tuple(prefix[1:]), log_score=score, truncated=True)


def example_seed(base_seed: int, example_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{example_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**31)


def decode(
    model: Seq2SeqModel,
    vocab: Vocabulary,
    example: DialogueExample,
    cfg: DecodeConfig,
) -> GenerationRecord:
    source_ids, kmask = build_source(example, vocab, model.config.max_source_len)
    encoding = model.encode_source(source_ids, kmask)
    max_len = min(cfg.max_target_len, model.config.max_target_len)
    if cfg.strategy == "nucleus":
        best = nucleus_sample(
            model, encoding, cfg.nucleus_p, max_len, example_seed(cfg.seed, example.example_id)
        )
    else:
        width = 1 if cfg.strategy == "greedy" else cfg.beam_size
        best = beam_search(model, encoding, width, max_len, cfg.length_normalize)[0]
    params = cfg.params()
    params["truncated"] = best.truncated
    return GenerationRecord(
        example_id=example.example_id,
        generated_response=tuple(vocab.decode(best.tokens)),
        decoder=cfg.strategy,
        params=params,
        log_score=best.log_score,
    )


def decode_corpus(
    model: Seq2SeqModel,
    vocab: Vocabulary,
    examples: Sequence[DialogueExample],
    cfg: DecodeConfig,
) -> list[GenerationRecord]:
    return [decode(model, vocab, ex, cfg) for ex in examples]
