"""Hard-negative mining from a frozen degenerator.

Group beam search partitions the beam budget into groups that decode in
lockstep; at each position a later group's candidate scores are penalized
by `diversity_penalty` times the number of earlier groups that already
chose that token at this position (Hamming diversity).  Candidates are
scored by raw LCS length against the gold knowledge and the top m are
retained as hard negatives.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .corpus import BOS_ID, EOS_ID, DialogueExample, Vocabulary
from .decoding import _FORBIDDEN_IDS, Hypothesis
from .errors import CorpusFormatError, ParameterError, StaleCacheError
from .ioutil import write_jsonl
from .metrics import lcs_length
from .model import Seq2SeqModel, SourceEncoding, build_source


@dataclass(frozen=True)
class GroupBeamConfig:
    beam_size: int = 32
    num_groups: int = 8
    diversity_penalty: float = 0.5
    max_target_len: int = 24

    def __post_init__(self):
        if self.num_groups < 1 or self.beam_size < self.num_groups:
            raise ParameterError("need beam_size >= num_groups >= 1")
        if self.beam_size % self.num_groups != 0:
            raise ParameterError(
                f"num_groups={self.num_groups} must divide beam_size={self.beam_size}"
            )
        if self.diversity_penalty < 0:
            raise ParameterError("diversity_penalty must be >= 0")
        if self.max_target_len < 1:
            raise ParameterError("max_target_len must be >= 1")


@dataclass
class _Group:
    # (sequence incl BOS, raw log score, selection score incl past penalties)
    active: list[tuple[tuple[int, ...], float, float]]
    need: int
    finished: list[Hypothesis]


def group_beam_search(model, encoding: SourceEncoding, cfg: GroupBeamConfig) -> list[Hypothesis]:
    """Return up to beam_size finished hypotheses across all groups.

    Groups advance one position per outer step; probability rows for every
    active beam are computed in a single batched call, then groups select
    sequentially so each sees the token counts of the groups before it.
    """
    width = cfg.beam_size // cfg.num_groups
    groups = [_Group(active=[((BOS_ID,), 0.0, 0.0)], need=width, finished=[]) for _ in range(cfg.num_groups)]

    for _ in range(cfg.max_target_len):
        live = [g for g in groups if g.active]
        if not live:
            break
        prefixes = [list(seq) for g in live for seq, _, _ in g.active]
        rows = model.decode_prefixes(encoding, prefixes)
        logp = torch.log(rows)
        logp[:, list(_FORBIDDEN_IDS)] = float("-inf")
        vocab_size = rows.size(1)

        chosen_here: Counter[int] = Counter()
        offset = 0
        for group in live:
            n = len(group.active)
            glogp = logp[offset : offset + n]
            offset += n
            raw_base = glogp.new_tensor([r for _, r, _ in group.active]).unsqueeze(1)
            sel_base = glogp.new_tensor([s for _, _, s in group.active]).unsqueeze(1)
            raw_scores = raw_base + glogp
            sel_scores = sel_base + glogp
            if cfg.diversity_penalty > 0 and chosen_here:
                penalty = glogp.new_zeros(vocab_size)
                for token, count in chosen_here.items():
                    penalty[token] = cfg.diversity_penalty * count
                sel_scores = sel_scores - penalty.unsqueeze(0)
            flat = sel_scores.flatten()
            k = min(group.need, int(torch.isfinite(flat).sum()))
            if k == 0:
                group.active = []
                continue
            top = torch.topk(flat, k)
            next_active: list[tuple[tuple[int, ...], float, float]] = []
            for rank in range(k):
                idx = int(top.indices[rank])
                beam, token = divmod(idx, vocab_size)
                seq = group.active[beam][0] + (token,)
                raw = float(raw_scores[beam, token])
                sel = float(top.values[rank])
                chosen_here[token] += 1
                if token == EOS_ID:
                    group.finished.append(Hypothesis(tokens=seq[1:-1], log_score=raw, truncated=False))
                    group.need -= 1
                else:
                    next_active.append((seq, raw, sel))
            group.active = next_active

    for group in groups:
        for seq, raw, _ in group.active:
            group.finished.append(Hypothesis(tokens=seq[1:], log_score=raw, truncated=True))
    merged = [h for g in groups for h in g.finished]
    merged.sort(key=lambda h: (-h.log_score, h.tokens))
    return merged


def oracle_score(candidate: Sequence, knowledge: Sequence) -> int:
    """Raw LCS length of the candidate against the knowledge sequence."""
    return lcs_length(candidate, knowledge)


@dataclass(frozen=True)
class MinedNegative:
    tokens: tuple[str, ...]
    oracle: int
    log_score: float


@dataclass(frozen=True)
class HardNegativePool:
    example_id: str
    candidates: tuple[MinedNegative, ...]  # deduplicated, ranked best-first
    retained: tuple[MinedNegative, ...]  # top m
    shortfall: int = 0


def mine_hard_negatives(
    degenerator: Seq2SeqModel,
    example: DialogueExample,
    vocab: Vocabulary,
    cfg: GroupBeamConfig,
    m: int,
) -> HardNegativePool:
    """Search the degenerator, score by LCS against gold knowledge, keep top m."""
    if m > cfg.beam_size:
        raise ParameterError(f"m={m} cannot exceed beam_size={cfg.beam_size}")
    source_ids, kmask = build_source(example, vocab, degenerator.config.max_source_len)
    encoding = degenerator.encode_source(source_ids, kmask)
    hyps = group_beam_search(degenerator, encoding, cfg)

    gold = example.gold_knowledge
    seen: dict[tuple[str, ...], MinedNegative] = {}
    for h in hyps:
        tokens = tuple(vocab.decode(h.tokens))
        if tokens in seen:
            continue
        seen[tokens] = MinedNegative(
            tokens=tokens, oracle=oracle_score(tokens, gold), log_score=h.log_score
        )
    ranked = sorted(seen.values(), key=lambda c: (-c.oracle, -c.log_score, c.tokens))
    return HardNegativePool(
        example_id=example.example_id,
        candidates=tuple(ranked),
        retained=tuple(ranked[:m]),
        shortfall=max(0, m - len(ranked)),
    )


# --------------------------------------------------------------------------
# Cache: one JSONL line per example, keyed by the degenerator checkpoint hash
# --------------------------------------------------------------------------


def save_negative_cache(
    pools: Sequence[HardNegativePool], degenerator_hash: str, path: str | Path
) -> None:
    write_jsonl(
        path,
        [
            {
                "id": pool.example_id,
                "negatives": [
                    {"tokens": list(n.tokens), "oracle": n.oracle, "log_score": n.log_score}
                    for n in pool.retained
                ],
                "degenerator_hash": degenerator_hash,
            }
            for pool in pools
        ],
    )


def load_negative_cache(path: str | Path, expected_hash: str) -> dict[str, HardNegativePool]:
    pools: dict[str, HardNegativePool] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", line=line_no) from exc
            if rec.get("degenerator_hash") != expected_hash:
                raise StaleCacheError(
                    f"{path}: cache mined with degenerator {rec.get('degenerator_hash')!r}, "
                    f"expected {expected_hash!r}"
                )
            negatives = tuple(
                MinedNegative(tuple(n["tokens"]), int(n["oracle"]), float(n["log_score"]))
                for n in rec["negatives"]
            )
            pools[rec["id"]] = HardNegativePool(
                example_id=rec["id"], candidates=negatives, retained=negatives
            )
    return pools
