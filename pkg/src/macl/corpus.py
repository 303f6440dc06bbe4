"""Dialogue data model, tokenization, JSONL serialization, synthetic corpus.

A corpus is a list of grounded dialogue turns: context utterances, a small
knowledge pool, the index of the gold knowledge sentence, and a reference
response.  Sequences are stored as tuples of lowercase surface tokens; ids
only exist at model-input time (see `Vocabulary.encode`).

The synthetic generator builds corpora in which a configurable fraction of
references embed a long verbatim span of the gold knowledge sentence, so a
likelihood-trained model can discover the copy shortcut.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, NamedTuple, Sequence

from .errors import CorpusFormatError, ParameterError, ValidationError
from .ioutil import write_jsonl

PAD_ID, BOS_ID, EOS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3, 4
RESERVED_SURFACES = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")

_PUNCT = set(string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel edge punctuation into own tokens."""
    tokens: list[str] = []
    for chunk in text.lower().split():
        lead: list[str] = []
        trail: list[str] = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        while chunk and chunk[-1] in _PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(trail))
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    """Inverse of tokenize up to whitespace: punctuation glues to the left."""
    parts: list[str] = []
    for tok in tokens:
        if parts and all(ch in _PUNCT for ch in tok):
            parts[-1] += tok
        else:
            parts.append(tok)
    return " ".join(parts)


class Token(NamedTuple):
    surface: str
    id: int


class Vocabulary:
    """Ordered surface list with the five reserved entries at ids 0..4."""

    def __init__(self, content_surfaces: Sequence[str]):
        surfaces = list(RESERVED_SURFACES) + list(content_surfaces)
        index: dict[str, int] = {}
        for i, s in enumerate(surfaces):
            if not s:
                raise ValidationError("empty surface in vocabulary")
            if s in index:
                raise ValidationError(f"duplicate surface in vocabulary: {s!r}")
            index[s] = i
        self.surfaces: tuple[str, ...] = tuple(surfaces)
        self._index = index

    def __len__(self) -> int:
        return len(self.surfaces)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.surfaces == other.surfaces

    def id_of(self, surface: str) -> int:
        return self._index.get(surface, UNK_ID)

    def token(self, token_id: int) -> Token:
        if not 0 <= token_id < len(self.surfaces):
            from .errors import VocabularyError

            raise VocabularyError(f"token id {token_id} out of range (size {len(self)})")
        return Token(self.surfaces[token_id], token_id)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.token(i).surface for i in ids]

    @property
    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.surfaces).encode("utf-8")).hexdigest()

    @classmethod
    def from_corpus(cls, corpus: "Corpus") -> "Vocabulary":
        seen: set[str] = set()
        for ex in corpus:
            for turn in ex.context_turns:
                seen.update(turn)
            for sent in ex.knowledge_pool:
                seen.update(sent)
            seen.update(ex.response)
        return cls(sorted(seen - set(RESERVED_SURFACES)))


def _check_no_reserved(seq: Sequence[str], what: str, example_id: str) -> None:
    bad = set(seq) & set(RESERVED_SURFACES)
    if bad:
        raise ValidationError(f"example {example_id!r}: reserved token {sorted(bad)} in {what}")


@dataclass(frozen=True)
class DialogueExample:
    example_id: str
    context_turns: tuple[tuple[str, ...], ...]
    knowledge_pool: tuple[tuple[str, ...], ...]
    gold_knowledge_index: int
    response: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "context_turns", tuple(tuple(t) for t in self.context_turns))
        object.__setattr__(self, "knowledge_pool", tuple(tuple(s) for s in self.knowledge_pool))
        object.__setattr__(self, "response", tuple(self.response))
        if not self.example_id:
            raise ValidationError("example_id must be non-empty")
        if not self.knowledge_pool:
            raise ValidationError(f"example {self.example_id!r}: empty knowledge pool")
        if not 0 <= self.gold_knowledge_index < len(self.knowledge_pool):
            raise ValidationError(
                f"example {self.example_id!r}: gold_knowledge_index "
                f"{self.gold_knowledge_index} out of range for pool of "
                f"{len(self.knowledge_pool)}"
            )
        if not self.response:
            raise ValidationError(f"example {self.example_id!r}: empty response")
        for turn in self.context_turns:
            _check_no_reserved(turn, "context", self.example_id)
        for sent in self.knowledge_pool:
            _check_no_reserved(sent, "knowledge", self.example_id)
        _check_no_reserved(self.response, "response", self.example_id)

    @property
    def gold_knowledge(self) -> tuple[str, ...]:
        return self.knowledge_pool[self.gold_knowledge_index]


@dataclass(frozen=True)
class Corpus:
    examples: tuple[DialogueExample, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        seen: set[str] = set()
        for ex in self.examples:
            if ex.example_id in seen:
                raise ValidationError(f"duplicate example_id {ex.example_id!r}")
            seen.add(ex.example_id)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[DialogueExample]:
        return iter(self.examples)

    def by_id(self) -> dict[str, DialogueExample]:
        return {ex.example_id: ex for ex in self.examples}


@dataclass(frozen=True)
class GenerationRecord:
    example_id: str
    generated_response: tuple[str, ...]
    decoder: str
    params: dict[str, Any] = field(default_factory=dict)
    log_score: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "generated_response", tuple(self.generated_response))


_REQUIRED_KEYS = ("id", "context", "knowledge_pool", "gold_knowledge_index", "response")


def _example_from_record(rec: dict[str, Any], line_no: int) -> DialogueExample:
    for key in _REQUIRED_KEYS:
        if key not in rec:
            raise CorpusFormatError(f"missing key {key!r}", line=line_no)
    if not isinstance(rec["context"], list) or not isinstance(rec["knowledge_pool"], list):
        raise CorpusFormatError("context and knowledge_pool must be lists", line=line_no)
    return DialogueExample(
        example_id=str(rec["id"]),
        context_turns=tuple(tuple(tokenize(t)) for t in rec["context"]),
        knowledge_pool=tuple(tuple(tokenize(s)) for s in rec["knowledge_pool"]),
        gold_knowledge_index=int(rec["gold_knowledge_index"]),
        response=tuple(tokenize(rec["response"])),
    )


def load_corpus(path: str | Path, split: str | None = None) -> Corpus:
    """Read a JSONL corpus; errors carry the 1-based line number."""
    path = Path(path)
    examples: list[DialogueExample] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", line=line_no) from exc
            if not isinstance(rec, dict):
                raise CorpusFormatError("each line must be a JSON object", line=line_no)
            examples.append(_example_from_record(rec, line_no))
    return Corpus(tuple(examples), split=split or path.stem)


def corpus_records(corpus: Corpus) -> list[dict[str, Any]]:
    return [
        {
            "id": ex.example_id,
            "context": [detokenize(t) for t in ex.context_turns],
            "knowledge_pool": [detokenize(s) for s in ex.knowledge_pool],
            "gold_knowledge_index": ex.gold_knowledge_index,
            "response": detokenize(ex.response),
        }
        for ex in corpus
    ]


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    write_jsonl(path, corpus_records(corpus))


def save_generations(records: Sequence[GenerationRecord], path: str | Path) -> None:
    write_jsonl(
        path,
        [
            {
                "id": r.example_id,
                "generated": detokenize(r.generated_response),
                "decoder": r.decoder,
                "params": r.params,
                "log_score": r.log_score,
            }
            for r in records
        ],
    )


def load_generations(path: str | Path) -> list[GenerationRecord]:
    path = Path(path)
    out: list[GenerationRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON ({exc.msg})", line=line_no) from exc
            for key in ("id", "generated", "decoder"):
                if key not in rec:
                    raise CorpusFormatError(f"missing key {key!r}", line=line_no)
            out.append(
                GenerationRecord(
                    example_id=str(rec["id"]),
                    generated_response=tuple(tokenize(rec["generated"])),
                    decoder=str(rec["decoder"]),
                    params=dict(rec.get("params", {})),
                    log_score=float(rec.get("log_score", 0.0)),
                )
            )
    return out


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------

_OPENERS: tuple[tuple[str, ...], ...] = (
    (),
    ("oh", ","),
    ("yes", ","),
    ("well", ","),
    ("i", "see", ","),
)

_SYNTH_PUNCT = (".", ",", "!", "?")


def synthetic_word_list(n_words: int) -> list[str]:
    """Deterministic pseudo-word list (two-syllable CV combinations)."""
    syllables = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]
    words: list[str] = []
    for a in syllables:
        for b in syllables:
            words.append(a + b)
            if len(words) == n_words:
                return words
    raise ParameterError(f"cannot build {n_words} distinct synthetic words")


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    # local copy to keep corpus importable without the metrics module
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def _sentence(rng: random.Random, words: Sequence[str], lo: int, hi: int, end: str = ".") -> tuple[str, ...]:
    return tuple(rng.choices(words, k=rng.randint(lo, hi))) + (end,)


def _shortcut_response(rng: random.Random, gold: tuple[str, ...]) -> tuple[str, ...]:
    # verbatim contiguous span covering >= 60% of the gold sentence
    span_len = max(1, math.ceil(rng.uniform(0.6, 1.0) * len(gold)))
    start = rng.randint(0, len(gold) - span_len)
    span = gold[start : start + span_len]
    opener = rng.choice(_OPENERS)
    if len(opener) * 2 > span_len:
        opener = ()
    response = opener + span
    if response[-1] not in _SYNTH_PUNCT:
        response = response + (".",)
    if _lcs_len(gold, response) / len(response) < 0.6:
        response = span if span[-1] in _SYNTH_PUNCT else span + (".",)
    return response


def _paraphrase_response(
    rng: random.Random, gold: tuple[str, ...], words: Sequence[str]
) -> tuple[str, ...]:
    """Reordered/substituted rewrite: unigram overlap near 0.5, low span overlap."""
    gold_core = [t for t in gold if t not in _SYNTH_PUNCT]
    gold_set = set(gold)
    fresh_pool = [w for w in words if w not in gold_set]
    for attempt in range(64):
        length = rng.randint(8, 12)
        target_kp = rng.uniform(0.42, 0.58)
        n_gold = max(2, round((length + 1) * target_kp) - 1)
        n_gold = min(n_gold, len(gold_core), length - 2)
        picked = rng.sample(gold_core, n_gold)
        mixed = picked + rng.choices(fresh_pool, k=length - n_gold)
        rng.shuffle(mixed)
        response = tuple(mixed) + (".",)
        kp1 = sum(1 for t in response if t in gold_set) / len(response)
        plcs = _lcs_len(gold, response) / len(response)
        if plcs < 0.6 and 0.35 <= kp1 <= 0.65:
            return response
    return response  # last attempt; bounds hold in practice long before 64 tries


def generate_synthetic(
    seed: int,
    n_examples: int,
    vocab_size: int = 160,
    shortcut_rate: float = 0.9,
    split: str = "train",
) -> Corpus:
    """Build a deterministic corpus that rewards the copy shortcut.

    Each example has a 2-turn context and a 4-sentence knowledge pool.  With
    probability `shortcut_rate` the reference embeds a contiguous span of the
    gold sentence (span fraction >= 0.6 of the response); otherwise it is a
    reordered/substituted paraphrase with unigram overlap around 0.5.

    Example material is drawn from per-example substreams, so raising
    `shortcut_rate` only flips paraphrase references to copy references and
    never perturbs other examples.
    """
    if not 0.0 <= shortcut_rate <= 1.0:
        raise ParameterError(f"shortcut_rate must be in [0, 1], got {shortcut_rate}")
    if vocab_size < 50:
        raise ParameterError(f"vocab_size must be >= 50, got {vocab_size}")
    if n_examples < 1:
        raise ParameterError(f"n_examples must be >= 1, got {n_examples}")

    n_content = vocab_size - len(RESERVED_SURFACES) - len(_SYNTH_PUNCT)
    words = synthetic_word_list(n_content)
    examples: list[DialogueExample] = []
    for i in range(n_examples):
        rng = random.Random(f"{seed}:{i}:material")
        pool = tuple(_sentence(rng, words, 8, 12) for _ in range(4))
        gold_idx = rng.randrange(4)
        context = (
            _sentence(rng, words, 4, 8, end=rng.choice((".", "?"))),
            _sentence(rng, words, 4, 8, end=rng.choice((".", "?"))),
        )
        resp_rng = random.Random(f"{seed}:{i}:response")
        if resp_rng.random() < shortcut_rate:
            response = _shortcut_response(resp_rng, pool[gold_idx])
        else:
            response = _paraphrase_response(resp_rng, pool[gold_idx], words)
        examples.append(
            DialogueExample(
                example_id=f"syn-{seed}-{i:05d}",
                context_turns=context,
                knowledge_pool=pool,
                gold_knowledge_index=gold_idx,
                response=response,
            )
        )
    return Corpus(tuple(examples), split=split)
