"""Two-phase training loop and run bookkeeping.

Phase 1 trains a model with plain likelihood until validation loss stops
improving; the checkpoint is frozen and becomes the degenerator.  Phase 2
trains the contrastive model: per batch, the token-level loss penalizes
each step's strongest knowledge-token distractor, m hard negatives per
example are mined from the frozen degenerator (memoized, optionally
persisted to a cache file), and an InfoNCE term separates the source
representation from in-batch and mined targets.  Objectives `mle` and
`nt` run as single-phase baselines.

Every step appends one JSON trace line; run.json holds epoch losses, the
selected checkpoint, and validation PoD/KUD.  Paths inside run.json are
relative to the run directory so that identical deterministic runs are
byte-identical.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from .corpus import EOS_ID, Corpus, Vocabulary
from .decoding import DecodeConfig, decode_corpus
from .errors import NumericError, ParameterError, ValidationError
from .ioutil import atomic_write_text, write_json
from .losses import (
    SeqLossConfig,
    TokenLossConfig,
    final_loss,
    infonce_seq_loss,
    mle_loss,
    token_contrastive_loss,
    ul_loss_baseline,
)
from .metrics import MetricsReport, build_report
from .model import (
    ModelConfig,
    Seq2SeqModel,
    build_source,
    checkpoint_sha256,
    knowledge_token_ids,
    load_checkpoint,
    save_checkpoint,
)
from .sampling import (
    GroupBeamConfig,
    HardNegativePool,
    load_negative_cache,
    mine_hard_negatives,
    save_negative_cache,
)

OBJECTIVES = ("mle", "nt", "macl")
_RESERVED_ID_SET = frozenset(range(5))


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "mle"
    learning_rate: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 15
    patience: int = 3
    alpha: float = 4.0
    lam: float = 1.0
    mu: float = 2.0
    beam_size: int = 32
    num_groups: int = 8
    diversity_penalty: float = 0.5
    num_negatives: int = 16
    candidate_rule: str = "argmax_knowledge"
    seed: int = 0
    from_scratch: bool = False
    deterministic: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("batch_size", "max_epochs", "patience", "beam_size", "num_negatives"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.num_negatives > self.beam_size:
            raise ParameterError(
                f"num_negatives={self.num_negatives} cannot exceed beam_size={self.beam_size}"
            )

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale profile: converges in minutes on a laptop CPU."""
        base = dict(
            learning_rate=1e-3,
            batch_size=16,
            max_epochs=12,
            patience=3,
            beam_size=8,
            num_groups=8,
            num_negatives=4,
        )
        base.update(overrides)
        return cls(**base)

    def group_beam_config(self, max_target_len: int) -> GroupBeamConfig:
        return GroupBeamConfig(
            beam_size=self.beam_size,
            num_groups=self.num_groups,
            diversity_penalty=self.diversity_penalty,
            max_target_len=max_target_len,
        )


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class RunRecord:
    objective: str
    config: dict
    model_config: dict
    epochs: list[EpochStats]
    best_epoch: int
    best_checkpoint: str
    trace_path: str
    val_pod: float | None = None
    val_kud: float | None = None
    degenerator_checkpoint: str | None = None
    degenerator_epochs: list[EpochStats] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "objective": self.objective,
            "config": self.config,
            "model_config": self.model_config,
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_checkpoint": self.best_checkpoint,
            "trace": self.trace_path,
            "val_pod": self.val_pod,
            "val_kud": self.val_kud,
            "degenerator_checkpoint": self.degenerator_checkpoint,
            "degenerator_epochs": [asdict(e) for e in self.degenerator_epochs],
        }


@dataclass
class _Item:
    example_id: str
    source_ids: list[int]
    target_ids: list[int]
    knowledge_ids: set[int]


def _prepare_items(corpus: Corpus, vocab: Vocabulary, model_config: ModelConfig) -> list[_Item]:
    items = []
    for ex in corpus:
        source_ids, _ = build_source(ex, vocab, model_config.max_source_len)
        target = vocab.encode(ex.response)[: model_config.max_target_len] + [EOS_ID]
        items.append(
            _Item(
                example_id=ex.example_id,
                source_ids=source_ids,
                target_ids=target,
                knowledge_ids=knowledge_token_ids(ex, vocab),
            )
        )
    return items


class _NegativeSource:
    """Hard negatives for phase 2: mined lazily per batch and memoized.

    The degenerator is frozen, so per-batch online mining and an offline
    cache produce identical pools; a cache file keyed by the degenerator
    hash skips the search entirely on later runs.
    """

    def __init__(
        self,
        degenerator: Seq2SeqModel,
        degenerator_hash: str,
        vocab: Vocabulary,
        beam_cfg: GroupBeamConfig,
        m: int,
        cache_path: Path | None = None,
    ):
        self.degenerator = degenerator
        self.degenerator_hash = degenerator_hash
        self.vocab = vocab
        self.beam_cfg = beam_cfg
        self.m = m
        self.cache_path = cache_path
        self.pools: dict[str, HardNegativePool] = {}
        self._cache_dirty = False
        if cache_path is not None and cache_path.exists():
            self.pools = load_negative_cache(cache_path, degenerator_hash)

    def negatives_for(self, corpus_by_id: dict, example_ids: Sequence[str]) -> dict[str, list[list[int]]]:
        out: dict[str, list[list[int]]] = {}
        for ex_id in example_ids:
            pool = self.pools.get(ex_id)
            if pool is None:
                pool = mine_hard_negatives(
                    self.degenerator, corpus_by_id[ex_id], self.vocab, self.beam_cfg, self.m
                )
                self.pools[ex_id] = pool
                self._cache_dirty = True
            out[ex_id] = [
                self.vocab.encode(n.tokens) + [EOS_ID] for n in pool.retained[: self.m]
            ]
        return out

    def flush_cache(self) -> None:
        if self.cache_path is not None and self._cache_dirty:
            ordered = [self.pools[k] for k in sorted(self.pools)]
            save_negative_cache(ordered, self.degenerator_hash, self.cache_path)
            self._cache_dirty = False


def _batch_objective(
    model: Seq2SeqModel,
    batch: list[_Item],
    objective: str,
    config: TrainConfig,
    negatives: dict[str, list[list[int]]] | None,
) -> tuple[torch.Tensor, dict]:
    """Mean-over-batch loss plus the detached pieces for the trace line."""
    out = model.forward_batch([it.source_ids for it in batch], [it.target_ids for it in batch])
    token_terms = []
    mle_total = 0.0
    penalty_total = 0.0
    skipped = 0
    for i, item in enumerate(batch):
        probs = out.probs[i, : len(item.target_ids)]
        if objective == "mle":
            term = mle_loss(probs, item.target_ids)
            mle_total += float(term.detach())
        elif objective == "nt":
            term = ul_loss_baseline(
                probs,
                item.target_ids,
                item.source_ids,
                alpha=config.alpha,
                exclude_ids=_RESERVED_ID_SET,
            )
            with torch.no_grad():
                m = float(mle_loss(probs, item.target_ids))
            mle_total += m
            penalty_total += float(term.detach()) - m
            source_set = set(item.source_ids) - _RESERVED_ID_SET
            skipped += sum(
                1
                for t, y in enumerate(item.target_ids)
                if not ((source_set | set(item.target_ids[:t])) - {y} - _RESERVED_ID_SET)
            )
        else:  # macl
            term, candidates = token_contrastive_loss(
                probs,
                item.target_ids,
                item.knowledge_ids,
                TokenLossConfig(alpha=config.alpha, candidate_rule=config.candidate_rule),
            )
            with torch.no_grad():
                m = float(mle_loss(probs, item.target_ids))
            mle_total += m
            penalty_total += float(term.detach()) - m
            skipped += candidates.n_skipped
        token_terms.append(term)
    token_batch = torch.stack(token_terms).mean()

    seq_batch = token_batch.new_zeros(())
    if objective == "macl":
        neg_targets: list[list[int]] = []
        neg_sources: list[list[int]] = []
        slices: list[tuple[int, int]] = []
        for item in batch:
            mined = (negatives or {}).get(item.example_id, [])
            start = len(neg_targets)
            neg_targets.extend(mined)
            neg_sources.extend([item.source_ids] * len(mined))
            slices.append((start, len(neg_targets)))
        hard_pooled = (
            model.target_representations(neg_sources, neg_targets) if neg_targets else None
        )
        seq_cfg = SeqLossConfig(lam=config.lam, mu=config.mu)
        seq_terms = []
        for i, item in enumerate(batch):
            others = [out.target_pooled[j] for j in range(len(batch)) if j != i]
            start, end = slices[i]
            hard = hard_pooled[start:end] if hard_pooled is not None and end > start else None
            seq_terms.append(
                infonce_seq_loss(out.source_pooled[i], out.target_pooled[i], others, hard, seq_cfg)
            )
        seq_batch = torch.stack(seq_terms).mean()

    lam = config.lam if objective == "macl" else 0.0
    total = final_loss(token_batch, seq_batch, lam)
    # logged pieces compose exactly: final == mle + token_penalty + lam * seq
    mle_part = mle_total / len(batch)
    penalty_part = penalty_total / len(batch)
    seq_part = float(seq_batch.detach())
    parts = {
        "mle": mle_part,
        "token_penalty": penalty_part,
        "seq": seq_part,
        "final": mle_part + penalty_part + lam * seq_part,
        "n_candidates_skipped": skipped,
    }
    return total, parts


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool) -> list[list[int]]:
    order = list(range(n))
    if shuffle:
        random.Random(f"{seed}:{epoch}").shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _train_phase(
    model: Seq2SeqModel,
    items_train: list[_Item],
    items_valid: list[_Item],
    objective: str,
    config: TrainConfig,
    trace_lines: list[dict],
    negative_source: _NegativeSource | None = None,
    corpus_by_id: dict | None = None,
) -> tuple[list[EpochStats], int]:
    """Optimize until validation loss stalls for `patience` epochs."""
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    best_val = math.inf
    best_epoch = 0
    best_state: dict | None = None
    stale = 0
    stats: list[EpochStats] = []
    step = 0

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        train_loss = 0.0
        batches = _epoch_batches(len(items_train), config.batch_size, config.seed, epoch, shuffle=True)
        for batch_idx in batches:
            batch = [items_train[i] for i in batch_idx]
            negatives = None
            if objective == "macl" and negative_source is not None:
                negatives = negative_source.negatives_for(corpus_by_id, [it.example_id for it in batch])
            loss, parts = _batch_objective(model, batch, objective, config, negatives)
            if not math.isfinite(parts["final"]):
                raise NumericError(
                    f"{objective} training diverged at epoch {epoch} step {step}: loss={parts['final']}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            trace_lines.append({"step": step, **parts})
            train_loss += parts["final"]
        train_loss /= max(len(batches), 1)

        val_loss = evaluate_loss(model, items_valid, objective, config, negative_source, corpus_by_id)
        stats.append(EpochStats(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    return stats, best_epoch


def evaluate_loss(
    model: Seq2SeqModel,
    items: list[_Item],
    objective: str,
    config: TrainConfig,
    negative_source: _NegativeSource | None = None,
    corpus_by_id: dict | None = None,
) -> float:
    """Mean objective value over a split, batched in corpus order."""
    if not items:
        raise ValidationError("cannot evaluate on an empty split")
    model.eval()
    total = 0.0
    batches = _epoch_batches(len(items), config.batch_size, config.seed, 0, shuffle=False)
    with torch.no_grad():
        for batch_idx in batches:
            batch = [items[i] for i in batch_idx]
            negatives = None
            if objective == "macl" and negative_source is not None:
                negatives = negative_source.negatives_for(corpus_by_id, [it.example_id for it in batch])
            _, parts = _batch_objective(model, batch, objective, config, negatives)
            total += parts["final"] * len(batch)
    return total / len(items)


def _write_trace(path: Path, lines: list[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(l, sort_keys=True) + "\n" for l in lines))


def force_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def train_degenerator(
    train_corpus: Corpus,
    valid_corpus: Corpus,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: str | Path,
) -> tuple[Path, list[EpochStats], int]:
    """Phase 1: likelihood-only training; the checkpoint is saved frozen."""
    if len(train_corpus) == 0:
        raise ValidationError("train split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.deterministic:
        force_determinism()
    vocab = Vocabulary.from_corpus(train_corpus)
    model_config = replace(model_config, vocab_size=len(vocab), seed=config.seed)
    model = Seq2SeqModel(model_config)
    items_train = _prepare_items(train_corpus, vocab, model_config)
    items_valid = _prepare_items(valid_corpus, vocab, model_config)
    trace: list[dict] = []
    stats, best_epoch = _train_phase(model, items_train, items_valid, "mle", config, trace)
    _write_trace(out_dir / "degenerator_trace.jsonl", trace)
    path = out_dir / "degenerator.ckpt"
    save_checkpoint(model, vocab, path, frozen=True)
    return path, stats, best_epoch


def run_training(
    train_corpus: Corpus,
    valid_corpus: Corpus,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: str | Path,
    degenerator_path: str | Path | None = None,
    negatives_cache: str | Path | None = None,
    negatives_cache_dir: str | Path | None = None,
    eval_decode: DecodeConfig | None = None,
) -> RunRecord:
    """Train one objective end to end and write run artifacts to out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.deterministic:
        force_determinism()
    if len(train_corpus) == 0:
        raise ValidationError("train split is empty")

    vocab = Vocabulary.from_corpus(train_corpus)
    model_config = replace(model_config, vocab_size=len(vocab), seed=config.seed)
    items_train = _prepare_items(train_corpus, vocab, model_config)
    items_valid = _prepare_items(valid_corpus, vocab, model_config)

    degen_ckpt_rel: str | None = None
    degen_stats: list[EpochStats] = []
    negative_source: _NegativeSource | None = None
    corpus_by_id = train_corpus.by_id() | valid_corpus.by_id()

    if config.objective == "macl":
        if degenerator_path is None:
            degenerator_path, degen_stats, _ = train_degenerator(
                train_corpus, valid_corpus, model_config, config, out_dir
            )
            degen_ckpt_rel = "degenerator.ckpt"
        else:
            degenerator_path = Path(degenerator_path)
            degen_ckpt_rel = str(degenerator_path)
        degenerator, _, _ = load_checkpoint(degenerator_path, expected_vocab=vocab)
        degenerator.eval()
        degenerator.requires_grad_(False)
        degenerator_hash = checkpoint_sha256(degenerator_path)
        cache_path = Path(negatives_cache) if negatives_cache else None
        if cache_path is None and negatives_cache_dir is not None:
            # hash-keyed name: a retrained degenerator never sees a stale file
            cache_path = Path(negatives_cache_dir) / f"negatives-{degenerator_hash[:16]}.jsonl"
        negative_source = _NegativeSource(
            degenerator=degenerator,
            degenerator_hash=degenerator_hash,
            vocab=vocab,
            beam_cfg=config.group_beam_config(model_config.max_target_len),
            m=config.num_negatives,
            cache_path=cache_path,
        )
        model = Seq2SeqModel(model_config)
        if not config.from_scratch:
            model.load_state_dict(degenerator.state_dict())
    else:
        model = Seq2SeqModel(model_config)

    trace: list[dict] = []
    stats, best_epoch = _train_phase(
        model,
        items_train,
        items_valid,
        config.objective,
        config,
        trace,
        negative_source=negative_source,
        corpus_by_id=corpus_by_id,
    )
    if negative_source is not None:
        negative_source.flush_cache()
    _write_trace(out_dir / "trace.jsonl", trace)
    ckpt_path = out_dir / "model.ckpt"
    save_checkpoint(model, vocab, ckpt_path, frozen=False)

    val_pod = val_kud = None
    if len(valid_corpus) > 0:
        report = evaluate_run(model, vocab, valid_corpus, eval_decode or DecodeConfig())
        val_pod = report.generated.pod
        val_kud = report.kud

    record = RunRecord(
        objective=config.objective,
        config=asdict(config),
        model_config=asdict(model_config),
        epochs=stats,
        best_epoch=best_epoch,
        best_checkpoint="model.ckpt",
        trace_path="trace.jsonl",
        val_pod=val_pod,
        val_kud=val_kud,
        degenerator_checkpoint=degen_ckpt_rel,
        degenerator_epochs=degen_stats,
    )
    write_json(out_dir / "run.json", record.as_dict())
    return record


def evaluate_run(
    model: Seq2SeqModel,
    vocab: Vocabulary,
    corpus_split: Corpus,
    decode_config: DecodeConfig,
    reference_corpus: Corpus | None = None,
) -> MetricsReport:
    """Decode a split and score it against references (the split itself by default)."""
    model.eval()
    generations = decode_corpus(model, vocab, list(corpus_split), decode_config)
    return build_report(reference_corpus or corpus_split, generations)


def default_sweep_configs(max_target_len: int = 24) -> dict[str, DecodeConfig]:
    return {
        "beam-3": DecodeConfig(strategy="beam", beam_size=3, max_target_len=max_target_len),
        "beam-5": DecodeConfig(strategy="beam", beam_size=5, max_target_len=max_target_len),
        "greedy": DecodeConfig(strategy="greedy", max_target_len=max_target_len),
        "nucleus-0.9": DecodeConfig(strategy="nucleus", nucleus_p=0.9, max_target_len=max_target_len),
    }


def evaluate_sweep(
    model: Seq2SeqModel,
    vocab: Vocabulary,
    corpus_split: Corpus,
    configs: dict[str, DecodeConfig] | None = None,
) -> dict[str, MetricsReport]:
    configs = configs or default_sweep_configs(model.config.max_target_len)
    return {name: evaluate_run(model, vocab, corpus_split, cfg) for name, cfg in configs.items()}
