"""Degeneration and knowledge-utilization metrics.

All metrics compare a knowledge token sequence k against a response token
sequence y:

  lcs_length   exact longest common subsequence length (not contiguous)
  plcs         |LCS(k, y)| / |y|
  dup_n        fraction of pairs whose n-gram sets intersect
  kp_n         response n-grams found in the knowledge n-gram set, counted
               with multiplicity, divided by the response n-gram count
  mkp_n        mean kp_n over pairs with |y| >= n
  pod          fraction of pairs with plcs strictly above 0.7
  kud          100 x mean absolute difference between two KP histograms

Pairs too short for an n-gram order contribute 0 to dup_n and are excluded
from kp_n aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple, Sequence

from .corpus import Corpus, GenerationRecord
from .errors import AlignmentError, UndefinedMetricError, ValidationError

N_HIST_BINS = 10


class KnowledgeResponsePair(NamedTuple):
    knowledge: tuple[str, ...]
    response: tuple[str, ...]


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length via the classic O(|a||b|) DP."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        append = cur.append
        for j, y in enumerate(b, start=1):
            if x == y:
                append(prev[j - 1] + 1)
            else:
                left = cur[j - 1]
                up = prev[j]
                append(left if left >= up else up)
        prev = cur
    return prev[-1]


def ngrams(seq: Sequence[str], n: int) -> list[tuple[str, ...]]:
    if n < 1:
        raise ValidationError(f"n-gram order must be >= 1, got {n}")
    return [tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)]


def plcs(pair: KnowledgeResponsePair) -> float:
    if not pair.response:
        raise UndefinedMetricError("plcs is undefined for an empty response")
    return lcs_length(pair.knowledge, pair.response) / len(pair.response)


def dup_n(pairs: Sequence[KnowledgeResponsePair], n: int) -> float:
    if not pairs:
        raise UndefinedMetricError("dup_n is undefined for an empty corpus")
    hits = 0
    for k, y in pairs:
        if len(k) >= n and len(y) >= n and set(ngrams(k, n)) & set(ngrams(y, n)):
            hits += 1
    return hits / len(pairs)


def kp_n(pair: KnowledgeResponsePair, n: int) -> float:
    k, y = pair
    if len(y) < n:
        raise UndefinedMetricError(f"kp_{n} is undefined for a response of {len(y)} tokens")
    knowledge_grams = set(ngrams(k, n))
    response_grams = ngrams(y, n)
    return sum(1 for g in response_grams if g in knowledge_grams) / len(response_grams)


def mkp_n(pairs: Sequence[KnowledgeResponsePair], n: int) -> float:
    eligible = [p for p in pairs if len(p.response) >= n]
    if not eligible:
        raise UndefinedMetricError(f"mkp_{n}: no pair has a response of at least {n} tokens")
    return sum(kp_n(p, n) for p in eligible) / len(eligible)


def pod(pairs: Sequence[KnowledgeResponsePair]) -> float:
    """Proportion of degenerated pairs: plcs strictly greater than 0.7."""
    if not pairs:
        raise UndefinedMetricError("pod is undefined for an empty corpus")
    return sum(1 for p in pairs if plcs(p) > 0.7) / len(pairs)


@dataclass(frozen=True)
class KPHistogram:
    n: int
    bin_edges: tuple[float, ...]
    masses: tuple[float, ...]

    def __post_init__(self):
        if len(self.bin_edges) != len(self.masses) + 1:
            raise ValidationError("bin_edges must have one more entry than masses")
        if any(m < 0 for m in self.masses):
            raise ValidationError("histogram masses must be non-negative")
        if abs(sum(self.masses) - 1.0) > 1e-9:
            raise ValidationError(f"histogram masses sum to {sum(self.masses)}, not 1")


def kp_histogram(pairs: Sequence[KnowledgeResponsePair], n: int, bins: int = N_HIST_BINS) -> KPHistogram:
    """Histogram of per-pair kp_n over `bins` uniform bins on [0, 1]."""
    values = [kp_n(p, n) for p in pairs if len(p.response) >= n]
    if not values:
        raise UndefinedMetricError(f"kp_{n} histogram: no eligible pair")
    counts = [0] * bins
    for v in values:
        idx = min(int(v * bins), bins - 1)  # last bin right-inclusive at 1.0
        counts[idx] += 1
    edges = tuple(i / bins for i in range(bins + 1))
    return KPHistogram(n=n, bin_edges=edges, masses=tuple(c / len(values) for c in counts))


def kud(human_hist: KPHistogram, generated_hist: KPHistogram) -> float:
    """Knowledge-utilization difference: 100 x MAE between histogram masses."""
    if human_hist.bin_edges != generated_hist.bin_edges:
        raise ValidationError("histograms have different bin structures")
    diffs = [abs(h - g) for h, g in zip(human_hist.masses, generated_hist.masses)]
    return 100.0 * sum(diffs) / len(diffs)


# --------------------------------------------------------------------------
# Corpus-level report
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregateMetrics:
    n_pairs: int
    dup_16: float
    dup_32: float
    plcs_mean: float
    mkp_1: float
    mkp_2: float | None
    pod: float

    def as_dict(self) -> dict[str, Any]:
        return {
            "n_pairs": self.n_pairs,
            "dup_16": self.dup_16,
            "dup_32": self.dup_32,
            "plcs_mean": self.plcs_mean,
            "mkp_1": self.mkp_1,
            "mkp_2": self.mkp_2,
            "pod": self.pod,
        }


@dataclass(frozen=True)
class PerExampleRow:
    example_id: str
    plcs_reference: float
    kp1_reference: float
    plcs_generated: float | None
    kp1_generated: float | None


@dataclass(frozen=True)
class MetricsReport:
    reference: AggregateMetrics
    generated: AggregateMetrics
    kud: float
    histograms: dict[str, KPHistogram]
    per_example: tuple[PerExampleRow, ...]
    n_empty_generations: int
    notes: dict[str, str]

    def as_dict(self) -> dict[str, Any]:
        return {
            "reference": self.reference.as_dict(),
            "generated": self.generated.as_dict(),
            "kud": self.kud,
            "histograms": {
                name: {"n": h.n, "bin_edges": list(h.bin_edges), "masses": list(h.masses)}
                for name, h in self.histograms.items()
            },
            "n_examples": len(self.per_example),
            "n_empty_generations": self.n_empty_generations,
            "notes": self.notes,
        }


def _aggregate(pairs: Sequence[KnowledgeResponsePair], n_total: int) -> AggregateMetrics:
    try:
        mkp2 = mkp_n(pairs, 2)
    except UndefinedMetricError:
        mkp2 = None
    return AggregateMetrics(
        n_pairs=n_total,
        dup_16=dup_n(pairs, 16) * len(pairs) / n_total,
        dup_32=dup_n(pairs, 32) * len(pairs) / n_total,
        plcs_mean=sum(plcs(p) for p in pairs) / len(pairs),
        mkp_1=mkp_n(pairs, 1),
        mkp_2=mkp2,
        pod=pod(pairs),
    )


def build_report(references: Corpus, generations: Sequence[GenerationRecord]) -> MetricsReport:
    """Score generations against references; both sides share the knowledge.

    The reference side doubles as the human distribution for kud.  Empty
    generated responses are excluded from ratio metrics (they still count
    as misses for dup_n) and reported under n_empty_generations.
    """
    ref_by_id = references.by_id()
    gen_ids = [g.example_id for g in generations]
    if len(set(gen_ids)) != len(gen_ids):
        dupes = sorted({i for i in gen_ids if gen_ids.count(i) > 1})
        raise AlignmentError(f"duplicate generation ids: {dupes}")
    missing = sorted(set(ref_by_id) - set(gen_ids))
    extra = sorted(set(gen_ids) - set(ref_by_id))
    if missing or extra:
        raise AlignmentError(
            f"generations do not align with references (missing={missing[:5]}, extra={extra[:5]})"
        )
    if not generations:
        raise UndefinedMetricError("cannot build a report from an empty corpus")

    ref_pairs: list[KnowledgeResponsePair] = []
    gen_pairs: list[KnowledgeResponsePair] = []
    rows: list[PerExampleRow] = []
    n_empty = 0
    for gen in generations:
        ex = ref_by_id[gen.example_id]
        k = ex.gold_knowledge
        ref_pair = KnowledgeResponsePair(k, ex.response)
        ref_pairs.append(ref_pair)
        if gen.generated_response:
            gen_pair = KnowledgeResponsePair(k, gen.generated_response)
            gen_pairs.append(gen_pair)
            rows.append(
                PerExampleRow(
                    example_id=gen.example_id,
                    plcs_reference=plcs(ref_pair),
                    kp1_reference=kp_n(ref_pair, 1),
                    plcs_generated=plcs(gen_pair),
                    kp1_generated=kp_n(gen_pair, 1),
                )
            )
        else:
            n_empty += 1
            rows.append(
                PerExampleRow(
                    example_id=gen.example_id,
                    plcs_reference=plcs(ref_pair),
                    kp1_reference=kp_n(ref_pair, 1),
                    plcs_generated=None,
                    kp1_generated=None,
                )
            )
    if not gen_pairs:
        raise UndefinedMetricError("every generated response is empty")

    histograms = {
        "reference_kp1": kp_histogram(ref_pairs, 1),
        "generated_kp1": kp_histogram(gen_pairs, 1),
    }
    try:
        histograms["reference_kp2"] = kp_histogram(ref_pairs, 2)
        histograms["generated_kp2"] = kp_histogram(gen_pairs, 2)
    except UndefinedMetricError:
        pass

    return MetricsReport(
        reference=_aggregate(ref_pairs, len(ref_pairs)),
        generated=_aggregate(gen_pairs, len(rows)),
        kud=kud(histograms["reference_kp1"], histograms["generated_kp1"]),
        histograms=histograms,
        per_example=tuple(rows),
        n_empty_generations=n_empty,
        notes={
            "dup_short_pairs": "pairs shorter than n count as non-duplicating",
            "kp_short_pairs": "pairs shorter than n are excluded from kp aggregates",
            "empty_generations": "excluded from ratio metrics, counted in dup_n denominator",
        },
    )
