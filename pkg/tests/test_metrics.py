import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macl.corpus import Corpus, GenerationRecord
from macl.errors import AlignmentError, UndefinedMetricError, ValidationError
from macl.metrics import (
    KnowledgeResponsePair as Pair,
)
from macl.metrics import (
    KPHistogram,
    build_report,
    dup_n,
    kp_histogram,
    kp_n,
    kud,
    lcs_length,
    mkp_n,
    plcs,
    pod,
)

from conftest import example


# -- independent oracle: enumerate subsequences of the shorter sequence --------


def brute_force_lcs(a, b) -> int:
    if len(a) > len(b):
        a, b = b, a
    best = 0
    for r in range(len(a), best, -1):
        for combo in itertools.combinations(a, r):
            it = iter(b)
            if all(tok in it for tok in combo):
                return r
    return 0


def test_lcs_empty():
    assert lcs_length([], ["a", "b"]) == 0
    assert lcs_length(["a"], []) == 0


def test_lcs_hand_case():
    assert lcs_length(list("abcd"), list("axcd")) == 3
    assert brute_force_lcs(list("abcd"), list("axcd")) == 3


def test_lcs_identity():
    for s in (["x"], list("abcabc"), list("aaaa")):
        assert lcs_length(s, s) == len(s)


@given(
    st.lists(st.sampled_from("abc"), max_size=8),
    st.lists(st.sampled_from("abc"), max_size=8),
)
@settings(max_examples=300)
def test_lcs_matches_brute_force(a, b):
    assert lcs_length(a, b) == brute_force_lcs(a, b)


@given(
    st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
    st.lists(st.sampled_from("abcd"), max_size=4),
    st.lists(st.sampled_from("abcd"), max_size=4),
)
@settings(max_examples=150)
def test_lcs_monotone_under_supersequence(y, prefix, suffix):
    k = y[:3]
    k_super = prefix + k + suffix
    assert lcs_length(k_super, y) >= lcs_length(k, y)


# -- plcs ----------------------------------------------------------------------


def test_plcs_identity():
    s = ("a", "b", "c")
    assert plcs(Pair(s, s)) == 1.0


def test_plcs_hand_case():
    k = ("the", "cat", "sat")
    y = ("the", "dog", "sat")
    assert brute_force_lcs(k, y) == 2
    assert plcs(Pair(k, y)) == pytest.approx(2 / 3)


def test_plcs_disjoint():
    assert plcs(Pair(("a", "b"), ("x", "y"))) == 0.0


def test_plcs_empty_response_undefined():
    with pytest.raises(UndefinedMetricError):
        plcs(Pair(("a",), ()))


# -- dup_n -----------------------------------------------------------------------


def test_dup_n_bigram_hit_trigram_miss():
    k = ("a", "b", "c", "d")
    y = ("x", "a", "b", "y")
    assert dup_n([Pair(k, y)], 2) == 1.0
    assert dup_n([Pair(k, y)], 3) == 0.0


def test_dup_n_identical_pairs():
    pairs = [Pair(("a", "b", "c"), ("a", "b", "c"))] * 4
    for n in (1, 2, 3):
        assert dup_n(pairs, n) == 1.0


def test_dup_n_short_pairs_count_zero():
    pairs = [Pair(("a",), ("a",)), Pair(("a", "b"), ("a", "b"))]
    assert dup_n(pairs, 2) == 0.5


def test_dup_n_empty_corpus():
    with pytest.raises(UndefinedMetricError):
        dup_n([], 2)


def test_dup_n_non_increasing_in_n():
    rng = random.Random(0)
    pairs = [
        Pair(
            tuple(rng.choices("abcde", k=rng.randint(1, 12))),
            tuple(rng.choices("abcde", k=rng.randint(1, 12))),
        )
        for _ in range(40)
    ]
    values = [dup_n(pairs, n) for n in range(1, 8)]
    assert all(x >= y for x, y in zip(values, values[1:]))


# -- kp_n / mkp_n -----------------------------------------------------------------


def test_kp_1_hand_case():
    assert kp_n(Pair(("the", "cat", "sat"), ("the", "dog", "sat")), 1) == pytest.approx(2 / 3)


def test_kp_1_identity_and_disjoint():
    s = ("a", "b", "c")
    assert kp_n(Pair(s, s), 1) == 1.0
    assert kp_n(Pair(("a",), ("x", "y")), 1) == 0.0


def test_kp_counts_response_grams_with_multiplicity():
    assert kp_n(Pair(("a", "b"), ("a", "a", "c")), 1) == pytest.approx(2 / 3)


def test_kp_contained_span_is_one_for_every_order():
    k = ("a", "b", "c", "d", "e")
    y = ("b", "c", "d")
    for n in (1, 2, 3):
        assert kp_n(Pair(k, y), n) == 1.0


def test_kp_short_response_undefined():
    with pytest.raises(UndefinedMetricError):
        kp_n(Pair(("a", "b"), ("a",)), 2)


def test_mkp_single_pair_and_mean():
    p1 = Pair(("a",), ("a", "a"))  # kp_1 = 1
    p0 = Pair(("a",), ("x", "y"))  # kp_1 = 0
    assert mkp_n([p1], 1) == kp_n(p1, 1)
    assert mkp_n([p0, p1], 1) == 0.5


def test_mkp_excludes_short_pairs():
    long = Pair(("a", "b"), ("a", "b", "c"))
    short = Pair(("a", "b"), ("a",))
    assert mkp_n([long, short], 2) == kp_n(long, 2)
    with pytest.raises(UndefinedMetricError):
        mkp_n([short], 2)


# -- pod ---------------------------------------------------------------------------


def test_pod_identity_and_disjoint():
    same = [Pair(("a", "b"), ("a", "b"))] * 3
    assert pod(same) == 1.0
    far = [Pair(("a",), ("x", "y"))] * 3
    assert pod(far) == 0.0


def test_pod_strict_threshold():
    # plcs values 0.6, 5/7 (~0.714), 0.9
    p1 = Pair(("a", "b", "c"), ("a", "b", "c", "x", "y"))
    p2 = Pair(("a", "b", "c", "d", "e"), ("a", "b", "c", "d", "e", "x", "y"))
    p3 = Pair(tuple("abcdefghi"), tuple("abcdefghi") + ("x",))
    assert plcs(p1) == pytest.approx(0.6)
    assert plcs(p2) == pytest.approx(5 / 7)
    assert plcs(p3) == pytest.approx(0.9)
    assert pod([p1, p2, p3]) == pytest.approx(2 / 3)


def test_pod_boundary_not_counted():
    seven = Pair(tuple("abcdefg"), tuple("abcdefg") + ("x", "y", "z"))
    assert plcs(seven) == pytest.approx(0.7)
    assert pod([seven]) == 0.0


# -- histograms and kud --------------------------------------------------------------


def _pair_with_kp1(hits: int, total: int) -> Pair:
    y = tuple(f"k{i}" for i in range(hits)) + tuple(f"m{i}" for i in range(total - hits))
    return Pair(tuple(f"k{i}" for i in range(hits)) or ("k0",), y)


def test_histogram_all_ones_in_last_bin():
    pairs = [Pair(("a", "b"), ("a", "b"))] * 5
    hist = kp_histogram(pairs, 1)
    assert hist.masses[-1] == 1.0
    assert sum(hist.masses) == pytest.approx(1.0)


def test_histogram_extreme_bins():
    pairs = [_pair_with_kp1(1, 20), _pair_with_kp1(19, 20)]
    assert kp_n(pairs[0], 1) == pytest.approx(0.05)
    assert kp_n(pairs[1], 1) == pytest.approx(0.95)
    hist = kp_histogram(pairs, 1)
    assert hist.masses[0] == pytest.approx(0.5)
    assert hist.masses[-1] == pytest.approx(0.5)
    assert sum(hist.masses[1:-1]) == 0.0


def test_histogram_mass_validation():
    with pytest.raises(ValidationError):
        KPHistogram(n=1, bin_edges=(0.0, 0.5, 1.0), masses=(0.5, 0.4))


def test_kud_identical_zero_and_symmetry():
    h = kp_histogram([_pair_with_kp1(3, 10)], 1)
    g = kp_histogram([_pair_with_kp1(7, 10)], 1)
    assert kud(h, h) == 0.0
    assert kud(h, g) == kud(g, h)


def test_kud_opposite_corners():
    edges = tuple(i / 10 for i in range(11))
    a = KPHistogram(1, edges, (1.0,) + (0.0,) * 9)
    b = KPHistogram(1, edges, (0.0,) * 9 + (1.0,))
    assert kud(a, b) == pytest.approx(20.0)


def test_kud_mismatched_bins():
    a = KPHistogram(1, (0.0, 0.5, 1.0), (0.5, 0.5))
    b = KPHistogram(1, (0.0, 1.0), (1.0,))
    with pytest.raises(ValidationError):
        kud(a, b)


@given(
    st.lists(st.floats(0, 1), min_size=10, max_size=10),
    st.lists(st.floats(0, 1), min_size=10, max_size=10),
    st.lists(st.floats(0, 1), min_size=10, max_size=10),
)
@settings(max_examples=100)
def test_kud_pseudometric(a, b, c):
    def normalize(masses):
        total = sum(masses)
        if total == 0:
            masses = [1.0] + [0.0] * 9
            total = 1.0
        return tuple(m / total for m in masses)

    edges = tuple(i / 10 for i in range(11))
    ha = KPHistogram(1, edges, normalize(a))
    hb = KPHistogram(1, edges, normalize(b))
    hc = KPHistogram(1, edges, normalize(c))
    assert kud(ha, hb) >= 0
    assert kud(ha, hb) == kud(hb, ha)
    assert kud(ha, hc) <= kud(ha, hb) + kud(hb, hc) + 1e-9


# -- report ----------------------------------------------------------------------


def _corpus_and_generations(n=6, seed=0):
    rng = random.Random(seed)
    examples = []
    gens = []
    for i in range(n):
        pool = tuple(tuple(rng.choices("abcdefgh", k=6)) + (".",) for _ in range(2))
        ex = example(
            example_id=f"e{i}",
            pool=pool,
            gold=rng.randrange(2),
            response=tuple(rng.choices("abcdefgh", k=5)) + (".",),
        )
        examples.append(ex)
        gens.append(
            GenerationRecord(f"e{i}", tuple(rng.choices("abcdefgh", k=4)) + (".",), "beam", {}, -1.0)
        )
    return Corpus(tuple(examples)), gens


def test_report_identical_generations():
    corpus, _ = _corpus_and_generations()
    gens = [GenerationRecord(ex.example_id, ex.response, "beam", {}, 0.0) for ex in corpus]
    report = build_report(corpus, gens)
    assert report.kud == 0.0
    assert report.generated.pod == report.reference.pod
    assert report.generated.plcs_mean == pytest.approx(report.reference.plcs_mean)


def test_report_verbatim_knowledge_generations():
    corpus, _ = _corpus_and_generations()
    gens = [GenerationRecord(ex.example_id, ex.gold_knowledge, "beam", {}, 0.0) for ex in corpus]
    report = build_report(corpus, gens)
    assert report.generated.plcs_mean == 1.0
    assert report.generated.pod == 1.0


def test_report_alignment_errors():
    corpus, gens = _corpus_and_generations()
    with pytest.raises(AlignmentError):
        build_report(corpus, gens[:-1])
    stray = gens + [GenerationRecord("stranger", ("a",), "beam", {}, 0.0)]
    with pytest.raises(AlignmentError):
        build_report(corpus, stray)
    with pytest.raises(AlignmentError):
        build_report(corpus, gens[:-1] + [gens[0]])


def test_report_handles_empty_generation():
    corpus, gens = _corpus_and_generations()
    gens[0] = GenerationRecord(gens[0].example_id, (), "beam", {}, 0.0)
    report = build_report(corpus, gens)
    assert report.n_empty_generations == 1
    assert report.per_example[0].plcs_generated is None
    assert report.generated.n_pairs == len(gens)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_report_fractions_within_unit_interval(seed):
    corpus, gens = _corpus_and_generations(n=5, seed=seed)
    report = build_report(corpus, gens)
    for agg in (report.reference, report.generated):
        for value in (agg.dup_16, agg.dup_32, agg.plcs_mean, agg.mkp_1, agg.pod):
            assert 0.0 <= value <= 1.0
        if agg.mkp_2 is not None:
            assert 0.0 <= agg.mkp_2 <= 1.0
    assert report.kud >= 0.0
