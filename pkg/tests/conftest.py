import pytest
import torch

from macl.corpus import Corpus, DialogueExample, Vocabulary, generate_synthetic
from macl.model import ModelConfig, Seq2SeqModel


class TableModel:
    """Frozen toy decoder: next-token rows looked up by prefix ids.

    Vocab ids 0..4 are reserved (EOS is 2); content ids start at 5.
    Prefixes not in the table fall back to the default row.
    """

    def __init__(self, table: dict[tuple[int, ...], list[float]], default: list[float]):
        self.table = {tuple(k): v for k, v in table.items()}
        self.default = default
        self.vocab_size = len(default)

    def decode_prefixes(self, encoding, prefixes):
        rows = [self.table.get(tuple(p), self.default) for p in prefixes]
        return torch.tensor(rows, dtype=torch.float64)


def example(
    example_id="ex-0",
    context=(("hello", "there", "?"),),
    pool=(("blue", "skies", "movie", "."), ("other", "fact", ".")),
    gold=0,
    response=("yes", ",", "blue", "skies", "."),
) -> DialogueExample:
    return DialogueExample(
        example_id=example_id,
        context_turns=tuple(tuple(t) for t in context),
        knowledge_pool=tuple(tuple(s) for s in pool),
        gold_knowledge_index=gold,
        response=tuple(response),
    )


@pytest.fixture(scope="session")
def tiny_corpus() -> Corpus:
    return generate_synthetic(seed=11, n_examples=24, vocab_size=60, shortcut_rate=0.9)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus) -> Vocabulary:
    return Vocabulary.from_corpus(tiny_corpus)


@pytest.fixture(scope="session")
def tiny_model(tiny_vocab) -> Seq2SeqModel:
    model = Seq2SeqModel(ModelConfig(vocab_size=len(tiny_vocab), max_source_len=48, max_target_len=16, seed=13))
    model.eval()
    return model
