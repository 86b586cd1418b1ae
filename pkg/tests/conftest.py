import numpy as np
import pytest

from factstack.corpus import Dataset, generate_synthetic
from factstack.encoder import EncoderConfig
from factstack.tokenizer import CLS_ID, SEP_ID, TokenSequence, Vocabulary, build_vocab


@pytest.fixture(scope="session")
def small_corpus() -> Dataset:
    """100 separable instances, 20 per class, fixed seed."""
    return generate_synthetic(5, 20, 300, seed=7)


@pytest.fixture(scope="session")
def small_vocab(small_corpus) -> Vocabulary:
    from factstack.corpus import preprocess_instance
    texts = [preprocess_instance(inst) for inst in small_corpus]
    # template literals must be encodable for the prompt tests
    texts.append("the statement is . true false correct incorrect relevant irrelevant")
    return build_vocab(texts, max_size=400, min_freq=1)


@pytest.fixture
def tiny_config(small_vocab) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=small_vocab.size, max_len=32, d_model=16, n_heads=2,
        n_layers=2, d_ff=32, dropout_rate=0.1, n_classes=5,
    )


def make_sequence(ids_body: list[int], max_len: int) -> TokenSequence:
    """CLS + body + SEP padded (or body clipped) to max_len."""
    ids = [CLS_ID] + [int(t) for t in ids_body][: max_len - 2] + [SEP_ID]
    n_real = len(ids)
    ids = ids + [0] * (max_len - n_real)
    return TokenSequence(ids=ids, attention_mask=[1] * n_real + [0] * (max_len - n_real))


def random_batch(rng: np.random.Generator, vocab_size: int, max_len: int,
                 lengths: list[int]) -> list[TokenSequence]:
    return [
        make_sequence(list(rng.integers(5, vocab_size, size=n)), max_len)
        for n in lengths
    ]
