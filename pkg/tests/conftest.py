import numpy as np
import pytest

from posbench.corpus import (
    Corpus,
    FrontSkewed,
    SynthSpec,
    Uniform,
    qrels_from_alignments,
    synth_corpus,
)
from posbench.embed import init_params


@pytest.fixture
def mean_params():
    return init_params(dim=8, vocab_hash_buckets=64, seed=0, pooling="mean")


@pytest.fixture
def pw_params():
    return init_params(
        dim=8, vocab_hash_buckets=64, seed=0, pooling="position_weighted", decay=2.0
    )


def make_synth(
    num_docs=30,
    doc_char_len=(180, 300),
    passage_char_len=(36, 72),
    law=None,
    vocabulary_size=None,
    seed=0,
):
    if law is None:
        law = Uniform()
    if vocabulary_size is None:
        vocabulary_size = 8 * num_docs + 500
    spec = SynthSpec(
        num_docs=num_docs,
        doc_char_len=doc_char_len,
        passage_char_len=passage_char_len,
        position_law=law,
        vocabulary_size=vocabulary_size,
        seed=seed,
    )
    return synth_corpus(spec)


@pytest.fixture(scope="session")
def small_world():
    """30 uniform-position docs with one query/alignment each."""
    docs, queries, alignments = make_synth(seed=7)
    bundle = Corpus(documents=docs, queries=queries)
    return bundle, alignments, qrels_from_alignments(alignments)


@pytest.fixture(scope="session")
def skewed_world():
    docs, queries, alignments = make_synth(law=FrontSkewed(0.19), seed=3)
    bundle = Corpus(documents=docs, queries=queries)
    return bundle, alignments, qrels_from_alignments(alignments)


def rng_texts(rng: np.random.Generator, count: int, min_tokens=3, max_tokens=8):
    """Random lowercase word texts for loss/gradient exercises."""
    out = []
    for _ in range(count):
        n = int(rng.integers(min_tokens, max_tokens + 1))
        words = [
            "".join(chr(97 + int(c)) for c in rng.integers(0, 26, size=4))
            for _ in range(n)
        ]
        out.append(" ".join(words))
    return out
