import numpy as np
import pytest

from blockbatch.model import ModelDims, Vocab, build_model, make_task


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture(scope="session")
def params(vocab):
    return build_model(seed=0, vocab=vocab)


@pytest.fixture(scope="session")
def small_params(vocab):
    # short max_len keeps forwards cheap in unit tests
    return build_model(seed=0, vocab=vocab, dims=ModelDims(max_len=96))


@pytest.fixture
def task(vocab):
    return make_task(1, prompt_len=16, gen_len=64, vocab=vocab)


def random_probs(rng, n, width):
    logits = rng.standard_normal((n, width)) * 3.0
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
