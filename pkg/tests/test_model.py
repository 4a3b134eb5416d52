"""Model-level tests: seeded weight generation, forward semantics, the
agreement boost, cache vectorization, and task construction."""

import dataclasses

import numpy as np
import pytest

from blockbatch.errors import ConfigError, ContractError, StateError
from blockbatch.model import (BlockWindow, KvCache, ModelDims, SequenceRow,
                              Task, Vocab, _agreement, block_forward,
                              build_model, exact_match, full_forward,
                              kv_position_energy, kv_vectorize, make_task,
                              serialize_params)


def test_vocab_layout():
    v = Vocab(size=8, category_of={t: "c" for t in range(8)})
    assert v.eos_id == 8
    assert v.mask_id == 9
    assert v.n_out == 9
    assert v.n_extended == 10


def test_vocab_rejects_partial_categories():
    with pytest.raises(ConfigError):
        Vocab(size=4, category_of={0: "a"})


def test_default_categories_are_total(vocab):
    assert set(vocab.category_of) == set(range(vocab.size))
    assert len(set(vocab.category_of.values())) == 4


def test_build_model_deterministic(vocab):
    a = build_model(seed=7, vocab=vocab)
    b = build_model(seed=7, vocab=vocab)
    assert serialize_params(a) == serialize_params(b)
    c = build_model(seed=8, vocab=vocab)
    assert serialize_params(a) != serialize_params(c)


def test_build_model_rejects_bad_dims(vocab):
    with pytest.raises(ConfigError):
        build_model(seed=0, vocab=vocab, dims=ModelDims(layers=0))


def test_full_forward_probs_normalized(params, task, vocab):
    out, cache = full_forward(params, task.fresh_row(vocab), task.target)
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-12)
    assert out.probs.shape[1] == vocab.n_out
    assert cache.valid.all()


def test_full_forward_queries_masked_positions_only(params, task, vocab):
    row = task.fresh_row(vocab)
    row.tokens[20:30] = 3
    out, _ = full_forward(params, row, task.target)
    expected = np.flatnonzero(row.tokens == vocab.mask_id)
    np.testing.assert_array_equal(out.positions, expected)


def test_block_forward_full_window_matches_full_forward(params, task, vocab):
    """A block covering the whole sequence is bitwise a full forward."""
    row = task.fresh_row(vocab)
    full_out, full_cache = full_forward(params, row, task.target)
    empty = KvCache.empty(params.dims.layers, len(row), params.dims.d_model)
    empty.valid[:] = True  # degenerate: nothing outside the window
    blk_out, blk_cache = block_forward(params, row, empty,
                                       BlockWindow(0, len(row)), task.target)
    assert np.array_equal(full_out.logits, blk_out.logits)
    assert np.array_equal(full_out.probs, blk_out.probs)
    assert np.array_equal(full_cache.keys, blk_cache.keys)
    assert np.array_equal(full_cache.values, blk_cache.values)


def test_block_forward_window_bounds(params, task, vocab):
    row = task.fresh_row(vocab)
    _, cache = full_forward(params, row, task.target)
    with pytest.raises(ContractError):
        block_forward(params, row, cache, BlockWindow(0, len(row) + 1),
                      task.target)


def test_block_forward_requires_valid_cache_outside(params, task, vocab):
    row = task.fresh_row(vocab)
    cache = KvCache.empty(params.dims.layers, len(row), params.dims.d_model)
    with pytest.raises(StateError):
        block_forward(params, row, cache, BlockWindow(16, 20), task.target)


def test_agreement_brute_force(vocab):
    rng = np.random.default_rng(4)
    for _ in range(50):
        length = 40
        tokens = rng.integers(0, vocab.size, size=length).astype(np.int64)
        masked = rng.random(length) < 0.5
        tokens[masked] = vocab.mask_id
        row = SequenceRow(tokens, prompt_len=8)
        target = rng.integers(0, vocab.size, size=length).astype(np.int64)
        positions = np.flatnonzero(masked)
        if not len(positions):
            continue
        got = _agreement(row, target, positions, radius=4,
                         mask_id=vocab.mask_id)
        for pos, val in zip(positions, got):
            committed = matching = 0
            for j in range(max(0, pos - 4), min(length, pos + 5)):
                if j == pos or tokens[j] == vocab.mask_id:
                    continue
                committed += 1
                matching += tokens[j] == target[j]
            expected = matching / committed if committed else 0.0
            assert val == pytest.approx(expected, abs=1e-12)


def test_boost_dominates_with_committed_context(vocab):
    """With a huge boost and committed matching neighbors, the argmax at a
    masked position is the planted target."""
    params = build_model(seed=3, vocab=vocab, gamma=50.0)
    task = make_task(2, 16, 32, vocab)
    row = task.fresh_row(vocab)
    row.tokens[16:24] = task.target[:8]  # commit correct context
    out, _ = full_forward(params, row, task.target)
    pos24 = np.flatnonzero(out.positions == 24)[0]
    assert out.probs[pos24].argmax() == task.target[8]


def test_masked_positions_identical_without_positional_signal(vocab):
    params = build_model(seed=5, vocab=vocab, gamma=0.0, spike_gain=0.0)
    params = dataclasses.replace(params, pos=np.zeros_like(params.pos))
    tokens = np.full(32, vocab.mask_id, dtype=np.int64)
    row = SequenceRow(tokens, prompt_len=0)
    out, _ = full_forward(params, row, None)
    np.testing.assert_allclose(out.logits,
                               np.tile(out.logits[0], (len(out.logits), 1)),
                               atol=1e-9)


def test_kv_vectorize_layout():
    """Layer-major, position-minor, key row before value row."""
    cache = KvCache.empty(layers=2, length=2, d_model=2)
    cache.keys[0, 0] = [1, 2]
    cache.values[0, 0] = [3, 4]
    cache.keys[0, 1] = [5, 6]
    cache.values[0, 1] = [7, 8]
    cache.keys[1, 0] = [9, 10]
    cache.values[1, 0] = [11, 12]
    cache.keys[1, 1] = [13, 14]
    cache.values[1, 1] = [15, 16]
    cache.valid[:] = True
    np.testing.assert_array_equal(kv_vectorize(cache), np.arange(1.0, 17.0))


def test_kv_vectorize_rejects_invalid(vocab):
    cache = KvCache.empty(2, 4, 2)
    with pytest.raises(StateError):
        kv_vectorize(cache)


def test_kv_position_energy_brute_force():
    rng = np.random.default_rng(9)
    layers, length, d = 2, 6, 4
    vec = rng.standard_normal(layers * length * 2 * d)
    energy = kv_position_energy(vec, layers, length, d)
    grid = vec.reshape(layers, length, 2, d)
    for p in range(length):
        assert energy[p] == pytest.approx((grid[:, p] ** 2).sum())
    assert energy.sum() == pytest.approx((vec ** 2).sum())


def test_make_task_deterministic(vocab):
    a = make_task(11, 16, 64, vocab)
    b = make_task(11, 16, 64, vocab)
    np.testing.assert_array_equal(a.prompt, b.prompt)
    np.testing.assert_array_equal(a.target, b.target)


def test_make_task_plants_eos_in_about_half(vocab):
    hits = sum(
        (make_task(s, 8, 64, vocab).target == vocab.eos_id).any()
        for s in range(300))
    assert 100 < hits < 200


def test_task_effective_len(vocab):
    target = np.array([1, 2, vocab.eos_id, 5])
    task = Task(seed=0, prompt=np.array([0]), target=target)
    assert task.effective_len(vocab) == 3


def test_exact_match_scores_up_to_eos(vocab):
    target = np.array([1, 2, vocab.eos_id, 5])
    task = Task(seed=0, prompt=np.array([0]), target=target)
    row = task.fresh_row(vocab)
    row.tokens[1:4] = [1, 2, vocab.eos_id]  # tail stays masked
    assert exact_match(row, task, vocab)
    row.tokens[2] = 3
    assert not exact_match(row, task, vocab)
