"""Scheduler tests: configuration contracts, packing, batched-forward
equivalence, merge/sync post-conditions under fuzzing, NFE instrumentation,
singleton equivalence with the single-branch decoder, and trace IO."""

import numpy as np
import pytest

from blockbatch.decoding import BranchState, DecodeConfig, single_branch_decode
from blockbatch.errors import ConfigError, ContractError
from blockbatch.model import (BlockWindow, SequenceRow, Vocab, block_forward,
                              make_task)
from blockbatch.scheduler import (PackedQuery, SchedulerConfig,
                                  batched_block_forward, init_full_forward,
                                  get_active_branches, merge_sync,
                                  pack_active_blocks, read_trace,
                                  run_blockbatch, select_eos_winner,
                                  write_trace)


def test_scheduler_config_validation():
    SchedulerConfig().validate()
    with pytest.raises(ConfigError):
        SchedulerConfig(block_sizes=()).validate()
    with pytest.raises(ConfigError):
        SchedulerConfig(block_sizes=(4, 4)).validate()
    with pytest.raises(ConfigError):
        SchedulerConfig(tau_merge=-0.1).validate()
    with pytest.raises(ConfigError):
        SchedulerConfig(log_kv="verbose").validate()


def test_init_full_forward_requires_identical_rows(params, vocab, task):
    rows = [task.fresh_row(vocab) for _ in range(3)]
    rows[1].tokens[20] = 3
    with pytest.raises(ContractError):
        init_full_forward(params, rows, task.target)


def test_init_full_forward_broadcasts_copies(params, vocab, task):
    rows = [task.fresh_row(vocab) for _ in range(2)]
    _, caches = init_full_forward(params, rows, task.target)
    caches[0].keys[0, 0, 0] += 1.0
    assert caches[1].keys[0, 0, 0] != caches[0].keys[0, 0, 0]


def _make_branches(vocab, rows, sizes):
    branches = []
    length = len(rows[0])
    for i, b in enumerate(sizes):
        st = BranchState(index=i, block_size=b,
                         window=BlockWindow(rows[i].prompt_len,
                                            min(rows[i].prompt_len + b, length)),
                         prob_map=np.zeros((length, vocab.n_out)),
                         prob_covered=np.zeros(length, dtype=bool))
        st.refresh_decoded(rows[i], vocab.mask_id)
        branches.append(st)
    return branches


def test_pack_active_blocks(params, vocab, task):
    rows = [task.fresh_row(vocab) for _ in range(3)]
    branches = _make_branches(vocab, rows, (4, 8, 16))
    active = get_active_branches(branches, rows, vocab.mask_id)
    assert active == [0, 1, 2]
    packed = pack_active_blocks(rows, branches, active, vocab.mask_id)
    assert packed.offsets == (0, 4, 12, 28)
    np.testing.assert_array_equal(packed.slice_for(1), np.arange(16, 24))
    with pytest.raises(ContractError):
        pack_active_blocks(rows, branches, [], vocab.mask_id)


def test_batched_forward_equals_sequential(params, vocab, task):
    """The fused forward is bitwise the per-branch block forward."""
    rows = [task.fresh_row(vocab) for _ in range(3)]
    branches = _make_branches(vocab, rows, (4, 8, 16))
    _, caches = init_full_forward(params, rows, task.target)
    packed = pack_active_blocks(rows, branches, [0, 1, 2], vocab.mask_id)
    ref_outputs = {}
    ref_caches = {}
    for k in range(3):
        out, cache = block_forward(params, rows[k], caches[k].copy(),
                                   branches[k].window, task.target)
        ref_outputs[k] = out
        ref_caches[k] = cache
    got = batched_block_forward(params, packed, rows, caches, branches,
                                task.target)
    for k in range(3):
        assert np.array_equal(got[k].logits, ref_outputs[k].logits)
        assert np.array_equal(got[k].probs, ref_outputs[k].probs)
        assert np.array_equal(caches[k].keys, ref_caches[k].keys)
        assert np.array_equal(caches[k].values, ref_caches[k].values)


def _fuzz_state(rng, vocab, n_branches, length=40, prompt_len=6):
    rows = []
    branches = []
    caches = []
    for i in range(n_branches):
        tokens = np.full(length, vocab.mask_id, dtype=np.int64)
        tokens[:prompt_len] = 1
        n_dec = int(rng.integers(0, length - prompt_len + 1))
        tokens[prompt_len:prompt_len + n_dec] = rng.integers(
            0, vocab.size, size=n_dec)
        # sometimes scatter extra commits to create incompatibilities
        scatter = rng.random(length) < 0.1
        scatter[:prompt_len] = False
        tokens[scatter] = rng.integers(0, vocab.size, size=scatter.sum())
        rows.append(SequenceRow(tokens, prompt_len))
        b = int(rng.choice([4, 8, 16]))
        first_mask = np.flatnonzero(tokens == vocab.mask_id)
        start = int(first_mask[0]) if len(first_mask) else length
        st = BranchState(index=i, block_size=b,
                         window=BlockWindow(start, min(start + b, length)),
                         prob_map=random_prob_map(rng, length, vocab.n_out),
                         prob_covered=rng.random(length) < 0.8,
                         done=bool(start >= length))
        st.refresh_decoded(rows[i], vocab.mask_id)
        branches.append(st)
        caches.append(None)  # sync copies caches; use sentinels with copy()
    caches = [FakeCache(i) for i in range(n_branches)]
    return rows, caches, branches


class FakeCache:
    def __init__(self, tag):
        self.tag = tag

    def copy(self):
        return FakeCache(self.tag)


def random_prob_map(rng, length, width):
    p = rng.random((length, width))
    return p / p.sum(axis=1, keepdims=True)


def test_merge_sync_fuzz_contracts(vocab):
    """Merged tokens always clear the destination's probability gate with a
    compatible source; the post-sync progress gap never exceeds the
    threshold.  Compatibility re-checked by brute force."""
    rng = np.random.default_rng(77)
    tau_merge, tau_sync = 0.03, 6
    merges = syncs = 0
    for trial in range(600):
        rows, caches, branches = _fuzz_state(rng, vocab, n_branches=4)
        before = [r.copy() for r in rows]
        prob_maps = [b.prob_map.copy() for b in branches]
        events = merge_sync(rows, caches, branches, tau_merge, tau_sync, vocab)
        for ev in events:
            if ev["kind"] == "merge":
                merges += 1
                d, s, i = ev["dest"], ev["source"], ev["pos"]
                assert prob_maps[d][i, ev["token"]] > tau_merge
                # brute-force compatibility at the time of the merge: every
                # mutually decoded position of the ORIGINAL rows must agree
                both = ((before[d].tokens != vocab.mask_id)
                        & (before[s].tokens != vocab.mask_id))
                assert (before[d].tokens[both] == before[s].tokens[both]).all() or \
                    merged_made_compatible(before, rows, d, s, vocab)
                assert before[d].tokens[i] == vocab.mask_id
            else:
                syncs += 1
        if any(not b.done for b in branches):
            progress = [b.tokens_decoded for b in branches if not b.done]
            leader = max(b.tokens_decoded for b in branches)
            assert all(leader - p <= tau_sync for p in progress)
    assert merges > 50
    assert syncs > 50


def merged_made_compatible(before, after, d, s, vocab):
    """Earlier merges within the same pass may have filled destination masks;
    compatibility is then judged against the updated destination row."""
    both = ((after[d].tokens != vocab.mask_id)
            & (before[s].tokens != vocab.mask_id))
    # positions the destination decoded before the pass must still agree
    fixed = both & (before[d].tokens != vocab.mask_id)
    return (before[d].tokens[fixed] == before[s].tokens[fixed]).all()


def test_merge_sync_noop_when_nothing_decoded(vocab):
    rng = np.random.default_rng(3)
    rows = [SequenceRow(np.full(20, vocab.mask_id, dtype=np.int64), 0)
            for _ in range(2)]
    branches = _make_branches(vocab, rows, (4, 8))
    events = merge_sync(rows, [FakeCache(0), FakeCache(1)], branches, 0.5, 8,
                        vocab)
    assert events == []


def test_merge_disabled_flag(vocab):
    rng = np.random.default_rng(5)
    for _ in range(20):
        rows, caches, branches = _fuzz_state(rng, vocab, n_branches=3)
        events = merge_sync(rows, caches, branches, 0.01, 4, vocab,
                            merge_enabled=False)
        assert all(ev["kind"] != "merge" for ev in events)


def test_select_eos_winner_requires_ready_branch(params, vocab, task):
    rows = [task.fresh_row(vocab)]
    branches = _make_branches(vocab, rows, (4,))
    with pytest.raises(ContractError):
        select_eos_winner(branches, rows, vocab)


def test_run_blockbatch_nfe_hook_exact(params, vocab):
    task = make_task(4, 16, 64, vocab)
    calls = []
    cfg = SchedulerConfig(gen_len=64, refresh_interval=8)
    r = run_blockbatch(params, task, cfg,
                       forward_hook=lambda kind: calls.append(kind))
    assert len(calls) == r.nfe.total
    assert calls.count("init") == r.nfe.nfe_init == 1
    assert calls.count("block") == r.nfe.nfe_block
    assert calls.count("refresh") == r.nfe.nfe_refresh
    # every trace event carries a consistent running NFE snapshot
    for ev in r.trace:
        assert sum(ev.nfe) <= r.nfe.total


def test_singleton_matches_single_branch(params, vocab):
    for seed in (0, 3, 9):
        task = make_task(seed, 16, 64, vocab)
        for b in (4, 32):
            ref = single_branch_decode(params, task,
                                       DecodeConfig(block_size=b, gen_len=64))
            got = run_blockbatch(params, task,
                                 SchedulerConfig(block_sizes=(b,), gen_len=64,
                                                 merge_enabled=False,
                                                 sync_enabled=False))
            np.testing.assert_array_equal(ref.row.tokens, got.row.tokens)
            assert ref.nfe.snapshot() == got.nfe.snapshot()


def test_run_blockbatch_deterministic(params, vocab):
    task = make_task(6, 16, 64, vocab)
    cfg = SchedulerConfig(gen_len=64)
    a = run_blockbatch(params, task, cfg)
    b = run_blockbatch(params, task, cfg)
    np.testing.assert_array_equal(a.row.tokens, b.row.tokens)
    assert [e.to_record() for e in a.trace] == [e.to_record() for e in b.trace]


def test_trace_roundtrip(tmp_path, params, vocab):
    task = make_task(2, 16, 64, vocab)
    r = run_blockbatch(params, task, SchedulerConfig(gen_len=64, log_kv="norms"))
    path = tmp_path / "trace.jsonl"
    write_trace(path, r.trace)
    records = read_trace(path)
    assert len(records) == len(r.trace)
    assert records[0]["kind"] == "init"
    assert records[-1]["kind"] == "finish"
    with open(path) as fh:
        header = fh.readline()
    assert "schema" in header
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"schema": "other"}\n')
    with pytest.raises(ContractError):
        read_trace(bad)


def test_gen_len_mismatch_rejected(params, vocab):
    task = make_task(2, 16, 64, vocab)
    with pytest.raises(ConfigError):
        run_blockbatch(params, task, SchedulerConfig(gen_len=128))
