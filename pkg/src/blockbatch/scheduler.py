"""Branch-parallel decoding: several block-size branches advance in lockstep
over batched forwards, exchange tokens through confidence-gated merges,
synchronize lagging branches to the leader, and periodically refresh their
KV caches from the full sequence.

One batched forward over all active branches is charged as a single NFE.
Each branch owns its token row and cache row; rows cross branches only via
the merge-and-sync policy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .decoding import (BranchState, GenerationResult, NfeCounter, TraceEvent,
                       advance_block, check_eos, confidence_transition,
                       earliest_eos, realign_for_eos, realign_to_first_mask,
                       window_complete, EOS_PENDING, EOS_READY)
from .errors import ConfigError, ContractError, RunawayError
from .model import (BlockWindow, DenoiseOutput, KvCache, ModelParams,
                    SequenceRow, Task, Vocab, block_forward, exact_match,
                    full_forward, kv_vectorize)

TRACE_SCHEMA = "blockbatch-trace-v1"
DEFAULT_BLOCK_SIZES = (4, 8, 16, 32, 64, 128)
HARD_CAP_FACTOR = 4


@dataclass
class SchedulerConfig:
    block_sizes: tuple[int, ...] = DEFAULT_BLOCK_SIZES
    tau_conf: float = 0.9
    tau_merge: float = 0.5
    tau_sync: int = 8
    refresh_interval: int = 32
    gen_len: int = 256
    merge_enabled: bool = True
    sync_enabled: bool = True
    log_kv: str = "none"          # none | norms | full
    log_consistency: bool = False

    def validate(self) -> None:
        if not self.block_sizes:
            raise ConfigError("block_sizes must be non-empty")
        if len(set(self.block_sizes)) != len(self.block_sizes):
            raise ConfigError("block_sizes must be distinct")
        if any(b < 1 for b in self.block_sizes):
            raise ConfigError("block sizes must be positive")
        if not 0.0 <= self.tau_conf <= 1.0:
            raise ConfigError("tau_conf outside [0, 1]")
        if not 0.0 <= self.tau_merge <= 1.0:
            raise ConfigError("tau_merge outside [0, 1]")
        if self.tau_sync < 0:
            raise ConfigError("tau_sync must be non-negative")
        if self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1")
        if self.gen_len < 1:
            raise ConfigError("gen_len must be >= 1")
        if self.log_kv not in ("none", "norms", "full"):
            raise ConfigError(f"unknown log_kv mode {self.log_kv!r}")


@dataclass(frozen=True)
class PackedQuery:
    """Concatenated masked query positions for the active branches, with
    cumulative offsets partitioning the packed buffer."""

    branch_order: tuple[int, ...]
    positions: np.ndarray
    offsets: tuple[int, ...]

    def slice_for(self, branch_index: int) -> np.ndarray:
        i = self.branch_order.index(branch_index)
        return self.positions[self.offsets[i]:self.offsets[i + 1]]


def init_full_forward(params: ModelParams, rows: list[SequenceRow],
                      target: np.ndarray) -> tuple[DenoiseOutput, list[KvCache]]:
    """One prefill forward over the shared initial row; the resulting cache is
    broadcast to every branch."""
    base = rows[0]
    for row in rows[1:]:
        if not np.array_equal(row.tokens, base.tokens) or row.prompt_len != base.prompt_len:
            raise ContractError("initial branch rows differ")
    out, cache = full_forward(params, base, target)
    return out, [cache.copy() for _ in rows]


def get_active_branches(branches: list[BranchState], rows: list[SequenceRow],
                        mask_id: int) -> list[int]:
    active = []
    for b in branches:
        if b.done:
            continue
        if len(rows[b.index].masked_positions(mask_id, b.window)):
            active.append(b.index)
    return active


def pack_active_blocks(rows: list[SequenceRow], branches: list[BranchState],
                       active: list[int], mask_id: int) -> PackedQuery:
    if not active:
        raise ContractError("pack_active_blocks requires a non-empty active set")
    chunks = []
    offsets = [0]
    for k in active:
        pos = rows[k].masked_positions(mask_id, branches[k].window)
        chunks.append(pos)
        offsets.append(offsets[-1] + len(pos))
    return PackedQuery(tuple(active), np.concatenate(chunks), tuple(offsets))


def batched_block_forward(params: ModelParams, packed: PackedQuery,
                          rows: list[SequenceRow], caches: list[KvCache],
                          branches: list[BranchState], target: np.ndarray,
                          ) -> dict[int, DenoiseOutput]:
    """One fused denoise step: per-branch attention semantics against each
    branch's own cache row.  Charged as a single NFE by the caller."""
    outputs: dict[int, DenoiseOutput] = {}
    for k in packed.branch_order:
        out, new_cache = block_forward(params, rows[k], caches[k],
                                       branches[k].window, target)
        expected = packed.slice_for(k)
        if not np.array_equal(out.positions, expected):
            raise ContractError("forward output does not cover the packed query")
        caches[k] = new_cache
        outputs[k] = out
    return outputs


def _update_prob_map(branch: BranchState, out: DenoiseOutput) -> None:
    branch.prob_map[out.positions] = out.probs
    branch.prob_covered[out.positions] = True


def _compatible(row_a: SequenceRow, row_b: SequenceRow, mask_id: int) -> bool:
    both = (row_a.tokens != mask_id) & (row_b.tokens != mask_id)
    return bool((row_a.tokens[both] == row_b.tokens[both]).all())


def merge_sync(rows: list[SequenceRow], caches: list[KvCache],
               branches: list[BranchState], tau_merge: float, tau_sync: float,
               vocab: Vocab, merge_enabled: bool = True,
               sync_enabled: bool = True) -> list[dict]:
    """Cross-branch merge then leader synchronization.

    Merge fills a destination's masked position from a compatible source only
    when the destination's own probability for the proposed token clears the
    merge gate.  Sync copies the leader's row, cache, and probability map
    into any branch lagging by more than the sync threshold.
    """
    events: list[dict] = []
    mask_id = vocab.mask_id
    leader = _leader(branches)
    if leader.tokens_decoded == 0:
        return events
    participants = [b for b in branches if not b.done]

    if merge_enabled:
        order = sorted(participants, key=lambda b: (b.tokens_decoded, b.index))
        for dest in order:
            drow = rows[dest.index]
            sources = [s for s in participants
                       if s.index != dest.index
                       and _compatible(drow, rows[s.index], mask_id)]
            if sources:
                union = sorted({int(p) for s in sources
                                for p in range(s.window.start, s.window.end)})
                for i in union:
                    if drow.tokens[i] != mask_id:
                        continue
                    if not dest.prob_covered[i]:
                        continue
                    cands = [s for s in sources if rows[s.index].tokens[i] != mask_id]
                    if not cands:
                        continue
                    best = max(cands,
                               key=lambda s: dest.prob_map[i, rows[s.index].tokens[i]])
                    token = int(rows[best.index].tokens[i])
                    prob = float(dest.prob_map[i, token])
                    if prob > tau_merge:
                        drow.tokens[i] = token
                        dest.tokens_merged += 1
                        dest.refresh_decoded(drow, mask_id)
                        events.append({"kind": "merge", "dest": dest.index,
                                       "source": best.index, "pos": i,
                                       "token": token, "prob": prob})
            while window_complete(drow, dest.window, mask_id) and not dest.done:
                advance_block(dest, drow, mask_id)

    if sync_enabled:
        leader = _leader(branches)  # merges may have changed the ranking
        for dest in participants:
            if dest.index == leader.index or dest.done:
                continue
            gap = leader.tokens_decoded - dest.tokens_decoded
            if gap > tau_sync:
                rows[dest.index] = rows[leader.index].copy()
                caches[dest.index] = caches[leader.index].copy()
                dest.prob_map = leader.prob_map.copy()
                dest.prob_covered = leader.prob_covered.copy()
                realign_to_first_mask(dest, rows[dest.index], mask_id)
                dest.refresh_decoded(rows[dest.index], mask_id)
                events.append({"kind": "sync", "dest": dest.index,
                               "leader": leader.index, "gap": int(gap)})
    return events


def _leader(branches: list[BranchState]) -> BranchState:
    return max(branches, key=lambda b: (b.tokens_decoded, -b.block_size))


def select_eos_winner(branches: list[BranchState], rows: list[SequenceRow],
                      vocab: Vocab) -> BranchState:
    ready = [b for b in branches
             if check_eos(b, rows[b.index], vocab) == EOS_READY]
    if not ready:
        raise ContractError("select_eos_winner requires an eos-ready branch")
    return max(ready, key=lambda b: (b.tokens_decoded, -b.block_size))


def run_blockbatch(params: ModelParams, task: Task, cfg: SchedulerConfig,
                   forward_hook=None, forward_observer=None) -> GenerationResult:
    """The full fused loop: prefill, batched block denoising, merge/sync,
    periodic refresh, early EOS return, final selection by progress."""
    cfg.validate()
    vocab = params.vocab
    if cfg.gen_len != task.gen_len:
        raise ConfigError("cfg.gen_len does not match the task")
    mask_id = vocab.mask_id
    rows = [task.fresh_row(vocab) for _ in cfg.block_sizes]
    length = len(rows[0])
    prompt_len = rows[0].prompt_len
    branches = []
    for i, b in enumerate(cfg.block_sizes):
        st = BranchState(index=i, block_size=b,
                         window=BlockWindow(prompt_len, min(prompt_len + b, length)),
                         prob_map=np.zeros((length, vocab.n_out)),
                         prob_covered=np.zeros(length, dtype=bool))
        branches.append(st)

    nfe = NfeCounter()
    trace: list[TraceEvent] = []
    step = 0

    def charge(kind: str) -> None:
        if kind == "init":
            nfe.nfe_init += 1
        elif kind == "block":
            nfe.nfe_block += 1
        else:
            nfe.nfe_refresh += 1
        if forward_hook is not None:
            forward_hook(kind)

    def decoded_snapshot() -> tuple[int, ...]:
        return tuple(b.tokens_decoded for b in branches)

    def emit(kind: str, branch: int | None = None, **extra) -> None:
        nonlocal step
        trace.append(TraceEvent(step, kind, branch, decoded_snapshot(),
                                nfe.snapshot(), _jsonify(extra)))
        step += 1

    def consistency(indices: list[int]) -> dict[int, float]:
        out = {}
        for k in indices:
            _, fresh = full_forward(params, rows[k], task.target)
            out[k] = float(np.linalg.norm(kv_vectorize(caches[k]) - kv_vectorize(fresh)))
        return out

    def kv_extra(deltas: dict[int, np.ndarray]) -> dict:
        extra = {}
        if cfg.log_kv != "none":
            extra["kv_delta"] = {k: float(np.linalg.norm(v)) for k, v in deltas.items()}
        if cfg.log_kv == "full":
            extra["kv"] = {k: kv_vectorize(caches[k]).tolist() for k in deltas}
        return extra

    # ---- prefill ----
    out_full, caches = init_full_forward(params, rows, task.target)
    charge("init")
    # A branch's probability snapshot covers only its own window queries, so
    # merge proposals far ahead of its frontier stay ineligible.
    for b in branches:
        masked = rows[b.index].masked_positions(mask_id, b.window)
        if len(masked):
            _update_prob_map(b, out_full.restrict(masked))
    emit("init", extra_nfe=None,
         **kv_extra({b.index: kv_vectorize(caches[b.index]) for b in branches}
                    if cfg.log_kv != "none" else {}))
    for b in branches:
        masked = rows[b.index].masked_positions(mask_id, b.window)
        if len(masked):
            commits = confidence_transition(out_full.restrict(masked), rows[b.index],
                                            b.window, cfg.tau_conf)
            b.refresh_decoded(rows[b.index], mask_id)
            emit("decode", b.index, commits=len(commits))
    for b in branches:
        while window_complete(rows[b.index], b.window, mask_id) and not b.done:
            advance_block(b, rows[b.index], mask_id)
    for ev in merge_sync(rows, caches, branches, cfg.tau_merge, cfg.tau_sync,
                         vocab, cfg.merge_enabled, cfg.sync_enabled):
        emit(ev.pop("kind"), ev.pop("dest"), **ev)

    events_since_refresh = 0
    hard_cap = HARD_CAP_FACTOR * cfg.gen_len * len(cfg.block_sizes) + 16
    iteration = 0

    def build_result(winner: BranchState, eos_pos: int | None) -> GenerationResult:
        emit("finish", winner.index, eos=eos_pos)
        row = rows[winner.index]
        return GenerationResult(row=row, branch_index=winner.index,
                                block_size=winner.block_size, nfe=nfe, trace=trace,
                                correct=exact_match(row, task, vocab),
                                tokens_decoded=winner.tokens_decoded,
                                eos_position=eos_pos)

    while any(not b.done for b in branches):
        iteration += 1
        if nfe.total > hard_cap or iteration > 10 * hard_cap:
            raise RunawayError(f"blockbatch run exceeded the hard cap ({hard_cap})")
        active = get_active_branches(branches, rows, mask_id)
        if active:
            packed = pack_active_blocks(rows, branches, active, mask_id)
            if forward_observer is not None:
                pre_rows = [rows[k].copy() for k in active]
                pre_caches = [caches[k].copy() for k in active]
            e_before = consistency(active) if cfg.log_consistency else None
            pre_kv = ({k: kv_vectorize(caches[k]) for k in active}
                      if cfg.log_kv != "none" else {})
            outputs = batched_block_forward(params, packed, rows, caches,
                                            branches, task.target)
            charge("block")
            events_since_refresh += 1
            if forward_observer is not None:
                forward_observer("block", active, pre_rows, pre_caches,
                                 [branches[k].window for k in active], outputs,
                                 [caches[k] for k in active])
            extra = kv_extra({k: kv_vectorize(caches[k]) - pre_kv[k] for k in pre_kv})
            if cfg.log_consistency:
                extra["E_before"] = e_before
                extra["E_after"] = consistency(active)
            emit("block_forward", None, active=list(active), **extra)

            ready: list[BranchState] = []
            for k in active:
                b = branches[k]
                commits = confidence_transition(outputs[k], rows[k], b.window,
                                                cfg.tau_conf)
                _update_prob_map(b, outputs[k])
                b.refresh_decoded(rows[k], mask_id)
                emit("decode", k, commits=len(commits))
                status = check_eos(b, rows[k], vocab)
                if status == EOS_READY:
                    ready.append(b)
                    emit("eos_ready", k, eos=earliest_eos(rows[k], vocab))
                elif status == EOS_PENDING:
                    realign_for_eos(b, rows[k], vocab)
                    emit("eos_pending", k)
            if ready:
                winner = select_eos_winner(branches, rows, vocab)
                return build_result(winner, earliest_eos(rows[winner.index], vocab))
        for b in branches:
            while window_complete(rows[b.index], b.window, mask_id) and not b.done:
                advance_block(b, rows[b.index], mask_id)
        for ev in merge_sync(rows, caches, branches, cfg.tau_merge, cfg.tau_sync,
                             vocab, cfg.merge_enabled, cfg.sync_enabled):
            emit(ev.pop("kind"), ev.pop("dest"), **ev)
        if events_since_refresh >= cfg.refresh_interval:
            to_refresh = [b.index for b in branches if not b.done]
            if to_refresh:
                e_before = consistency(to_refresh) if cfg.log_consistency else None
                pre_kv = ({k: kv_vectorize(caches[k]) for k in to_refresh}
                          if cfg.log_kv != "none" else {})
                for k in to_refresh:
                    out, caches[k] = full_forward(params, rows[k], task.target)
                    masked = rows[k].masked_positions(mask_id, branches[k].window)
                    if len(masked):
                        _update_prob_map(branches[k], out.restrict(masked))
                charge("refresh")
                extra = kv_extra({k: kv_vectorize(caches[k]) - pre_kv[k]
                                  for k in pre_kv})
                if cfg.log_consistency:
                    extra["E_before"] = e_before
                    extra["E_after"] = consistency(to_refresh)
                emit("refresh", None, active=list(to_refresh), **extra)
            events_since_refresh = 0

    winner = max(branches, key=lambda b: (b.tokens_decoded, -b.block_size))
    return build_result(winner, earliest_eos(rows[winner.index], vocab))


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_trace(path, trace: list[TraceEvent]) -> None:
    """Line-delimited JSON trace with a schema-version header line."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": TRACE_SCHEMA}) + "\n")
        for event in trace:
            fh.write(json.dumps(_jsonify(event.to_record())) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != TRACE_SCHEMA:
            raise ContractError(f"unknown trace schema: {header}")
        return [json.loads(line) for line in fh if line.strip()]
