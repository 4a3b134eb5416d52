"""Confidence-gated transition rule, block-window lifecycle, and the
single-branch decoder used as the baseline and equivalence oracle.

Commits follow the deterministic rule: a masked position in the active window
commits its argmax token when its top-1 confidence reaches the threshold, and
the single most confident masked position in the window always commits, so
every pass makes progress.  Ties break toward the lowest position index and
the lowest token id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, RunawayError
from .model import (BlockWindow, DenoiseOutput, KvCache, ModelParams,
                    SequenceRow, Task, Vocab, block_forward, exact_match,
                    full_forward)

EOS_NONE = "none"
EOS_PENDING = "pending"
EOS_READY = "ready"

HARD_CAP_FACTOR = 4


@dataclass
class DecodeConfig:
    block_size: int
    gen_len: int = 256
    tau_conf: float = 0.9
    refresh_interval: int = 32

    def validate(self) -> None:
        if not 0.0 <= self.tau_conf <= 1.0:
            raise ConfigError(f"tau_conf {self.tau_conf} outside [0, 1]")
        if self.gen_len < 1:
            raise ConfigError("gen_len must be >= 1")
        if self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")


@dataclass
class NfeCounter:
    nfe_init: int = 0
    nfe_block: int = 0
    nfe_refresh: int = 0

    @property
    def total(self) -> int:
        return self.nfe_init + self.nfe_block + self.nfe_refresh

    def snapshot(self) -> tuple[int, int, int]:
        return (self.nfe_init, self.nfe_block, self.nfe_refresh)


@dataclass
class TraceEvent:
    step: int
    kind: str  # init | block_forward | decode | merge | sync | refresh | eos_pending | eos_ready | finish
    branch: int | None
    decoded: tuple[int, ...]
    nfe: tuple[int, int, int]
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {"step": self.step, "kind": self.kind, "branch": self.branch,
               "decoded": list(self.decoded), "nfe": list(self.nfe)}
        if self.extra:
            rec["extra"] = self.extra
        return rec


@dataclass
class BranchState:
    """One block-size branch: window bounds, progress, probability snapshot."""

    index: int
    block_size: int
    window: BlockWindow
    done: bool = False
    tokens_decoded: int = 0
    tokens_merged: int = 0
    prob_map: np.ndarray | None = None      # (L, n_out) latest per-position probs
    prob_covered: np.ndarray | None = None  # (L,) bool: position ever queried

    def refresh_decoded(self, row: SequenceRow, mask_id: int) -> None:
        gen = row.tokens[row.prompt_len:]
        self.tokens_decoded = int(np.count_nonzero(gen != mask_id))


@dataclass
class GenerationResult:
    row: SequenceRow
    branch_index: int
    block_size: int
    nfe: NfeCounter
    trace: list[TraceEvent]
    correct: bool
    tokens_decoded: int
    eos_position: int | None


def confidence_transition(output: DenoiseOutput, row: SequenceRow,
                          window: BlockWindow, tau_conf: float) -> list[tuple[int, int]]:
    """Apply the deterministic transition to the masked window positions.

    Returns the committed (position, token) pairs, sorted by position.
    """
    masked = np.flatnonzero(row.tokens == _mask_id_of(output))
    masked = masked[(masked >= window.start) & (masked < window.end)]
    if sorted(int(p) for p in output.positions) != [int(p) for p in masked]:
        raise ContractError("output positions do not match the masked window positions")
    if len(masked) == 0:
        return []
    out = output.restrict(masked)
    conf = out.probs.max(axis=1)
    choice = out.probs.argmax(axis=1)
    star = int(np.argmax(conf))  # first max: lowest position on ties
    commit = (conf >= tau_conf)
    commit[star] = True
    commits = [(int(masked[i]), int(choice[i])) for i in np.flatnonzero(commit)]
    for pos, tok in commits:
        row.tokens[pos] = tok
    return commits


def _mask_id_of(output: DenoiseOutput) -> int:
    # Output columns cover regular tokens plus eos; the mask id is the next id.
    return output.probs.shape[1]


def window_complete(row: SequenceRow, window: BlockWindow, mask_id: int) -> bool:
    if window.empty:
        return True
    return not (row.tokens[window.start:window.end] == mask_id).any()


def advance_block(branch: BranchState, row: SequenceRow, mask_id: int) -> BranchState:
    """Slide the window past the completed block; mark done at sequence end."""
    if not window_complete(row, branch.window, mask_id):
        raise ContractError("advance_block called with an incomplete window")
    length = len(row)
    start = branch.window.end
    if start >= length:
        branch.window = BlockWindow(length, length)
        branch.done = True
    else:
        branch.window = BlockWindow(start, min(start + branch.block_size, length))
    return branch


def earliest_eos(row: SequenceRow, vocab: Vocab) -> int | None:
    gen = row.tokens[row.prompt_len:]
    hits = np.flatnonzero(gen == vocab.eos_id)
    return int(hits[0]) + row.prompt_len if len(hits) else None


def check_eos(branch: BranchState, row: SequenceRow, vocab: Vocab) -> str:
    eos = earliest_eos(row, vocab)
    if eos is None:
        return EOS_NONE
    prefix = row.tokens[row.prompt_len:eos]
    return EOS_PENDING if (prefix == vocab.mask_id).any() else EOS_READY


def realign_for_eos(branch: BranchState, row: SequenceRow, vocab: Vocab) -> None:
    """EOS cycle: denoise only the positions before the earliest eos."""
    eos = earliest_eos(row, vocab)
    if eos is None:
        return
    masked = np.flatnonzero(row.tokens[:eos] == vocab.mask_id)
    if len(masked) == 0:
        return
    first = int(masked[0])
    branch.window = BlockWindow(first, min(first + branch.block_size, eos))


def realign_to_first_mask(branch: BranchState, row: SequenceRow, mask_id: int) -> None:
    masked = np.flatnonzero(row.tokens == mask_id)
    length = len(row)
    if len(masked) == 0:
        branch.window = BlockWindow(length, length)
        branch.done = True
        return
    first = int(masked[0])
    branch.window = BlockWindow(first, min(first + branch.block_size, length))


def apply_preset(row: SequenceRow, preset: list[tuple[int, int]] | None) -> None:
    if not preset:
        return
    for pos, tok in preset:
        if pos < row.prompt_len or pos >= len(row):
            raise ContractError(f"preset position {pos} outside the generation region")
        row.tokens[pos] = tok


def single_branch_decode(params: ModelParams, task: Task, cfg: DecodeConfig,
                         preset: list[tuple[int, int]] | None = None) -> GenerationResult:
    """Full single-branch decode: prefill forward, block denoising with KV
    reuse, periodic full refresh, EOS cycle handling."""
    cfg.validate()
    vocab = params.vocab
    if cfg.gen_len != task.gen_len:
        raise ConfigError("cfg.gen_len does not match the task")
    row = task.fresh_row(vocab)
    apply_preset(row, preset)
    length = len(row)
    branch = BranchState(index=0, block_size=cfg.block_size,
                         window=BlockWindow(row.prompt_len,
                                            min(row.prompt_len + cfg.block_size, length)))
    branch.refresh_decoded(row, vocab.mask_id)
    nfe = NfeCounter()
    trace: list[TraceEvent] = []
    step = 0

    def emit(kind, branch_idx=0, **extra):
        nonlocal step
        trace.append(TraceEvent(step, kind, branch_idx, (branch.tokens_decoded,),
                                nfe.snapshot(), dict(extra)))
        step += 1

    out, cache = full_forward(params, row, task.target)
    nfe.nfe_init += 1
    emit("init")
    masked = row.masked_positions(vocab.mask_id, branch.window)
    if len(masked):
        commits = confidence_transition(out.restrict(masked), row, branch.window,
                                        cfg.tau_conf)
        branch.refresh_decoded(row, vocab.mask_id)
        emit("decode", commits=len(commits))
    while window_complete(row, branch.window, vocab.mask_id) and not branch.done:
        advance_block(branch, row, vocab.mask_id)

    block_events = 0
    hard_cap = HARD_CAP_FACTOR * cfg.gen_len + 16
    eos_position = None
    while not branch.done:
        if nfe.total > hard_cap:
            raise RunawayError(f"single-branch decode exceeded {hard_cap} forwards")
        masked = row.masked_positions(vocab.mask_id, branch.window)
        if len(masked):
            out, cache = block_forward(params, row, cache, branch.window, task.target)
            nfe.nfe_block += 1
            block_events += 1
            emit("block_forward")
            commits = confidence_transition(out, row, branch.window, cfg.tau_conf)
            branch.refresh_decoded(row, vocab.mask_id)
            emit("decode", commits=len(commits))
            status = check_eos(branch, row, vocab)
            if status == EOS_READY:
                eos_position = earliest_eos(row, vocab)
                branch.done = True
                emit("eos_ready", eos=eos_position)
                break
            if status == EOS_PENDING:
                realign_for_eos(branch, row, vocab)
                emit("eos_pending")
        while window_complete(row, branch.window, vocab.mask_id) and not branch.done:
            advance_block(branch, row, vocab.mask_id)
        if not branch.done and block_events >= cfg.refresh_interval:
            _, cache = full_forward(params, row, task.target)
            nfe.nfe_refresh += 1
            block_events = 0
            emit("refresh")
    emit("finish")
    return GenerationResult(row=row, branch_index=0, block_size=cfg.block_size,
                            nfe=nfe, trace=trace,
                            correct=exact_match(row, task, vocab),
                            tokens_decoded=branch.tokens_decoded,
                            eos_position=eos_position)


def vanilla_decode(params: ModelParams, task: Task, cfg: DecodeConfig) -> GenerationResult:
    """Reference diffusion decode: one full forward per round with no cache
    reuse and exactly one committed token per round, so a full generation
    costs gen_len forwards."""
    cfg.validate()
    vocab = params.vocab
    if cfg.gen_len != task.gen_len:
        raise ConfigError("cfg.gen_len does not match the task")
    row = task.fresh_row(vocab)
    length = len(row)
    branch = BranchState(index=0, block_size=cfg.gen_len,
                         window=BlockWindow(row.prompt_len, length))
    nfe = NfeCounter()
    trace: list[TraceEvent] = []
    step = 0
    eos_position = None
    hard_cap = HARD_CAP_FACTOR * cfg.gen_len + 16
    while True:
        if nfe.total > hard_cap:
            raise RunawayError(f"vanilla decode exceeded {hard_cap} forwards")
        eos = earliest_eos(row, vocab)
        end = eos if eos is not None else length
        window = BlockWindow(row.prompt_len, end)
        masked = row.masked_positions(vocab.mask_id, window)
        if len(masked) == 0:
            if eos is not None:
                eos_position = eos
            break
        out, _ = full_forward(params, row, task.target)
        nfe.nfe_block += 1
        # tau 1.0: only the most confident masked position commits each round
        confidence_transition(out.restrict(masked), row, window, 1.0)
        branch.refresh_decoded(row, vocab.mask_id)
        trace.append(TraceEvent(step, "block_forward", 0, (branch.tokens_decoded,),
                                nfe.snapshot()))
        step += 1
    branch.refresh_decoded(row, vocab.mask_id)
    trace.append(TraceEvent(step, "finish", 0, (branch.tokens_decoded,), nfe.snapshot()))
    return GenerationResult(row=row, branch_index=0, block_size=cfg.gen_len,
                            nfe=nfe, trace=trace,
                            correct=exact_match(row, task, vocab),
                            tokens_decoded=branch.tokens_decoded,
                            eos_position=eos_position)
