"""Deterministic seeded masked denoiser with block-local KV-cache semantics.

The denoiser is a small bidirectional attention network whose output logits
are blended with a boost toward a planted target sequence.  The boost at a
masked position grows with the fraction of nearby committed tokens that agree
with the target, so confidence spreads outward from committed context.  A
sparse "spike" nonlinearity on the head logits makes a few positions look
confidently decodable before any context has been committed, which is what
lets different block sizes trace genuinely different trajectories.

Vectorization order of the KV cache is fixed: layer-major, position-minor,
key row before value row.  ``D = layers * L * 2 * d_model``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, StateError

CATEGORY_COUNT = 4


def _default_categories(size: int) -> dict[int, str]:
    return {t: f"cat{t % CATEGORY_COUNT}" for t in range(size)}


@dataclass(frozen=True)
class Vocab:
    """Token id layout: regular ids 0..size-1, then eos, then mask.

    The eos id participates in the output head (it must be predictable);
    the mask id never appears in model outputs.
    """

    size: int = 32
    category_of: dict[int, str] = field(default_factory=lambda: _default_categories(32))

    def __post_init__(self):
        if self.size < 2:
            raise ConfigError("vocab needs at least 2 regular tokens")
        missing = [t for t in range(self.size) if t not in self.category_of]
        if missing:
            raise ConfigError(f"category_of not total over regular tokens: {missing[:3]}")

    @property
    def eos_id(self) -> int:
        return self.size

    @property
    def mask_id(self) -> int:
        return self.size + 1

    @property
    def n_out(self) -> int:
        """Output-head width: regular tokens plus eos (mask excluded)."""
        return self.size + 1

    @property
    def n_extended(self) -> int:
        return self.size + 2


@dataclass(frozen=True)
class ModelDims:
    layers: int = 2
    d_model: int = 32
    max_len: int = 384


@dataclass(frozen=True)
class BlockWindow:
    """Half-open absolute position range [start, end) of an active block."""

    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise ConfigError(f"window start {self.start} > end {self.end}")

    def positions(self) -> np.ndarray:
        return np.arange(self.start, self.end)

    @property
    def empty(self) -> bool:
        return self.start >= self.end


@dataclass
class SequenceRow:
    """One branch's token buffer: committed prompt plus a maskable tail."""

    tokens: np.ndarray
    prompt_len: int

    def __len__(self) -> int:
        return len(self.tokens)

    def copy(self) -> "SequenceRow":
        return SequenceRow(self.tokens.copy(), self.prompt_len)

    def masked_positions(self, mask_id: int, window: BlockWindow | None = None) -> np.ndarray:
        pos = np.flatnonzero(self.tokens == mask_id)
        if window is not None:
            pos = pos[(pos >= window.start) & (pos < window.end)]
        return pos

    def generated(self, vocab: Vocab) -> np.ndarray:
        return self.tokens[self.prompt_len:]


@dataclass(frozen=True)
class ModelParams:
    """Immutable seeded weights. Safe to share across concurrent decodes."""

    seed: int
    vocab: Vocab
    dims: ModelDims
    gamma: float
    radius: int
    head_scale: float
    spike_cut: float
    spike_gain: float
    emb: np.ndarray          # (n_extended, d)
    pos: np.ndarray          # (max_len, d)
    wq: tuple[np.ndarray, ...]
    wk: tuple[np.ndarray, ...]
    wv: tuple[np.ndarray, ...]
    wo: tuple[np.ndarray, ...]
    w_head: np.ndarray       # (d, n_out)


@dataclass
class KvCache:
    """Per-layer, per-position key/value rows plus a validity flag."""

    keys: np.ndarray    # (layers, L, d)
    values: np.ndarray  # (layers, L, d)
    valid: np.ndarray   # (L,) bool

    @classmethod
    def empty(cls, layers: int, length: int, d_model: int) -> "KvCache":
        return cls(
            keys=np.zeros((layers, length, d_model)),
            values=np.zeros((layers, length, d_model)),
            valid=np.zeros(length, dtype=bool),
        )

    @property
    def length(self) -> int:
        return self.keys.shape[1]

    def copy(self) -> "KvCache":
        return KvCache(self.keys.copy(), self.values.copy(), self.valid.copy())


@dataclass(frozen=True)
class DenoiseOutput:
    """Logits/probabilities for the queried (masked) positions.

    Column ``v`` of each row is token id ``v``; the last column is eos.
    The mask token has no column.
    """

    positions: np.ndarray   # (n,) absolute positions queried
    logits: np.ndarray      # (n, n_out)
    probs: np.ndarray       # (n, n_out)

    def restrict(self, positions: np.ndarray) -> "DenoiseOutput":
        """Sub-output covering exactly ``positions`` (must all be queried)."""
        index = {int(p): i for i, p in enumerate(self.positions)}
        try:
            rows = np.array([index[int(p)] for p in positions], dtype=int)
        except KeyError as exc:
            raise ContractError(f"position {exc} was not queried") from exc
        return DenoiseOutput(np.asarray(positions, dtype=int),
                             self.logits[rows], self.probs[rows])


@dataclass(frozen=True)
class Task:
    """A seeded synthetic request: prompt tokens plus a planted target."""

    seed: int
    prompt: np.ndarray
    target: np.ndarray  # length gen_len, regular tokens with optional eos

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    @property
    def gen_len(self) -> int:
        return len(self.target)

    def fresh_row(self, vocab: Vocab) -> SequenceRow:
        tokens = np.full(self.prompt_len + self.gen_len, vocab.mask_id, dtype=np.int64)
        tokens[:self.prompt_len] = self.prompt
        return SequenceRow(tokens, self.prompt_len)

    def effective_len(self, vocab: Vocab) -> int:
        """Number of target positions scored: up to and including the first eos."""
        eos = np.flatnonzero(self.target == vocab.eos_id)
        return int(eos[0]) + 1 if len(eos) else self.gen_len


def build_model(seed: int, vocab: Vocab, dims: ModelDims = ModelDims(),
                gamma: float = 8.0, radius: int = 4,
                head_scale: float = 1.0, spike_cut: float = 0.72,
                spike_gain: float = 33.0) -> ModelParams:
    """Generate all weights from a counter-based PRNG keyed on ``seed``.

    Entries are standard normal scaled by 1/sqrt(d_model); matrices are drawn
    in a fixed order so equal seeds give bit-identical parameters.
    """
    if dims.layers < 1 or dims.d_model < 1 or dims.max_len < 1:
        raise ConfigError(f"non-positive model dimensions: {dims}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    scale = 1.0 / np.sqrt(dims.d_model)

    def mat(rows, cols):
        return rng.standard_normal((rows, cols)) * scale

    emb = mat(vocab.n_extended, dims.d_model)
    pos = mat(dims.max_len, dims.d_model)
    wq, wk, wv, wo = [], [], [], []
    for _ in range(dims.layers):
        wq.append(mat(dims.d_model, dims.d_model))
        wk.append(mat(dims.d_model, dims.d_model))
        wv.append(mat(dims.d_model, dims.d_model))
        wo.append(mat(dims.d_model, dims.d_model))
    w_head = mat(dims.d_model, vocab.n_out)
    return ModelParams(seed=seed, vocab=vocab, dims=dims, gamma=gamma,
                       radius=radius, head_scale=head_scale,
                       spike_cut=spike_cut, spike_gain=spike_gain,
                       emb=emb, pos=pos,
                       wq=tuple(wq), wk=tuple(wk), wv=tuple(wv), wo=tuple(wo),
                       w_head=w_head)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _full_target(row: SequenceRow, target: np.ndarray | None) -> np.ndarray | None:
    if target is None:
        return None
    if len(target) != len(row) - row.prompt_len:
        raise ContractError("target length does not match the generation region")
    return np.concatenate([row.tokens[:row.prompt_len], target])


def _agreement(row: SequenceRow, full_target: np.ndarray,
               positions: np.ndarray, radius: int, mask_id: int) -> np.ndarray:
    """Per-position fraction of committed neighbors (within radius) matching
    the target.  Zero where no neighbor is committed."""
    tokens = row.tokens
    length = len(tokens)
    committed = (tokens != mask_id).astype(np.float64)
    matching = committed * (tokens == full_target)
    cum_c = np.concatenate([[0.0], np.cumsum(committed)])
    cum_m = np.concatenate([[0.0], np.cumsum(matching)])
    lo = np.maximum(positions - radius, 0)
    hi = np.minimum(positions + radius + 1, length)
    n_committed = cum_c[hi] - cum_c[lo] - committed[positions]
    n_matching = cum_m[hi] - cum_m[lo] - matching[positions]
    out = np.zeros(len(positions))
    nz = n_committed > 0
    out[nz] = n_matching[nz] / n_committed[nz]
    return out


def _forward(params: ModelParams, row: SequenceRow, target: np.ndarray | None,
             cache: KvCache, window_positions: np.ndarray) -> tuple[DenoiseOutput, KvCache]:
    """Shared forward path: recompute KV for ``window_positions`` only,
    attending to cached KV everywhere else; report logits at the masked
    subset of the window."""
    tokens = row.tokens
    length = len(tokens)
    d = params.dims.d_model
    if length > params.dims.max_len:
        raise ContractError(f"sequence length {length} exceeds max_len {params.dims.max_len}")

    new_cache = cache.copy()
    h = params.emb[tokens[window_positions]] + params.pos[window_positions]
    for layer in range(params.dims.layers):
        q = h @ params.wq[layer]
        k = h @ params.wk[layer]
        v = h @ params.wv[layer]
        keys_all = new_cache.keys[layer].copy()
        values_all = new_cache.values[layer].copy()
        keys_all[window_positions] = k
        values_all[window_positions] = v
        scores = (q @ keys_all.T) / np.sqrt(d)
        attn = _softmax(scores)
        h = h + (attn @ values_all) @ params.wo[layer]
        new_cache.keys[layer][window_positions] = k
        new_cache.values[layer][window_positions] = v
    new_cache.valid[window_positions] = True

    masked_local = np.flatnonzero(tokens[window_positions] == params.vocab.mask_id)
    masked_pos = window_positions[masked_local]
    raw = (h[masked_local] @ params.w_head) * params.head_scale
    logits = raw + params.spike_gain * np.maximum(0.0, raw - params.spike_cut)
    full_target = _full_target(row, target)
    if full_target is not None and params.gamma != 0.0 and len(masked_pos):
        boost = params.gamma * _agreement(row, full_target, masked_pos,
                                          params.radius, params.vocab.mask_id)
        target_tok = full_target[masked_pos]
        predictable = target_tok <= params.vocab.eos_id
        rows = np.flatnonzero(predictable)
        logits[rows, target_tok[rows]] += boost[rows]
    probs = _softmax(logits)
    return DenoiseOutput(masked_pos, logits, probs), new_cache


def full_forward(params: ModelParams, row: SequenceRow,
                 target: np.ndarray | None) -> tuple[DenoiseOutput, KvCache]:
    """Recompute the whole cache from the current sequence; logits over every
    masked position."""
    length = len(row)
    empty = KvCache.empty(params.dims.layers, length, params.dims.d_model)
    return _forward(params, row, target, empty, np.arange(length))


def block_forward(params: ModelParams, row: SequenceRow, cache: KvCache,
                  window: BlockWindow,
                  target: np.ndarray | None) -> tuple[DenoiseOutput, KvCache]:
    """Recompute KV for the window only, reusing the cache elsewhere."""
    length = len(row)
    if window.start < 0 or window.end > length:
        raise ContractError(f"window {window} out of bounds for length {length}")
    outside = np.ones(length, dtype=bool)
    positions = window.positions()
    outside[positions] = False
    if not cache.valid[outside].all():
        raise StateError("cache invalid outside the active window")
    return _forward(params, row, target, cache, positions)


def kv_vectorize(cache: KvCache) -> np.ndarray:
    """Flatten to length D: layer-major, position-minor, key before value."""
    if not cache.valid.all():
        raise StateError("cannot vectorize a cache with invalid positions")
    layers, length, d = cache.keys.shape
    stacked = np.stack([cache.keys, cache.values], axis=2)  # (layers, L, 2, d)
    return stacked.reshape(layers * length * 2 * d).copy()


def kv_position_energy(vec: np.ndarray, layers: int, length: int,
                       d_model: int) -> np.ndarray:
    """Per-position squared norm of a vectorized cache (or cache delta)."""
    if vec.size != layers * length * 2 * d_model:
        raise ContractError("vector size does not match the cache layout")
    return (vec.reshape(layers, length, 2, d_model) ** 2).sum(axis=(0, 2, 3))


def make_task(seed: int, prompt_len: int, gen_len: int, vocab: Vocab) -> Task:
    """Deterministic prompt and planted target.  Roughly half of all seeds
    plant an eos inside the generation region to exercise EOS handling."""
    if prompt_len < 1 or gen_len < 1:
        raise ConfigError("prompt_len and gen_len must be positive")
    rng = np.random.Generator(np.random.Philox(key=(seed << 16) + 0x7A5))
    prompt = rng.integers(0, vocab.size, size=prompt_len, dtype=np.int64)
    target = rng.integers(0, vocab.size, size=gen_len, dtype=np.int64)
    if gen_len >= 4 and rng.random() < 0.5:
        eos_pos = int(rng.integers(gen_len // 4, gen_len))
        target[eos_pos] = vocab.eos_id
    return Task(seed=seed, prompt=prompt, target=target)


def exact_match(row: SequenceRow, task: Task, vocab: Vocab) -> bool:
    """Generated tokens equal the target up to and including its first eos."""
    eff = task.effective_len(vocab)
    gen = row.tokens[row.prompt_len:row.prompt_len + eff]
    return bool(np.array_equal(gen, task.target[:eff]))


def serialize_params(params: ModelParams) -> bytes:
    """Little-endian float64 dump, matrices in generation order, row-major."""
    parts = [params.emb, params.pos]
    for layer in range(params.dims.layers):
        parts.extend([params.wq[layer], params.wk[layer],
                      params.wv[layer], params.wo[layer]])
    parts.append(params.w_head)
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in parts)
