"""Decoder attention substrate: masked softmax, a seeded toy decoder with a
physically evictable KV cache, and structured synthetic attention traces.

Token indices are 0-based throughout the package. Step ``q`` is the step at
which token ``q`` is generated, so the attention row of step ``q`` has
``q + 1`` entries (keys ``0..q``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import (
    BadTokenError,
    ConfigError,
    EmptyKeepSetError,
    InvariantViolationError,
    NonFiniteInputError,
    ShapeMismatchError,
)

ROW_SUM_TOL = 1e-6


def softmax_masked_row(logits, keep) -> np.ndarray:
    """Softmax over the positions in ``keep``; every other position is 0.

    ``keep`` may be a boolean mask the length of ``logits`` or an iterable of
    integer positions.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteInputError("logits contain NaN or infinity")
    keep = np.asarray(keep)
    if keep.dtype == bool:
        if keep.shape != logits.shape:
            raise ShapeMismatchError(
                f"keep mask shape {keep.shape} does not match logits {logits.shape}"
            )
        mask = keep
    else:
        idx = keep.astype(np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= logits.size):
            raise ShapeMismatchError("keep index out of range")
        mask = np.zeros(logits.shape, dtype=bool)
        mask[idx] = True
    if not mask.any():
        raise EmptyKeepSetError("softmax over an empty keep set")

    out = np.zeros_like(logits)
    kept = logits[mask]
    e = np.exp(kept - kept.max())
    out[mask] = e / e.sum()
    return out


# --------------------------------------------------------------------------
# Attention traces
# --------------------------------------------------------------------------


@dataclass
class AttentionTrace:
    """Per-(layer, head) lower-triangular attention matrices.

    ``scores`` has shape ``(n_layers, n_heads, seq_len, seq_len)``; entry
    ``[l, h, q, k]`` is the probability that query step ``q`` puts on key ``k``.
    Entries with ``k > q`` are causally absent and stored as exact zeros.
    """

    scores: np.ndarray
    token_labels: list[str] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 4 or self.scores.shape[2] != self.scores.shape[3]:
            raise ShapeMismatchError(
                f"trace scores must be (layers, heads, T, T), got {self.scores.shape}"
            )
        if self.token_labels is not None and len(self.token_labels) != self.seq_len:
            raise ShapeMismatchError("token_labels length differs from seq_len")

    @property
    def n_layers(self) -> int:
        return self.scores.shape[0]

    @property
    def n_heads(self) -> int:
        return self.scores.shape[1]

    @property
    def seq_len(self) -> int:
        return self.scores.shape[2]

    def row(self, layer: int, head: int, q: int) -> np.ndarray:
        return self.scores[layer, head, q, : q + 1]

    def step_rows(self, q: int) -> np.ndarray:
        """All heads' rows for step ``q`` as an ``(n_layers, n_heads, q + 1)`` array."""
        return self.scores[:, :, q, : q + 1]

    def validate(self, tol: float = ROW_SUM_TOL) -> "AttentionTrace":
        check_trace_invariants(self.scores, tol)
        return self

    def __eq__(self, other):
        if not isinstance(other, AttentionTrace):
            return NotImplemented
        return (
            self.scores.shape == other.scores.shape
            and bool(np.array_equal(self.scores, other.scores))
            and self.token_labels == other.token_labels
        )


def check_trace_invariants(scores: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    """Raise :class:`InvariantViolationError` at the first bad entry or row."""
    L, H, T, _ = scores.shape
    upper = np.triu(np.ones((T, T), dtype=bool), k=1)

    bad = ~np.isfinite(scores) | (scores < 0)
    if bad.any():
        l, h, q, k = (int(i) for i in np.argwhere(bad)[0])
        raise InvariantViolationError(
            f"invalid score {scores[l, h, q, k]!r} at layer={l} head={h} q={q} k={k}",
            (l, h, q, k),
        )
    acausal = (scores != 0) & upper
    if acausal.any():
        l, h, q, k = (int(i) for i in np.argwhere(acausal)[0])
        raise InvariantViolationError(
            f"nonzero score above the causal diagonal at layer={l} head={h} q={q} k={k}",
            (l, h, q, k),
        )
    sums = scores.sum(axis=-1)
    off = np.abs(sums - 1.0) > tol
    if off.any():
        l, h, q = (int(i) for i in np.argwhere(off)[0])
        raise InvariantViolationError(
            f"row sum {sums[l, h, q]!r} at layer={l} head={h} q={q} is not 1",
            (l, h, q, None),
        )


def trace_from_rows(rows: Sequence[np.ndarray], meta: dict | None = None) -> AttentionTrace:
    """Stack per-step ``(n_layers, n_heads, q + 1)`` rows into a trace."""
    if not rows:
        raise ShapeMismatchError("no rows to assemble")
    L, H = rows[0].shape[:2]
    T = len(rows)
    scores = np.zeros((L, H, T, T))
    for q, r in enumerate(rows):
        if r.shape != (L, H, q + 1):
            raise ShapeMismatchError(f"row {q} has shape {r.shape}, expected {(L, H, q + 1)}")
        scores[:, :, q, : q + 1] = r
    return AttentionTrace(scores, meta=dict(meta or {}))


@dataclass(frozen=True)
class TraceGenConfig:
    seq_len: int
    n_layers: int = 1
    n_heads: int = 1
    sink_strength: float = 0.0
    locality_window: int = 0
    locality_strength: float = 0.0
    heavy_hitters: tuple[tuple[int, float], ...] = ()
    noise_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "heavy_hitters", tuple((int(i), float(s)) for i, s in self.heavy_hitters)
        )
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}")
        if self.n_layers < 1 or self.n_heads < 1:
            raise ConfigError("n_layers and n_heads must be >= 1")
        if not self.noise_temperature > 0:
            raise ConfigError(f"noise_temperature must be > 0, got {self.noise_temperature}")
        if self.sink_strength < 0 or self.locality_strength < 0:
            raise ConfigError("sink and locality strengths must be nonnegative")
        if self.locality_window < 0:
            raise ConfigError("locality_window must be nonnegative")
        for idx, _ in self.heavy_hitters:
            if not 0 <= idx < self.seq_len:
                raise ConfigError(f"heavy-hitter index {idx} outside [0, {self.seq_len})")


def generate_synthetic_trace(cfg: TraceGenConfig) -> AttentionTrace:
    """Draw a trace whose logits are scaled Gaussian noise plus structural boosts.

    The logit for key ``k`` at step ``q`` is
    ``noise_temperature * z + sink + locality + heavy_hitter`` where ``z`` is
    standard normal, ``sink`` applies to token 0, ``locality`` to the trailing
    ``locality_window`` keys (including ``q`` itself) and ``heavy_hitter`` to the
    listed token indices.
    """
    rng = np.random.default_rng(cfg.seed)
    L, H, T = cfg.n_layers, cfg.n_heads, cfg.seq_len
    logits = cfg.noise_temperature * rng.standard_normal((L, H, T, T))

    boost = np.zeros((T, T))
    boost[:, 0] += cfg.sink_strength
    if cfg.locality_window > 0 and cfg.locality_strength:
        q = np.arange(T)[:, None]
        k = np.arange(T)[None, :]
        boost[(q - k >= 0) & (q - k < cfg.locality_window)] += cfg.locality_strength
    for idx, strength in cfg.heavy_hitters:
        boost[:, idx] += strength
    logits += boost

    causal = np.tril(np.ones((T, T), dtype=bool))
    logits = np.where(causal, logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    scores = e / e.sum(axis=-1, keepdims=True)
    meta = {"generator": "synthetic", **{f: getattr(cfg, f) for f in cfg.__dataclass_fields__}}
    # lists, so the metadata survives a JSON round trip unchanged
    meta["heavy_hitters"] = [list(hh) for hh in cfg.heavy_hitters]
    return AttentionTrace(scores, meta=meta)


# --------------------------------------------------------------------------
# Toy decoder and KV cache
# --------------------------------------------------------------------------


@dataclass
class ToyDecoder:
    """Attention-only decoder: embedding, then per layer a bank of heads whose
    concatenated outputs are added to the residual stream.

    All weights are drawn from ``uniform(-1/sqrt(d_head), 1/sqrt(d_head))``
    with a generator seeded by ``seed``. ``logit_scale`` multiplies the usual
    ``1/sqrt(d_head)`` logit scaling.
    """

    n_layers: int = 2
    n_heads: int = 4
    d_head: int = 16
    vocab_size: int = 64
    seed: int = 0
    logit_scale: float = 1.0

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_head, self.vocab_size) < 1:
            raise ConfigError("decoder dimensions must be >= 1")
        rng = np.random.default_rng(self.seed)
        bound = 1.0 / np.sqrt(self.d_head)
        d_model = self.d_model
        shape = (self.n_layers, self.n_heads, d_model, self.d_head)
        self.embedding = rng.uniform(-bound, bound, (self.vocab_size, d_model))
        self.w_query = rng.uniform(-bound, bound, shape)
        self.w_key = rng.uniform(-bound, bound, shape)
        self.w_value = rng.uniform(-bound, bound, shape)

    @property
    def d_model(self) -> int:
        return self.n_heads * self.d_head

    def weights(self) -> dict[str, np.ndarray]:
        return {
            "embedding": self.embedding,
            "w_query": self.w_query,
            "w_key": self.w_key,
            "w_value": self.w_value,
        }

    def new_cache(self, capacity: int | None = None) -> "KVCache":
        return KVCache(self.n_layers, self.n_heads, self.d_head, capacity)


class KVCache:
    """Per-(layer, head) stores of ``(token_index, key, value)``.

    Token indices within a head are strictly increasing; since tokens are only
    ever appended with the next step index, an evicted token cannot come back.
    """

    def __init__(self, n_layers: int, n_heads: int, d_head: int, capacity: int | None = None):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_head
        self.capacity = capacity
        self.n_seen = 0
        self._tokens = [[np.empty(0, dtype=np.int64) for _ in range(n_heads)] for _ in range(n_layers)]
        self._keys = [[np.empty((0, d_head)) for _ in range(n_heads)] for _ in range(n_layers)]
        self._values = [[np.empty((0, d_head)) for _ in range(n_heads)] for _ in range(n_layers)]

    def tokens(self, layer: int, head: int) -> np.ndarray:
        return self._tokens[layer][head]

    def head(self, layer: int, head: int):
        return self._tokens[layer][head], self._keys[layer][head], self._values[layer][head]

    def lengths(self) -> np.ndarray:
        return np.array([[len(t) for t in row] for row in self._tokens])

    def append(self, layer: int, head: int, token: int, key, value) -> None:
        toks = self._tokens[layer][head]
        if len(toks) and token <= toks[-1]:
            raise BadTokenError(f"token {token} is not newer than cached token {toks[-1]}")
        self._tokens[layer][head] = np.append(toks, token)
        self._keys[layer][head] = np.vstack([self._keys[layer][head], key])
        self._values[layer][head] = np.vstack([self._values[layer][head], value])

    def retain(self, layer: int, head: int, keep: Iterable[int]) -> None:
        """Drop every entry of one head whose token index is not in ``keep``."""
        toks = self._tokens[layer][head]
        sel = np.isin(toks, np.fromiter(keep, dtype=np.int64))
        self._tokens[layer][head] = toks[sel]
        self._keys[layer][head] = self._keys[layer][head][sel]
        self._values[layer][head] = self._values[layer][head][sel]


def _keep_positions(keepsets, layer: int, head: int, tokens: np.ndarray, new_token: int) -> np.ndarray:
    if keepsets is None:
        return np.ones(len(tokens), dtype=bool)
    ks = keepsets[layer][head] if not isinstance(keepsets, np.ndarray) else keepsets[layer, head]
    if isinstance(ks, np.ndarray) and ks.dtype == bool:
        allowed = set(np.flatnonzero(ks).tolist())
    else:
        allowed = set(int(t) for t in ks)
    allowed.add(new_token)
    return np.fromiter((int(t) in allowed for t in tokens), dtype=bool, count=len(tokens))


def decoder_step(decoder: ToyDecoder, cache: KVCache, token_id: int, keepsets=None):
    """Run one generation step, appending the new token's K/V to every head.

    Returns ``(rows, hidden)``: ``rows[l, h]`` is the attention distribution of
    the new token over token indices ``0..n`` (zero where a token is absent from
    the cache or masked out by ``keepsets``) and ``hidden`` is the final
    residual-stream vector.
    """
    if not 0 <= token_id < decoder.vocab_size:
        raise BadTokenError(f"token id {token_id} outside vocabulary of {decoder.vocab_size}")
    n = cache.n_seen
    rows = np.zeros((decoder.n_layers, decoder.n_heads, n + 1))
    x = decoder.embedding[token_id].copy()
    scale = decoder.logit_scale / np.sqrt(decoder.d_head)

    for l in range(decoder.n_layers):
        head_out = []
        for h in range(decoder.n_heads):
            q = x @ decoder.w_query[l, h]
            cache.append(l, h, n, x @ decoder.w_key[l, h], x @ decoder.w_value[l, h])
            toks, keys, values = cache.head(l, h)
            keep = _keep_positions(keepsets, l, h, toks, n)
            p = softmax_masked_row((keys @ q) * scale, keep)
            rows[l, h, toks] = p
            head_out.append(p @ values)
        x = x + np.concatenate(head_out)

    cache.n_seen = n + 1
    return rows, x


def structured_tokens(
    n: int, vocab_size: int, seed: int, n_keywords: int = 4, keyword_rate: float = 0.25
) -> np.ndarray:
    """Token stream for live runs: BOS id 0, then random ids with a few
    recurring keyword ids mixed in at ``keyword_rate``."""
    if vocab_size < n_keywords + 2:
        raise ConfigError("vocabulary too small for the requested keywords")
    rng = np.random.default_rng(seed)
    keywords = rng.choice(np.arange(1, vocab_size), n_keywords, replace=False)
    toks = rng.integers(1, vocab_size, n)
    hit = rng.random(n) < keyword_rate
    toks[hit] = rng.choice(keywords, int(hit.sum()))
    toks[0] = 0
    return toks
