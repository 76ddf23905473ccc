"""Budgets, per-head keepsets and physical eviction.

A keepset is a boolean array of shape ``(n_layers, n_heads, n + 1)`` marking the
token indices retained after step ``n``. Pruning only starts once a head holds
more than ``B`` live tokens; the token of the current step is always kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attn_model import KVCache, ToyDecoder, decoder_step
from .errors import (
    BudgetTooSmallForHybridError,
    ConfigError,
    UnknownTokenError,
    ZeroBudgetError,
)
from .scoring import Policy, ScoreState, _rank, drop_scores, init_score_state, update_scores


@dataclass(frozen=True)
class BudgetConfig:
    mode: str = "ratio"
    cache_ratio: float | None = None
    budget_count: int | None = None
    reference_len: int | None = None

    def __post_init__(self):
        if self.mode == "ratio":
            if self.cache_ratio is None or not 0.0 < self.cache_ratio <= 1.0:
                raise ConfigError(f"cache_ratio must be in (0, 1], got {self.cache_ratio}")
            if self.reference_len is None or self.reference_len < 0:
                raise ConfigError("ratio budgets need a reference_len")
        elif self.mode == "absolute":
            if self.budget_count is None:
                raise ConfigError("absolute budgets need budget_count")
        else:
            raise ConfigError(f"unknown budget mode {self.mode!r}")

    @classmethod
    def ratio(cls, cache_ratio: float, reference_len: int):
        return cls("ratio", cache_ratio=cache_ratio, reference_len=reference_len)

    @classmethod
    def absolute(cls, budget_count: int):
        return cls("absolute", budget_count=budget_count)


def resolve_budget(cfg: BudgetConfig) -> int:
    if cfg.mode == "ratio":
        budget = max(1, math.floor(cfg.cache_ratio * cfg.reference_len))
    else:
        budget = int(cfg.budget_count)
    if budget < 1:
        raise ZeroBudgetError(f"ZeroBudget: budget resolved to {budget}")
    return budget


class KeepSet:
    """Thin wrapper over the boolean keep mask with index-set accessors."""

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=bool)

    @property
    def n(self) -> int:
        return self.mask.shape[-1] - 1

    def indices(self, layer: int, head: int) -> set[int]:
        return set(np.flatnonzero(self.mask[layer, head]).tolist())

    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=-1)

    def __eq__(self, other):
        if not isinstance(other, KeepSet):
            return NotImplemented
        return self.mask.shape == other.mask.shape and bool(np.array_equal(self.mask, other.mask))

    def __repr__(self):
        L, H, _ = self.mask.shape
        sets = [[sorted(self.indices(l, h)) for h in range(H)] for l in range(L)]
        return f"KeepSet(n={self.n}, {sets})"


def _current(state: ScoreState, n: int | None) -> int:
    n = state.n - 1 if n is None else n
    if not 0 <= n < state.n or not state.live[:, :, n].all():
        raise UnknownTokenError(f"UnknownToken: step {n} is not live in the score state")
    return n


def select_keepset_a2sf(state: ScoreState, budget: int, n: int | None = None) -> KeepSet:
    """Top-``budget`` live tokens by accumulator, with token ``n`` forced in."""
    n = _current(state, n)
    mask = np.zeros_like(state.live)
    for l in range(state.n_layers):
        for h in range(state.n_heads):
            toks = state.live_tokens(l, h)
            if len(toks) <= budget:
                mask[l, h, toks] = True
                continue
            top = _rank(toks, state.acc[l, h, toks])[:budget]
            if n not in top:
                top[-1] = n
            mask[l, h, top] = True
    return KeepSet(mask)


def select_keepset_local(n: int, window: int, n_layers: int = 1, n_heads: int = 1) -> KeepSet:
    """Sliding window ``{max(0, n - window + 1) .. n}``, the same for every head."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    mask = np.zeros((n_layers, n_heads, n + 1), dtype=bool)
    mask[:, :, max(0, n - window + 1) :] = True
    return KeepSet(mask)


def select_keepset_h2o(state: ScoreState, budget: int, n: int | None = None) -> KeepSet:
    """Hybrid: ``budget // 2`` most recent live tokens plus the best of the rest by A2S."""
    if budget < 2:
        raise BudgetTooSmallForHybridError(
            f"BudgetTooSmallForHybrid: hybrid selection needs budget >= 2, got {budget}"
        )
    _current(state, n)
    recent = budget // 2
    mask = np.zeros_like(state.live)
    for l in range(state.n_layers):
        for h in range(state.n_heads):
            toks = state.live_tokens(l, h)
            if len(toks) <= budget:
                mask[l, h, toks] = True
                continue
            window, rest = toks[-recent:], toks[:-recent]
            chosen = _rank(rest, state.acc[l, h, rest])[: budget - recent]
            mask[l, h, window] = True
            mask[l, h, chosen] = True
    return KeepSet(mask)


def select_keepset(state: ScoreState, budget: int, n: int | None = None) -> KeepSet:
    """Dispatch on ``state.policy``."""
    policy = state.policy
    if policy.kind == "full":
        _current(state, n)
        return KeepSet(state.live.copy())
    if policy.kind == "local":
        n = _current(state, n)
        window = policy.window or budget
        local = select_keepset_local(n, window, state.n_layers, state.n_heads).mask
        return KeepSet(local & state.live)
    if policy.kind == "a2s":
        return select_keepset_h2o(state, budget, n)
    return select_keepset_a2sf(state, budget, n)


def evict(cache: KVCache | None, state: ScoreState, keep: KeepSet):
    """Remove every cache entry and accumulator outside ``keep``.

    ``cache`` may be ``None`` when replaying recorded traces.
    """
    mask = keep.mask
    if mask.shape != state.live.shape:
        raise UnknownTokenError(f"keepset shape {mask.shape} != state shape {state.live.shape}")
    if np.any(mask & ~state.live):
        l, h, t = np.argwhere(mask & ~state.live)[0]
        raise UnknownTokenError(f"UnknownToken: keepset names evicted token {t} at layer={l} head={h}")
    state = drop_scores(state, state.live & ~mask)
    if cache is not None:
        for l in range(state.n_layers):
            for h in range(state.n_heads):
                cache.retain(l, h, np.flatnonzero(mask[l, h]))
                if cache.capacity is not None and len(cache.tokens(l, h)) > cache.capacity:
                    raise UnknownTokenError(
                        f"cache for layer={l} head={h} exceeds capacity {cache.capacity}"
                    )
    return cache, state


@dataclass
class LiveRun:
    """Record of a live decode: per-step attention rows, hidden outputs and keepsets."""

    policy: Policy
    budget: int
    rows: list[np.ndarray] = field(default_factory=list)
    hidden: list[np.ndarray] = field(default_factory=list)
    keepsets: list[KeepSet] = field(default_factory=list)
    cache_lengths: list[np.ndarray] = field(default_factory=list)

    @property
    def hidden_matrix(self) -> np.ndarray:
        return np.vstack(self.hidden)


def run_live(decoder: ToyDecoder, tokens, policy: Policy, budget: int) -> LiveRun:
    """Decode ``tokens`` one at a time, evicting after each step.

    Prompt and generated tokens follow the same path. At step ``n`` the new
    token attends over the surviving cache plus itself, its rows are scored,
    and the cache is pruned back to ``min(budget, n + 1)`` entries per head.
    """
    if policy.kind == "a2s" and budget < 2:
        raise BudgetTooSmallForHybridError(
            f"BudgetTooSmallForHybrid: hybrid selection needs budget >= 2, got {budget}"
        )
    cache = decoder.new_cache(capacity=None if policy.kind == "full" else budget)
    state = init_score_state(policy, decoder.n_layers, decoder.n_heads)
    run = LiveRun(policy, budget)
    for tok in tokens:
        rows, hidden = decoder_step(decoder, cache, int(tok))
        state = update_scores(state, rows)
        keep = select_keepset(state, budget)
        cache, state = evict(cache, state, keep)
        run.rows.append(rows)
        run.hidden.append(hidden)
        run.keepsets.append(keep)
        run.cache_lengths.append(cache.lengths())
    return run
