"""Ideal masks and trace replay.

A mask sequence is a boolean array of shape ``(n_layers, n_heads, T, T)``;
``mask[l, h, q]`` is the keepset applied to the attention row of step ``q``.
"""

from __future__ import annotations

import numpy as np

from .attn_model import AttentionTrace
from .errors import ShapeMismatchError
from .eviction import evict, select_keepset
from .scoring import Policy, init_score_state, update_scores


def ideal_mask(trace: AttentionTrace, budget: int) -> np.ndarray:
    """Per row, the ``min(budget, q + 1)`` largest scores; ties go to the newer token.

    Nothing is carried between steps, so a token dropped at one step may be
    selected again later.
    """
    S = trace.scores
    T = trace.seq_len
    causal = np.tril(np.ones((T, T), dtype=bool))
    # Reversing the key axis lets a stable argsort break ties toward larger k.
    vals = np.where(causal, S, -np.inf)[..., ::-1]
    order = (T - 1) - np.argsort(-vals, axis=-1, kind="stable")
    rank_pos = np.empty_like(order)
    np.put_along_axis(rank_pos, order, np.arange(T), axis=-1)
    limit = np.minimum(budget, np.arange(T) + 1)[:, None]
    return (rank_pos < limit) & causal


def policy_mask(trace: AttentionTrace, policy: Policy, budget: int) -> np.ndarray:
    """Replay recorded rows through scoring and eviction.

    ``mask[..., q, :]`` is the keepset chosen after consuming row ``q``. Rows
    are used as recorded: entries at already-evicted tokens are dropped and the
    remainder is not renormalized before scoring.
    """
    L, H, T = trace.n_layers, trace.n_heads, trace.seq_len
    state = init_score_state(policy, L, H)
    out = np.zeros((L, H, T, T), dtype=bool)
    for q in range(T):
        live = np.concatenate([state.live, np.ones((L, H, 1), dtype=bool)], axis=-1)
        state = update_scores(state, np.where(live, trace.step_rows(q), 0.0))
        keep = select_keepset(state, budget)
        _, state = evict(None, state, keep)
        out[:, :, q, : q + 1] = keep.mask
    return out


def replay_with_mask(trace: AttentionTrace, mask: np.ndarray, renormalize: bool = True) -> np.ndarray:
    """Zero scores outside the mask, optionally rescaling survivors to sum to 1.

    Rows whose mask keeps every causal key are returned untouched.
    """
    S = trace.scores
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != S.shape:
        raise ShapeMismatchError(f"ShapeMismatch: mask {mask.shape} vs trace {S.shape}")
    pruned = np.where(mask, S, 0.0)
    if not renormalize:
        return pruned
    T = trace.seq_len
    full_row = mask.sum(axis=-1) == (np.arange(T) + 1)
    sums = pruned.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = np.where(sums > 0, pruned / sums, 0.0)
    return np.where(full_row[..., None], S, scaled)
