"""Mask quality and output drift, plus report assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attn_model import AttentionTrace, ToyDecoder, trace_from_rows
from .errors import ShapeMismatchError, ZeroVectorError
from .eviction import run_live
from .oracle import ideal_mask, policy_mask, replay_with_mask
from .scoring import Policy, init_score_state, update_scores

# Reference averages from the LLaMA-7B evaluation this package was modelled on.
# Context only: they are not reproducible with synthetic traces.
REFERENCE_COSINE = {"local": 0.318, "h2o": 0.967, "a2sf:0.1": 0.991, "a2sf:0.5": 0.989}


def _lower_tri(a: np.ndarray) -> np.ndarray:
    T = a.shape[-1]
    rows, cols = np.tril_indices(T)
    return a[..., rows, cols]


def cosine_similarity(a, b) -> tuple[np.ndarray, float]:
    """Per-(layer, head) cosine of the flattened lower-triangular matrices.

    Returns ``(per_head, mean)``; ``per_head`` has shape ``(n_layers, n_heads)``.
    """
    a = np.asarray(a.scores if isinstance(a, AttentionTrace) else a, dtype=np.float64)
    b = np.asarray(b.scores if isinstance(b, AttentionTrace) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot compare shapes {a.shape} and {b.shape}")
    if a.ndim == 2:
        a, b = a[None, None], b[None, None]
    va, vb = _lower_tri(a), _lower_tri(b)
    na, nb = np.linalg.norm(va, axis=-1), np.linalg.norm(vb, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroVectorError("ZeroVector: cosine similarity of an all-zero head")
    per_head = np.einsum("lhk,lhk->lh", va, vb) / (na * nb)
    per_head = np.clip(per_head, -1.0, 1.0)
    return per_head, float(per_head.mean())


def mask_overlap(m1, m2, per_head: bool = False):
    """Mean over (layer, head, q) of ``|keep1 & keep2| / |keep1|``."""
    m1 = np.asarray(m1, dtype=bool)
    m2 = np.asarray(m2, dtype=bool)
    if m1.shape != m2.shape:
        raise ShapeMismatchError(f"ShapeMismatch: masks {m1.shape} vs {m2.shape}")
    sizes = m1.sum(axis=-1)
    if np.any(sizes == 0):
        raise ShapeMismatchError("empty keepset in first mask")
    frac = (m1 & m2).sum(axis=-1) / sizes
    heads = frac.mean(axis=-1)
    return heads if per_head else float(heads.mean())


def score_trajectory(
    trace: AttentionTrace, token: int, policy: Policy, layer: int = 0, head: int = 0
) -> np.ndarray:
    """``(T - token, 2)`` array of ``(raw score, accumulator)`` for steps ``token..T-1``.

    Accumulation runs without eviction so the series reflects the scoring rule
    alone.
    """
    if not 0 <= token < trace.seq_len:
        raise ShapeMismatchError(f"unknown token {token} for seq_len {trace.seq_len}")
    if policy.kind not in ("a2s", "a2sf"):
        raise ShapeMismatchError(f"policy {policy} keeps no accumulators")
    state = init_score_state(policy, 1, 1)
    series = []
    for q in range(trace.seq_len):
        row = trace.row(layer, head, q)
        state = update_scores(state, row[None, None])
        if q >= token:
            series.append((row[token], state.acc[0, 0, token]))
    return np.asarray(series)


def output_drift(full_hidden, pruned_hidden) -> float:
    """Mean per-step Euclidean distance, normalised by the full run's mean norm."""
    full = np.asarray(getattr(full_hidden, "hidden_matrix", full_hidden), dtype=np.float64)
    pruned = np.asarray(getattr(pruned_hidden, "hidden_matrix", pruned_hidden), dtype=np.float64)
    if full.shape != pruned.shape:
        raise ShapeMismatchError(f"run lengths differ: {full.shape} vs {pruned.shape}")
    dist = np.linalg.norm(full - pruned, axis=-1).mean()
    return float(dist / np.linalg.norm(full, axis=-1).mean())


@dataclass
class SimilarityReport:
    policy: str
    alpha: float | None
    budget: int
    cosine: np.ndarray
    mask_overlap: np.ndarray
    output_drift: float | None = None
    seed: int | None = None
    mode: str = "replay"
    extra: dict = field(default_factory=dict)

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(self.cosine))

    @property
    def mean_overlap(self) -> float:
        return float(np.mean(self.mask_overlap))


def evaluate_replay(
    trace: AttentionTrace,
    policy: Policy,
    budget: int,
    renormalize: bool = True,
    seed: int | None = None,
    ideal: np.ndarray | None = None,
) -> SimilarityReport:
    """Replay ``trace`` under ``policy`` and compare with the ideal mask."""
    if ideal is None:
        ideal = ideal_mask(trace, budget)
    mask = policy_mask(trace, policy, budget)
    cos, _ = cosine_similarity(
        replay_with_mask(trace, mask, renormalize), replay_with_mask(trace, ideal, renormalize)
    )
    return SimilarityReport(
        policy=policy.label,
        alpha=policy.alpha,
        budget=budget,
        cosine=cos,
        mask_overlap=mask_overlap(mask, ideal, per_head=True),
        seed=seed,
        mode="replay",
    )


def evaluate_live(
    decoder: ToyDecoder,
    tokens,
    policy: Policy,
    budget: int,
    renormalize: bool = True,
    full_run=None,
) -> SimilarityReport:
    """Decode with true eviction and compare against an unpruned decode.

    Cosine and overlap are taken against the ideal mask of the unpruned run's
    trace; drift compares hidden outputs step by step.
    """
    if full_run is None:
        full_run = run_live(decoder, tokens, Policy.full(), budget)
    full_trace = trace_from_rows(full_run.rows)
    pruned = run_live(decoder, tokens, policy, budget)
    pruned_trace = trace_from_rows(pruned.rows)

    ideal = ideal_mask(full_trace, budget)
    live_mask = np.zeros_like(ideal)
    for q, keep in enumerate(pruned.keepsets):
        live_mask[:, :, q, : q + 1] = keep.mask
    cos, _ = cosine_similarity(pruned_trace.scores, replay_with_mask(full_trace, ideal, renormalize))
    return SimilarityReport(
        policy=policy.label,
        alpha=policy.alpha,
        budget=budget,
        cosine=cos,
        mask_overlap=mask_overlap(live_mask, ideal, per_head=True),
        output_drift=output_drift(full_run, pruned),
        seed=decoder.seed,
        mode="live",
    )
