"""Token-importance accumulators.

Four policies share one state type:

* ``a2s``  - accumulative attention score, ``A[k] = sum_{q>=k} S[q, k]``;
  selection is the local + heavy-hitter hybrid (reported as ``h2o``).
* ``a2sf`` - the same sum with a forgetting factor, ``A[k] = sum_q alpha**(n-q) S[q, k]``,
  maintained by the recurrence ``A <- alpha * A + S[n]``.
* ``local`` / ``full`` - positional policies; accumulators are left at zero.

Accumulators live in dense ``(n_layers, n_heads, n_tokens)`` arrays next to a
boolean ``live`` mask, so one update call touches every head at once.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    BadAlphaError,
    BadWindowError,
    ConfigError,
    EmptyHeadError,
    KVEvictError,
    RowShapeMismatchError,
    UnknownTokenError,
)

KINDS = ("full", "local", "a2s", "a2sf")
LABELS = {"full": "full", "local": "local", "a2s": "h2o", "a2sf": "a2sf"}


@dataclass(frozen=True)
class Policy:
    """Policy kind plus its parameter.

    ``alpha`` is required for ``a2sf`` and must lie in ``[0, 1)``. ``window``
    is optional for ``local``; when omitted the window equals the cache budget.
    """

    kind: str
    alpha: float | None = None
    window: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "a2sf":
            if self.alpha is None or not 0.0 <= self.alpha < 1.0:
                raise BadAlphaError(f"BadAlpha: alpha must be in [0, 1), got {self.alpha}")
        if self.window is not None and self.window < 1:
            raise BadWindowError(f"BadWindow: window must be >= 1, got {self.window}")

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def local(cls, window=None):
        return cls("local", window=window)

    @classmethod
    def h2o(cls):
        return cls("a2s")

    @classmethod
    def a2sf(cls, alpha):
        return cls("a2sf", alpha=alpha)

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """Parse ``full``, ``local``, ``local:8``, ``h2o``/``a2s`` or ``a2sf:0.1``."""
        name, _, arg = text.strip().lower().partition(":")
        try:
            if name == "full":
                return cls.full()
            if name == "local":
                return cls.local(int(arg) if arg else None)
            if name in ("h2o", "a2s"):
                return cls.h2o()
            if name == "a2sf":
                if not arg:
                    raise ConfigError("a2sf needs an alpha, e.g. a2sf:0.1")
                return cls.a2sf(float(arg))
        except ValueError as exc:
            if isinstance(exc, KVEvictError):
                raise
            raise ConfigError(f"bad policy parameter in {text!r}") from exc
        raise ConfigError(f"unknown policy {text!r}")

    @property
    def label(self) -> str:
        return LABELS[self.kind]

    def __str__(self):
        if self.kind == "a2sf":
            return f"a2sf:{self.alpha:g}"
        if self.kind == "local" and self.window is not None:
            return f"local:{self.window}"
        return self.label


@dataclass(frozen=True)
class ScoreState:
    policy: Policy
    acc: np.ndarray
    live: np.ndarray
    n: int = 0

    @property
    def n_layers(self) -> int:
        return self.acc.shape[0]

    @property
    def n_heads(self) -> int:
        return self.acc.shape[1]

    def live_tokens(self, layer: int, head: int) -> np.ndarray:
        return np.flatnonzero(self.live[layer, head])

    def accumulators(self, layer: int, head: int) -> dict[int, float]:
        toks = self.live_tokens(layer, head)
        return dict(zip(toks.tolist(), self.acc[layer, head, toks].tolist()))


def init_score_state(policy: Policy, n_layers: int, n_heads: int) -> ScoreState:
    # Policy validates itself, but a mutated or hand-built instance is re-checked.
    if policy.kind == "a2sf" and (policy.alpha is None or not 0.0 <= policy.alpha < 1.0):
        raise BadAlphaError(f"BadAlpha: alpha must be in [0, 1), got {policy.alpha}")
    if policy.kind == "local" and policy.window is not None and policy.window < 1:
        raise BadWindowError(f"BadWindow: window must be >= 1, got {policy.window}")
    return ScoreState(
        policy,
        np.zeros((n_layers, n_heads, 0)),
        np.zeros((n_layers, n_heads, 0), dtype=bool),
        0,
    )


def update_scores(state: ScoreState, rows) -> ScoreState:
    """Fold the attention rows of step ``state.n`` into the accumulators.

    ``rows`` has shape ``(n_layers, n_heads, n + 1)``; entries at evicted
    tokens must be exactly zero. The new token enters the live set with its
    self-attention score as initial accumulator.
    """
    rows = np.asarray(rows, dtype=np.float64)
    L, H, n = state.n_layers, state.n_heads, state.n
    if rows.shape != (L, H, n + 1):
        raise RowShapeMismatchError(
            f"RowShapeMismatch: expected rows of shape {(L, H, n + 1)}, got {rows.shape}"
        )
    if np.any(rows[:, :, :n][~state.live]):
        raise RowShapeMismatchError("RowShapeMismatch: score mass on an evicted token")

    live = np.concatenate([state.live, np.ones((L, H, 1), dtype=bool)], axis=-1)
    acc = np.concatenate([state.acc, np.zeros((L, H, 1))], axis=-1)
    kind = state.policy.kind
    if kind == "a2s":
        acc = acc + rows
    elif kind == "a2sf":
        acc = state.policy.alpha * acc + rows
    return replace(state, acc=acc, live=live, n=n + 1)


def batch_a2sf(score_matrix, alpha: float) -> np.ndarray:
    """Closed-form forgetting-factor accumulation for one head.

    ``score_matrix`` is the ``(..., n, n)`` lower-triangular matrix of rows
    ``0..n-1``; leading axes (layers, heads) are batched. A list of ragged
    rows is accepted for a single head. Returns
    ``A[k] = sum_{q=k}^{n-1} alpha**(n-1-q) * S[q, k]``, summed in increasing
    ``q`` order. ``alpha = 1`` gives plain column sums.
    """
    if not isinstance(score_matrix, np.ndarray):
        rows = [np.asarray(r, dtype=np.float64) for r in score_matrix]
        score_matrix = np.zeros((len(rows), len(rows)))
        for q, r in enumerate(rows):
            score_matrix[q, : q + 1] = r[: q + 1]
    n = score_matrix.shape[-1]
    out = np.zeros(score_matrix.shape[:-2] + (n,))
    for q in range(n):
        out[..., : q + 1] += alpha ** (n - 1 - q) * score_matrix[..., q, : q + 1]
    return out


def _rank(tokens: np.ndarray, values: np.ndarray) -> np.ndarray:
    # lexsort: last key is primary. Descending score, then descending index.
    return tokens[np.lexsort((-tokens, -values))]


def rank_tokens(state: ScoreState, layer: int, head: int) -> np.ndarray:
    """Live tokens of one head, most important first; ties go to the newer token."""
    toks = state.live_tokens(layer, head)
    if toks.size == 0:
        raise EmptyHeadError(f"EmptyHead: no live tokens at layer={layer} head={head}")
    return _rank(toks, state.acc[layer, head, toks])


def drop_scores(state: ScoreState, evicted) -> ScoreState:
    """Discard accumulators of evicted tokens.

    ``evicted`` is either a boolean ``(n_layers, n_heads, n)`` mask or a nested
    ``[layer][head]`` collection of token indices.
    """
    L, H, n = state.n_layers, state.n_heads, state.n
    if isinstance(evicted, np.ndarray) and evicted.dtype == bool:
        if evicted.shape != (L, H, n):
            raise RowShapeMismatchError(f"eviction mask shape {evicted.shape} != {(L, H, n)}")
        gone = evicted
    else:
        gone = np.zeros((L, H, n), dtype=bool)
        for l in range(L):
            for h in range(H):
                for t in evicted[l][h]:
                    if not 0 <= t < n:
                        raise UnknownTokenError(f"UnknownToken: token {t} was never seen")
                    gone[l, h, t] = True
    if np.any(gone & ~state.live):
        l, h, t = np.argwhere(gone & ~state.live)[0]
        raise UnknownTokenError(f"UnknownToken: token {t} is not live at layer={l} head={h}")
    if not gone.any():
        return state
    live = state.live & ~gone
    acc = np.where(gone, 0.0, state.acc)
    return replace(state, acc=acc, live=live)
