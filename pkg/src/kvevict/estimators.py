"""scikit-learn style wrappers around the eviction policies.

Each transformer takes an attention trace (an :class:`AttentionTrace` or an
array of shape ``(T, T)``, ``(H, T, T)`` or ``(L, H, T, T)``), builds the
policy's keep masks during ``fit`` and returns pruned score matrices from
``transform``. ``score`` is the mean cosine similarity to the ideal mask, so
``GridSearchCV``-style tooling can rank parameters directly.

>>> from kvevict import A2SFTransformer
>>> est = A2SFTransformer(alpha=0.2, cache_ratio=0.25).fit(trace)   # doctest: +SKIP
>>> est.masks_.shape                                               # doctest: +SKIP
(1, 4, 128, 128)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attn_model import AttentionTrace
from .errors import ConfigError, ShapeMismatchError
from .eviction import BudgetConfig, resolve_budget
from .metrics import SimilarityReport, cosine_similarity, mask_overlap
from .oracle import ideal_mask, policy_mask, replay_with_mask
from .scoring import Policy


def check_trace(X, validate: bool = True) -> AttentionTrace:
    """Coerce ``X`` to an :class:`AttentionTrace`, checking its invariants."""
    if isinstance(X, AttentionTrace):
        trace = X
    else:
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[None]
        elif arr.ndim != 4:
            raise ShapeMismatchError(f"expected a 2-, 3- or 4-d score array, got {arr.ndim}-d")
        trace = AttentionTrace(arr)
    if validate:
        trace.validate()
    return trace


def check_budget(cache_ratio, budget, seq_len: int) -> int:
    if budget is not None:
        return resolve_budget(BudgetConfig.absolute(int(budget)))
    if cache_ratio is None:
        raise ConfigError("set either cache_ratio or budget")
    return resolve_budget(BudgetConfig.ratio(float(cache_ratio), seq_len))


class KVPolicyTransformer(TransformerMixin, BaseEstimator):
    """Generic policy transformer; ``policy`` is one of full, local, h2o, a2sf, ideal."""

    def __init__(self, policy="a2sf", alpha=0.1, window=None, cache_ratio=0.2, budget=None,
                 renormalize=True):
        self.policy = policy
        self.alpha = alpha
        self.window = window
        self.cache_ratio = cache_ratio
        self.budget = budget
        self.renormalize = renormalize

    def _make_policy(self):
        name = str(self.policy).lower()
        if name == "ideal":
            return None
        if name == "a2sf":
            return Policy.a2sf(self.alpha)
        if name == "local":
            return Policy.local(self.window)
        if name in ("h2o", "a2s"):
            return Policy.h2o()
        if name == "full":
            return Policy.full()
        raise ConfigError(f"unknown policy {self.policy!r}")

    def _masks(self, trace, budget):
        policy = self._make_policy()
        if policy is None:
            return ideal_mask(trace, budget)
        return policy_mask(trace, policy, budget)

    def fit(self, X, y=None):
        trace = check_trace(X)
        self.policy_ = self._make_policy()
        self.budget_ = check_budget(self.cache_ratio, self.budget, trace.seq_len)
        self.masks_ = self._masks(trace, self.budget_)
        self.n_layers_, self.n_heads_, self.seq_len_ = trace.n_layers, trace.n_heads, trace.seq_len
        return self

    def mask(self, X) -> np.ndarray:
        check_is_fitted(self, "budget_")
        trace = check_trace(X)
        return self._masks(trace, check_budget(self.cache_ratio, self.budget, trace.seq_len))

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "budget_")
        trace = check_trace(X)
        return replay_with_mask(trace, self.mask(trace), self.renormalize)

    def report(self, X, seed=None) -> SimilarityReport:
        check_is_fitted(self, "budget_")
        trace = check_trace(X)
        budget = check_budget(self.cache_ratio, self.budget, trace.seq_len)
        mask = self._masks(trace, budget)
        ideal = ideal_mask(trace, budget)
        cos, _ = cosine_similarity(
            replay_with_mask(trace, mask, self.renormalize),
            replay_with_mask(trace, ideal, self.renormalize),
        )
        policy = self.policy_
        return SimilarityReport(
            policy=policy.label if policy else "ideal",
            alpha=policy.alpha if policy else None,
            budget=budget,
            cosine=cos,
            mask_overlap=mask_overlap(mask, ideal, per_head=True),
            seed=seed,
        )

    def score(self, X, y=None) -> float:
        return self.report(X).mean_cosine


class A2SFTransformer(KVPolicyTransformer):
    def __init__(self, alpha=0.1, cache_ratio=0.2, budget=None, renormalize=True):
        super().__init__("a2sf", alpha, None, cache_ratio, budget, renormalize)

    def _make_policy(self):
        return Policy.a2sf(self.alpha)


class H2OTransformer(KVPolicyTransformer):
    def __init__(self, cache_ratio=0.2, budget=None, renormalize=True):
        super().__init__("h2o", None, None, cache_ratio, budget, renormalize)

    def _make_policy(self):
        return Policy.h2o()


class LocalTransformer(KVPolicyTransformer):
    def __init__(self, window=None, cache_ratio=0.2, budget=None, renormalize=True):
        super().__init__("local", None, window, cache_ratio, budget, renormalize)

    def _make_policy(self):
        return Policy.local(self.window)


class IdealTransformer(KVPolicyTransformer):
    """Per-row top-budget selection without eviction; the reference every policy is scored against."""

    def __init__(self, cache_ratio=0.2, budget=None, renormalize=True):
        super().__init__("ideal", None, None, cache_ratio, budget, renormalize)

    def _make_policy(self):
        return None
