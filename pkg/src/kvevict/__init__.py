"""KV-cache eviction policies driven by accumulated attention scores.

Implements accumulative attention scoring with and without a forgetting
factor, sliding-window and hybrid local/heavy-hitter eviction, an ideal
per-row oracle, and the metrics used to compare them.
"""

from .attn_model import (
    AttentionTrace,
    KVCache,
    ToyDecoder,
    TraceGenConfig,
    decoder_step,
    generate_synthetic_trace,
    softmax_masked_row,
    structured_tokens,
    trace_from_rows,
)
from .estimators import (
    A2SFTransformer,
    H2OTransformer,
    IdealTransformer,
    KVPolicyTransformer,
    LocalTransformer,
    check_trace,
)
from .eviction import (
    BudgetConfig,
    KeepSet,
    evict,
    resolve_budget,
    run_live,
    select_keepset,
    select_keepset_a2sf,
    select_keepset_h2o,
    select_keepset_local,
)
from .metrics import (
    SimilarityReport,
    cosine_similarity,
    evaluate_live,
    evaluate_replay,
    mask_overlap,
    output_drift,
    score_trajectory,
)
from .oracle import ideal_mask, policy_mask, replay_with_mask
from .scoring import (
    Policy,
    ScoreState,
    batch_a2sf,
    drop_scores,
    init_score_state,
    rank_tokens,
    update_scores,
)
from .trace_io import read_trace, write_report_csv, write_trace

__version__ = "0.1.0"

__all__ = [
    "A2SFTransformer",
    "AttentionTrace",
    "batch_a2sf",
    "BudgetConfig",
    "check_trace",
    "cosine_similarity",
    "decoder_step",
    "drop_scores",
    "evaluate_live",
    "evaluate_replay",
    "evict",
    "generate_synthetic_trace",
    "H2OTransformer",
    "ideal_mask",
    "IdealTransformer",
    "init_score_state",
    "KeepSet",
    "KVCache",
    "KVPolicyTransformer",
    "LocalTransformer",
    "mask_overlap",
    "output_drift",
    "Policy",
    "policy_mask",
    "rank_tokens",
    "read_trace",
    "replay_with_mask",
    "resolve_budget",
    "run_live",
    "score_trajectory",
    "ScoreState",
    "select_keepset",
    "select_keepset_a2sf",
    "select_keepset_h2o",
    "select_keepset_local",
    "SimilarityReport",
    "softmax_masked_row",
    "structured_tokens",
    "ToyDecoder",
    "trace_from_rows",
    "TraceGenConfig",
    "update_scores",
    "write_report_csv",
    "write_trace",
]
