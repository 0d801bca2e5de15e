from .accounting import COMPONENTS, count_params, expected_param_count, flops_estimate
from .diagnostics import (
    AttentionExport,
    compare_latency,
    export_attention,
    latency_bench,
    pre_gap_mass,
    synthetic_batch,
)
from .metrics import DEFAULT_LENGTH_BUCKETS, acc, auc, length_buckets, macro_auc, pairwise_auc
from .report import EvalReport, Predictions, evaluate, predict_dataset
