"""Open-set metrics, the k-fold protocol and report writers."""

from snmnet.evaluation.metrics import auroc, known_accuracy, roc_curve, tpr_at_fpr
from snmnet.evaluation.protocol import (
    ExperimentReport,
    FoldResult,
    ProtocolConfig,
    ablation_variants,
    partition_classes,
    run_protocol,
    split_fold,
)

__all__ = [
    "auroc", "known_accuracy", "roc_curve", "tpr_at_fpr",
    "ExperimentReport", "FoldResult", "ProtocolConfig", "ablation_variants",
    "partition_classes", "run_protocol", "split_fold",
]
