"""Evaluation harness: metrics, probes, sweeps, embedding diagnostics."""

from .metrics import compute_class_weights, macro_ovr_auc, per_class_auc, roc_auc, weighted_cross_entropy
from .probes import MetricsReport, ProbeConfig, finetune, linear_probe
from .embeddings import EmbeddingDump, domain_separation, extract_embedding_dump, subsample_balanced, tsne_plot
from .sweep import label_efficiency_sweep

__all__ = [
    "roc_auc",
    "per_class_auc",
    "macro_ovr_auc",
    "weighted_cross_entropy",
    "compute_class_weights",
    "ProbeConfig",
    "MetricsReport",
    "linear_probe",
    "finetune",
    "EmbeddingDump",
    "extract_embedding_dump",
    "domain_separation",
    "subsample_balanced",
    "tsne_plot",
    "label_efficiency_sweep",
]
