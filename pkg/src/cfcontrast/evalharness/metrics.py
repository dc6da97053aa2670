"""Classification metrics: ROC-AUC (Mann-Whitney), macro one-vs-rest AUC,
weighted cross-entropy."""

from __future__ import annotations

import logging

import numpy as np
import torch
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Binary ROC-AUC via the rank (Mann-Whitney U) formulation.

    Equals the probability that a random positive outscores a random
    negative, with ties counted as half wins.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-D arrays")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(scores)  # average ranks handle ties as 0.5 wins
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(scores: np.ndarray, labels: np.ndarray) -> dict[int, float]:
    """One-vs-rest AUC for every class present in ``labels``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ValueError("scores must be (N, C) aligned with labels")
    present = np.unique(labels)
    return {
        int(c): roc_auc(scores[:, int(c)], (labels == c).astype(int)) for c in present
    }


def macro_ovr_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of per-class one-vs-rest AUCs over present classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError(f"macro AUC needs >= 2 present classes, got {present.size}")
    absent = sorted(set(range(scores.shape[1])) - set(int(c) for c in present))
    if absent:
        logger.warning("macro_ovr_auc: classes %s absent from labels, excluded", absent)
    aucs = per_class_auc(scores, labels)
    return float(np.mean(list(aucs.values())))


def compute_class_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency class weights normalized to mean 1 over present
    classes; absent classes get weight 0 (they contribute no samples)."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(num_classes, dtype=np.float64)
    weights[present] = 1.0 / counts[present]
    weights[present] *= present.sum() / weights[present].sum()
    return weights


def weighted_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, class_weights
) -> torch.Tensor:
    """Cross-entropy with per-class weights under weighted-mean reduction:
    sum(w_y * ce) / sum(w_y). Uniform logits give ln C for any weights."""
    if not isinstance(logits, torch.Tensor):
        logits = torch.as_tensor(np.asarray(logits))
    if not isinstance(labels, torch.Tensor):
        labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    weights = torch.as_tensor(np.asarray(class_weights), dtype=logits.dtype)
    if bool((weights[torch.unique(labels)] <= 0).any()):
        raise ValueError("class weights must be positive for every present class")
    log_probs = torch.log_softmax(logits, dim=1)
    per_sample = -log_probs.gather(1, labels[:, None]).squeeze(1)
    w = weights[labels]
    return (w * per_sample).sum() / w.sum()
