"""Causal generative model: conditional hierarchical VAE + counterfactuals."""

from .hvae import ConditionalHVAE, ScmConfig
from .train import GenerativeModel, train_scm, load_scm_checkpoint, model_hash
from .inference import (
    LatentState,
    ParentVector,
    abduct,
    counterfactual,
    cycle_consistency,
    predict,
    reconstruct,
)
from .domain import DomainClassifier, DomainClassifierConfig, effectiveness, train_domain_classifier
from .store import CounterfactualStore, StoreError, build_store

__all__ = [
    "ConditionalHVAE",
    "ScmConfig",
    "GenerativeModel",
    "train_scm",
    "load_scm_checkpoint",
    "model_hash",
    "LatentState",
    "ParentVector",
    "abduct",
    "predict",
    "reconstruct",
    "counterfactual",
    "cycle_consistency",
    "DomainClassifier",
    "DomainClassifierConfig",
    "train_domain_classifier",
    "effectiveness",
    "CounterfactualStore",
    "StoreError",
    "build_store",
]
