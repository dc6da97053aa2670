"""Encoder, NT-Xent loss, pair-construction strategies, pretraining loop."""

from .loss import cosine_similarity, nt_xent_loss
from .encoder import ConvEncoder, EncoderConfig, ProjectionHead, embed_images
from .pairs import (
    STRATEGIES,
    BatchSamples,
    PairBatch,
    make_pairs_cf,
    make_pairs_simclr,
    make_pairs_simclr_plus,
)
from .pretrain import (
    PretrainConfig,
    PretrainResult,
    load_encoder_checkpoint,
    pretrain,
    save_encoder_checkpoint,
)

__all__ = [
    "cosine_similarity",
    "nt_xent_loss",
    "ConvEncoder",
    "EncoderConfig",
    "ProjectionHead",
    "embed_images",
    "STRATEGIES",
    "BatchSamples",
    "PairBatch",
    "make_pairs_simclr",
    "make_pairs_simclr_plus",
    "make_pairs_cf",
    "PretrainConfig",
    "PretrainResult",
    "pretrain",
    "save_encoder_checkpoint",
    "load_encoder_checkpoint",
]
