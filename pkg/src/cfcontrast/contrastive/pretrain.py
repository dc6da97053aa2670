"""Contrastive pretraining loop shared by all three strategies.

Fair-budget rule: the optimizer step budget is derived from the number of
real training records for every strategy, so simclr_plus (whose sampling
pool is enlarged by the counterfactual store) runs exactly as many updates
as the others; only pair construction differs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from ..augment import AugmentationPolicy
from ..seeding import derive_int_seed, substream
from ..synthdata import DatasetManifest
from ..scm.store import CounterfactualStore
from .encoder import ConvEncoder, EncoderConfig, ProjectionHead
from .loss import nt_xent_loss
from .pairs import STRATEGIES, BatchSamples, make_pairs_cf, make_pairs_simclr, make_pairs_simclr_plus


@dataclass
class PretrainConfig:
    strategy: str = "simclr"
    temperature: float = 0.5
    batch_size: int = 256
    epochs: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    def shared_hyperparams(self) -> dict:
        """Everything that must be identical across compared strategies."""
        d = asdict(self)
        d.pop("strategy")
        d["encoder"] = self.encoder.to_dict()
        return d


@dataclass
class PretrainResult:
    encoder: ConvEncoder
    head: ProjectionHead
    config: PretrainConfig
    loss_trace: list[float]  # per-epoch mean NT-Xent (mean per ordered pair)
    total_steps: int
    config_hash: str = ""


def _sample_pool(
    manifest: DatasetManifest, store: CounterfactualStore | None, strategy: str
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    real = manifest.indices_for_split("train")
    real = real[~manifest.is_counterfactual[real]]
    cf_keys: list[tuple[int, int]] = []
    if strategy == "simclr_plus":
        train_set = set(int(i) for i in real)
        cf_keys = sorted(k for k in store.keys() if k[0] in train_set)
    return real, cf_keys


def _gather_batch(
    manifest: DatasetManifest,
    store: CounterfactualStore | None,
    real: np.ndarray,
    cf_keys: list[tuple[int, int]],
    picks: np.ndarray,
) -> BatchSamples:
    n = picks.size
    h, w = manifest.image_shape
    images = np.empty((n, h, w), dtype=np.float32)
    scanners = np.empty(n, dtype=np.int64)
    records = np.empty(n, dtype=np.int64)
    is_cf = np.zeros(n, dtype=bool)
    for i, p in enumerate(picks):
        if p < real.size:
            idx = int(real[p])
            images[i] = manifest.images[idx]
            scanners[i] = manifest.scanner_ids[idx]
            records[i] = idx
        else:
            src, tgt = cf_keys[p - real.size]
            images[i] = store.get(src, tgt)
            scanners[i] = tgt
            records[i] = src
            is_cf[i] = True
    return BatchSamples(images=images, scanner_ids=scanners, record_indices=records, is_counterfactual=is_cf)


def pretrain(
    manifest: DatasetManifest,
    store: CounterfactualStore | None,
    policy: AugmentationPolicy,
    cfg: PretrainConfig,
) -> PretrainResult:
    """Run one pretraining strategy to completion and return the encoder."""
    if cfg.strategy in ("simclr_plus", "cf_simclr") and store is None:
        raise ValueError(f"{cfg.strategy} requires a counterfactual store")

    real, cf_keys = _sample_pool(manifest, store, cfg.strategy)
    if real.size == 0:
        raise ValueError("manifest has no real training records")
    pool_size = real.size + len(cf_keys)

    torch.manual_seed(derive_int_seed(cfg.seed, "pretrain-init", cfg.strategy))
    encoder = ConvEncoder(cfg.encoder)
    head = ProjectionHead(cfg.encoder)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    steps_per_epoch = int(np.ceil(real.size / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    rng_batch = substream(cfg.seed, "pretrain-batches", cfg.strategy)

    trace: list[float] = []
    encoder.train()
    head.train()
    step = 0
    for _epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            picks = rng_batch.integers(0, pool_size, size=cfg.batch_size)
            batch = _gather_batch(manifest, store, real, cf_keys, picks)
            rng_aug = substream(cfg.seed, "pretrain-aug", cfg.strategy, step)
            if cfg.strategy == "simclr":
                pairs = make_pairs_simclr(batch, policy, rng_aug)
            elif cfg.strategy == "simclr_plus":
                pairs = make_pairs_simclr_plus(batch, policy, rng_aug)
            else:
                pairs = make_pairs_cf(batch, store, policy, rng_aug)

            views = np.concatenate([pairs.view_a, pairs.view_b])
            x = torch.from_numpy(views).unsqueeze(1)
            z = head(encoder(x))
            loss = nt_xent_loss(z, cfg.temperature, reduction="mean")
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite contrastive loss at step {step}; aborting")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            step += 1
        trace.append(epoch_loss / steps_per_epoch)

    encoder.eval()
    head.eval()
    return PretrainResult(
        encoder=encoder, head=head, config=cfg, loss_trace=trace, total_steps=total_steps
    )


def save_encoder_checkpoint(result: PretrainResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": 1,
        "kind": "encoder",
        "strategy": result.config.strategy,
        "encoder_state": result.encoder.state_dict(),
        "head_state": result.head.state_dict(),
        "encoder_config": result.config.encoder.to_dict(),
        "shared_hyperparams": result.config.shared_hyperparams(),
        "seed": result.config.seed,
        "loss_trace": result.loss_trace,
        "total_steps": result.total_steps,
        "config_hash": result.config_hash,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_encoder_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != "encoder":
        raise ValueError(f"{path} is not an encoder checkpoint")
    enc_cfg = EncoderConfig.from_dict(payload["encoder_config"])
    encoder = ConvEncoder(enc_cfg)
    encoder.load_state_dict(payload["encoder_state"])
    encoder.eval()
    head = ProjectionHead(enc_cfg)
    head.load_state_dict(payload["head_state"])
    head.eval()
    payload["encoder"] = encoder
    payload["head"] = head
    return payload
