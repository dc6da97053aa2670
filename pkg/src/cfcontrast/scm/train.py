"""ELBO training of the conditional hierarchical VAE."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..seeding import derive_int_seed, substream
from ..synthdata import DatasetManifest, make_weighted_sampler
from .hvae import ConditionalHVAE, ScmConfig


@dataclass
class GenerativeModel:
    """Trained generative model plus its training metadata."""

    hvae: ConditionalHVAE
    config: ScmConfig
    seed: int
    elbo_trace: dict
    num_scanners: int
    image_shape: tuple[int, int]
    config_hash: str = ""


def model_hash(model: GenerativeModel) -> str:
    """Stable digest of parameters + architecture config."""
    digest = hashlib.sha256()
    state = model.hvae.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().numpy().tobytes())
    digest.update(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    return digest.hexdigest()[:16]


def _elbo_terms(
    hvae: ConditionalHVAE,
    x: torch.Tensor,
    scanners: torch.Tensor,
    cfg: ScmConfig,
    sample: bool,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-pixel negative ELBO pieces: (loss, recon_nll, kl)."""
    out = hvae.infer(x, scanners, sample=sample)
    num_pixels = x.shape[-1] * x.shape[-2]
    recon = 0.5 * ((x - out["recon"]) / cfg.recon_sigma) ** 2
    recon = recon.flatten(1).sum(dim=1).mean() / num_pixels
    kl_total = x.new_zeros(())
    for kl_level, shape in zip(out["kls"], hvae.latent_shapes()):
        dims = int(np.prod(shape[1:]))
        kl_mean = kl_level.mean()
        if cfg.free_bits > 0.0:
            kl_mean = torch.clamp(kl_mean, min=cfg.free_bits * dims)
        kl_total = kl_total + kl_mean
    kl_total = kl_total / num_pixels
    return recon + kl_total, recon, kl_total


def _validation_loss(
    hvae: ConditionalHVAE,
    images: np.ndarray,
    scanners: np.ndarray,
    cfg: ScmConfig,
    batch_size: int,
) -> float:
    hvae.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(images[start : start + batch_size]).unsqueeze(1)
            s = torch.from_numpy(scanners[start : start + batch_size])
            loss, _, _ = _elbo_terms(hvae, x, s, cfg, sample=False)
            total += float(loss) * x.shape[0]
            count += x.shape[0]
    hvae.train()
    return total / count


def train_scm(manifest: DatasetManifest, cfg: ScmConfig) -> GenerativeModel:
    """Fit the scanner-conditioned hierarchical VAE on the train split.

    Batches are drawn with the imbalance-correcting sampler so minority
    scanners are seen as often as the dominant one. The trace records the
    per-epoch train loss and a validation loss computed with posterior
    means (index 0 is the untrained model), both in per-pixel units.
    """
    if manifest.num_scanners < 2:
        raise ValueError("counterfactuals are undefined for a single-scanner manifest")

    train_idx = manifest.indices_for_split("train")
    val_idx = manifest.indices_for_split("val")
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("manifest needs non-empty train and val splits")
    weights = make_weighted_sampler(manifest, train_idx)

    torch.manual_seed(derive_int_seed(cfg.seed, "scm-init"))
    hvae = ConditionalHVAE(manifest.image_shape, manifest.num_scanners, cfg)
    opt = torch.optim.Adam(hvae.parameters(), lr=cfg.lr)
    rng = substream(cfg.seed, "scm-batches")
    torch.manual_seed(derive_int_seed(cfg.seed, "scm-noise"))

    val_images = manifest.images[val_idx]
    val_scanners = manifest.scanner_ids[val_idx]
    trace = {"train_loss": [], "val_loss": [], "recon": [], "kl": []}
    trace["val_loss"].append(_validation_loss(hvae, val_images, val_scanners, cfg, cfg.batch_size))

    steps_per_epoch = int(np.ceil(train_idx.size / cfg.batch_size))
    for epoch in range(cfg.epochs):
        epoch_loss = epoch_recon = epoch_kl = 0.0
        for step in range(steps_per_epoch):
            batch = rng.choice(train_idx, size=cfg.batch_size, replace=True, p=weights)
            x = torch.from_numpy(manifest.images[batch]).unsqueeze(1)
            s = torch.from_numpy(manifest.scanner_ids[batch])
            loss, recon, kl = _elbo_terms(hvae, x, s, cfg, sample=True)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite SCM loss at epoch {epoch} step {step} "
                    f"(recon={float(recon.detach())!r}, kl={float(kl.detach())!r}); aborting"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(hvae.parameters(), cfg.grad_clip)
            opt.step()
            epoch_loss += float(loss.detach())
            epoch_recon += float(recon.detach())
            epoch_kl += float(kl.detach())
        trace["train_loss"].append(epoch_loss / steps_per_epoch)
        trace["recon"].append(epoch_recon / steps_per_epoch)
        trace["kl"].append(epoch_kl / steps_per_epoch)
        trace["val_loss"].append(
            _validation_loss(hvae, val_images, val_scanners, cfg, cfg.batch_size)
        )

    hvae.eval()
    return GenerativeModel(
        hvae=hvae,
        config=cfg,
        seed=cfg.seed,
        elbo_trace=trace,
        num_scanners=manifest.num_scanners,
        image_shape=manifest.image_shape,
    )


def smoothed_trace(values: list[float], window: int = 5) -> np.ndarray:
    """Moving average with the given window (shorter head windows included)."""
    values = np.asarray(values, dtype=np.float64)
    return np.array(
        [values[max(0, i - window + 1) : i + 1].mean() for i in range(values.size)]
    )


def save_scm_checkpoint(model: GenerativeModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": 1,
        "kind": "scm",
        "state_dict": model.hvae.state_dict(),
        "scm_config": model.config.to_dict(),
        "seed": model.seed,
        "elbo_trace": model.elbo_trace,
        "num_scanners": model.num_scanners,
        "image_shape": list(model.image_shape),
        "config_hash": model.config_hash,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_scm_checkpoint(path: str | Path) -> GenerativeModel:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != "scm":
        raise ValueError(f"{path} is not a generative-model checkpoint")
    cfg = ScmConfig.from_dict(payload["scm_config"])
    hvae = ConditionalHVAE(tuple(payload["image_shape"]), payload["num_scanners"], cfg)
    hvae.load_state_dict(payload["state_dict"])
    hvae.eval()
    return GenerativeModel(
        hvae=hvae,
        config=cfg,
        seed=payload["seed"],
        elbo_trace=payload["elbo_trace"],
        num_scanners=payload["num_scanners"],
        image_shape=tuple(payload["image_shape"]),
        config_hash=payload.get("config_hash", ""),
    )
