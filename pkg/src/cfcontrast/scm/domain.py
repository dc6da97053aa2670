"""Domain classifier and counterfactual effectiveness.

Effectiveness is the fraction of generated counterfactuals that a scanner
classifier trained purely on real images assigns to the intended target
scanner, with targets drawn uniformly over all scanners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..seeding import derive_int_seed, substream
from ..synthdata import DatasetManifest, make_weighted_sampler
from .inference import ParentVector, counterfactual
from .train import GenerativeModel


@dataclass
class DomainClassifierConfig:
    epochs: int = 8
    batch_size: int = 128
    lr: float = 2e-3
    patience: int = 3
    seed: int = 0


class DomainClassifier(nn.Module):
    """Small CNN scanner classifier; trained on real images only."""

    def __init__(self, image_shape: tuple[int, int], num_scanners: int):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.num_scanners = num_scanners
        self.val_accuracy: float | None = None
        self.net = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1),
            nn.GroupNorm(4, 16),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.SiLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(32, num_scanners)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x)
        return self.head(h.mean(dim=(2, 3)))

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        self.eval()
        preds = []
        for start in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(images[start : start + batch_size].astype(np.float32))
            preds.append(self(x.unsqueeze(1)).argmax(dim=1).numpy())
        return np.concatenate(preds)

    @torch.no_grad()
    def accuracy(self, images: np.ndarray, scanner_ids: np.ndarray) -> float:
        return float((self.predict(images) == scanner_ids).mean())


def train_domain_classifier(
    manifest: DatasetManifest, cfg: DomainClassifierConfig
) -> DomainClassifier:
    """Train the scanner classifier on real train images, early-stopping on
    validation accuracy; the best weights are restored before returning."""
    train_idx = manifest.indices_for_split("train")
    val_idx = manifest.indices_for_split("val")
    train_idx = train_idx[~manifest.is_counterfactual[train_idx]]
    val_idx = val_idx[~manifest.is_counterfactual[val_idx]]
    weights = make_weighted_sampler(manifest, train_idx)

    torch.manual_seed(derive_int_seed(cfg.seed, "domain-clf"))
    clf = DomainClassifier(manifest.image_shape, manifest.num_scanners)
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    rng = substream(cfg.seed, "domain-clf-batches")

    best_acc = -1.0
    best_state = None
    stale = 0
    steps_per_epoch = int(np.ceil(train_idx.size / cfg.batch_size))
    for _epoch in range(cfg.epochs):
        clf.train()
        for _step in range(steps_per_epoch):
            batch = rng.choice(train_idx, size=cfg.batch_size, replace=True, p=weights)
            x = torch.from_numpy(manifest.images[batch]).unsqueeze(1)
            y = torch.from_numpy(manifest.scanner_ids[batch])
            loss = F.cross_entropy(clf(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        acc = clf.accuracy(manifest.images[val_idx], manifest.scanner_ids[val_idx])
        if acc > best_acc:
            best_acc = acc
            best_state = {k: v.clone() for k, v in clf.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    clf.load_state_dict(best_state)
    clf.eval()
    clf.val_accuracy = best_acc
    return clf


def effectiveness(
    model: GenerativeModel,
    images: np.ndarray,
    parents: ParentVector,
    classifier: DomainClassifier,
    seed: int = 0,
    generate_fn=None,
    batch_size: int = 256,
) -> float:
    """Fraction of counterfactuals classified as their target scanner.

    Targets are sampled uniformly at random over all scanners (a null
    target counts too: the reconstruction should still look like its own
    domain). ``generate_fn(images, parents, targets) -> images`` can replace
    the model, e.g. to measure the real-image upper bound.
    """
    if classifier.val_accuracy is None or classifier.val_accuracy < 0.95:
        raise ValueError(
            f"domain classifier real-image accuracy {classifier.val_accuracy!r} is below "
            "0.95; effectiveness would be uninformative"
        )
    num_scanners = classifier.num_scanners
    rng = substream(seed, "effectiveness-targets")
    targets = rng.integers(0, num_scanners, size=images.shape[0])

    hits = 0
    for start in range(0, images.shape[0], batch_size):
        stop = start + batch_size
        chunk_parents = ParentVector(parents.scanner_id[start:stop])
        chunk_targets = targets[start:stop]
        if generate_fn is not None:
            generated = generate_fn(images[start:stop], chunk_parents, chunk_targets)
        else:
            generated = counterfactual(model, images[start:stop], chunk_parents, chunk_targets)
        preds = classifier.predict(np.clip(generated, 0.0, 1.0))
        hits += int((preds == chunk_targets).sum())
    return hits / images.shape[0]
