"""Linear probing and finetuning of pretrained encoders.

Probes train on real images only. Label budgets are subsampled with
per-seed class stratification; each probe seed drives both the subsample
and the head initialisation. Reports are tidy tables with one row per
(variant, scanner group, budget, seed) plus seed-aggregated statistics.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch import nn

from ..seeding import derive_int_seed, substream
from ..synthdata import DatasetManifest
from ..contrastive.encoder import ConvEncoder, EncoderConfig, embed_images
from .metrics import compute_class_weights, macro_ovr_auc, weighted_cross_entropy

MODES = ("linear_probe", "finetune", "supervised_baseline")


@dataclass
class ProbeConfig:
    mode: str = "linear_probe"
    label_budget: float | int = 1.0  # fraction of the train split, or a count
    seeds: tuple[int, ...] = (0, 1, 2)
    probe_lr: float = 0.05
    probe_max_epochs: int = 200
    probe_tol: float = 1e-6
    finetune_epochs: int = 6
    finetune_lr: float = 1e-3
    finetune_batch_size: int = 128
    encoder_name: str = "encoder"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ValueError("at least one probe seed is required")


@dataclass
class MetricsReport:
    rows: pd.DataFrame
    aggregates: pd.DataFrame
    metadata: dict = field(default_factory=dict)

    @staticmethod
    def aggregate_rows(rows: pd.DataFrame) -> pd.DataFrame:
        group_cols = ["encoder", "mode", "variant", "scanner_group", "label_budget"]
        grouped = rows.groupby(group_cols, sort=True)["auc"]
        out = grouped.agg(["mean", "count"]).rename(columns={"mean": "auc_mean", "count": "n_seeds"})
        # standard error over seeds; absent (NaN) with fewer than 2 seeds
        out["auc_stderr"] = grouped.apply(
            lambda s: s.std(ddof=1) / np.sqrt(len(s)) if len(s) >= 2 else np.nan
        )
        return out.reset_index()

    @classmethod
    def from_rows(cls, rows: pd.DataFrame, metadata: dict | None = None) -> "MetricsReport":
        return cls(rows=rows, aggregates=cls.aggregate_rows(rows), metadata=metadata or {})

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(directory / "rows.csv", index=False)
        self.aggregates.to_csv(directory / "aggregates.csv", index=False)
        (directory / "metadata.json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "MetricsReport":
        directory = Path(directory)
        return cls(
            rows=pd.read_csv(directory / "rows.csv"),
            aggregates=pd.read_csv(directory / "aggregates.csv"),
            metadata=json.loads((directory / "metadata.json").read_text()),
        )


def _budget_count(budget: float | int, n_train: int, num_classes: int) -> int:
    if isinstance(budget, float):
        if not 0.0 < budget <= 1.0:
            raise ValueError(f"fractional label budget must be in (0, 1], got {budget}")
        count = int(round(budget * n_train))
    else:
        count = int(budget)
    if count > n_train:
        raise ValueError(f"label budget {count} exceeds train split size {n_train}")
    if count < num_classes:
        raise ValueError(f"label budget {count} is smaller than the class count {num_classes}")
    return count


def _stratified_subsample(
    labels: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Class-stratified subsample of ``count`` positions (largest-remainder
    allocation, at least one per present class)."""
    classes, class_counts = np.unique(labels, return_counts=True)
    shares = count * class_counts / labels.size
    alloc = np.maximum(1, np.floor(shares)).astype(int)
    alloc = np.minimum(alloc, class_counts)
    remainders = shares - alloc
    while alloc.sum() < count:
        candidates = np.flatnonzero(alloc < class_counts)
        if candidates.size == 0:
            break
        k = candidates[np.argmax(remainders[candidates])]
        alloc[k] += 1
        remainders[k] -= 1.0
    while alloc.sum() > count:
        candidates = np.flatnonzero(alloc > 1)
        k = candidates[np.argmin(remainders[candidates])]
        alloc[k] -= 1
        remainders[k] += 1.0
    picks = []
    for c, take in zip(classes, alloc):
        members = np.flatnonzero(labels == c)
        picks.append(rng.choice(members, size=take, replace=False))
    return np.sort(np.concatenate(picks))


def _train_linear_head(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    cfg: ProbeConfig,
    seed: int,
) -> tuple[nn.Linear, np.ndarray, np.ndarray]:
    """Full-batch logistic regression on standardized features, trained to
    convergence (loss delta below tol) or the epoch cap."""
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), 1e-6)
    x = torch.from_numpy(((features - mean) / std).astype(np.float32))
    y = torch.from_numpy(labels.astype(np.int64))
    weights = compute_class_weights(labels, num_classes)

    torch.manual_seed(derive_int_seed(seed, "probe-head-init"))
    head = nn.Linear(features.shape[1], num_classes)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.probe_lr)
    prev = np.inf
    for _epoch in range(cfg.probe_max_epochs):
        loss = weighted_cross_entropy(head(x), y, weights)
        opt.zero_grad()
        loss.backward()
        opt.step()
        current = float(loss.detach())
        if abs(prev - current) < cfg.probe_tol:
            break
        prev = current
    head.eval()
    return head, mean, std


@torch.no_grad()
def _head_scores(head: nn.Linear, features: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(((features - mean) / std).astype(np.float32))
    return torch.softmax(head(x), dim=1).numpy()


def _eval_rows(
    scores_by_variant: dict[str, np.ndarray],
    eval_meta: dict[str, dict[str, np.ndarray]],
    cfg: ProbeConfig,
    seed: int,
    n_labels: int,
) -> list[dict]:
    rows = []
    for variant, scores in scores_by_variant.items():
        labels = eval_meta[variant]["labels"]
        scanners = eval_meta[variant]["scanners"]
        groups = [str(s) for s in np.unique(scanners)] + ["all"]
        for group in groups:
            sel = np.ones(labels.size, dtype=bool) if group == "all" else scanners == int(group)
            present = np.unique(labels[sel])
            auc = macro_ovr_auc(scores[sel], labels[sel]) if present.size >= 2 else np.nan
            rows.append(
                {
                    "encoder": cfg.encoder_name,
                    "mode": cfg.mode,
                    "variant": variant,
                    "scanner_group": group,
                    "label_budget": cfg.label_budget,
                    "seed": seed,
                    "auc": auc,
                    "n_eval": int(sel.sum()),
                    "n_labels": n_labels,
                }
            )
    return rows


def _eval_pools(
    manifest: DatasetManifest, extra_eval: dict[str, DatasetManifest] | None
) -> dict[str, DatasetManifest]:
    pools = {"id": manifest}
    if extra_eval:
        overlap = set(pools) & set(extra_eval)
        if overlap:
            raise ValueError(f"extra eval variants clash with built-ins: {sorted(overlap)}")
        pools.update(extra_eval)
    return pools


def _real_split_indices(manifest: DatasetManifest, split: str) -> np.ndarray:
    idx = manifest.indices_for_split(split)
    return idx[~manifest.is_counterfactual[idx]]


def linear_probe(
    encoder: ConvEncoder,
    manifest: DatasetManifest,
    cfg: ProbeConfig,
    extra_eval: dict[str, DatasetManifest] | None = None,
) -> MetricsReport:
    """Freeze the encoder and train a linear classifier on its features."""
    if cfg.mode != "linear_probe":
        raise ValueError(f"linear_probe called with mode {cfg.mode!r}")
    train_idx = _real_split_indices(manifest, "train")
    count = _budget_count(cfg.label_budget, train_idx.size, manifest.num_classes)

    train_features = embed_images(encoder, manifest.images[train_idx])
    train_labels = manifest.class_labels[train_idx]

    pools = _eval_pools(manifest, extra_eval)
    eval_features: dict[str, np.ndarray] = {}
    eval_meta: dict[str, dict[str, np.ndarray]] = {}
    for variant, pool in pools.items():
        test_idx = _real_split_indices(pool, "test")
        eval_features[variant] = embed_images(encoder, pool.images[test_idx])
        eval_meta[variant] = {
            "labels": pool.class_labels[test_idx],
            "scanners": pool.scanner_ids[test_idx],
        }

    rows: list[dict] = []
    for seed in cfg.seeds:
        rng = substream(seed, "probe-budget", cfg.encoder_name)
        sub = _stratified_subsample(train_labels, count, rng)
        head, mean, std = _train_linear_head(
            train_features[sub], train_labels[sub], manifest.num_classes, cfg, seed
        )
        scores = {v: _head_scores(head, f, mean, std) for v, f in eval_features.items()}
        rows.extend(_eval_rows(scores, eval_meta, cfg, seed, sub.size))

    return MetricsReport.from_rows(
        pd.DataFrame(rows), metadata={"mode": cfg.mode, "encoder": cfg.encoder_name}
    )


def _train_finetune(
    encoder: ConvEncoder,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    cfg: ProbeConfig,
    seed: int,
) -> tuple[ConvEncoder, nn.Linear]:
    torch.manual_seed(derive_int_seed(seed, "finetune-init"))
    head = nn.Linear(encoder.cfg.repr_dim, num_classes)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.finetune_lr)
    weights = compute_class_weights(labels, num_classes)
    rng = substream(seed, "finetune-batches")

    encoder.train()
    n = images.shape[0]
    batch = min(cfg.finetune_batch_size, n)
    steps = int(np.ceil(n / batch))
    for _epoch in range(cfg.finetune_epochs):
        order = rng.permutation(n)
        for s in range(steps):
            idx = order[s * batch : (s + 1) * batch]
            x = torch.from_numpy(images[idx]).unsqueeze(1)
            y = torch.from_numpy(labels[idx])
            loss = weighted_cross_entropy(head(encoder(x)), y, weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
    encoder.eval()
    head.eval()
    return encoder, head


def finetune(
    encoder: ConvEncoder | None,
    manifest: DatasetManifest,
    cfg: ProbeConfig,
    extra_eval: dict[str, DatasetManifest] | None = None,
    encoder_config: EncoderConfig | None = None,
) -> MetricsReport:
    """Train encoder + linear head end-to-end on the label budget.

    ``supervised_baseline`` mode ignores the passed encoder and starts from
    random initialisation.
    """
    if cfg.mode not in ("finetune", "supervised_baseline"):
        raise ValueError(f"finetune called with mode {cfg.mode!r}")
    if cfg.mode == "finetune" and encoder is None:
        raise ValueError("finetune mode requires a pretrained encoder")

    train_idx = _real_split_indices(manifest, "train")
    count = _budget_count(cfg.label_budget, train_idx.size, manifest.num_classes)
    train_labels = manifest.class_labels[train_idx]

    pools = _eval_pools(manifest, extra_eval)
    eval_sets = {}
    for variant, pool in pools.items():
        test_idx = _real_split_indices(pool, "test")
        eval_sets[variant] = {
            "images": pool.images[test_idx],
            "labels": pool.class_labels[test_idx],
            "scanners": pool.scanner_ids[test_idx],
        }

    rows: list[dict] = []
    for seed in cfg.seeds:
        rng = substream(seed, "probe-budget", cfg.encoder_name)
        sub = _stratified_subsample(train_labels, count, rng)
        if cfg.mode == "supervised_baseline":
            torch.manual_seed(derive_int_seed(seed, "supervised-init"))
            model = ConvEncoder(encoder_config or (encoder.cfg if encoder else EncoderConfig()))
        else:
            model = copy.deepcopy(encoder)
        model, head = _train_finetune(
            model,
            manifest.images[train_idx][sub],
            train_labels[sub],
            manifest.num_classes,
            cfg,
            seed,
        )
        scores = {}
        with torch.no_grad():
            for variant, data in eval_sets.items():
                feats = embed_images(model, data["images"])
                scores[variant] = torch.softmax(
                    head(torch.from_numpy(feats)), dim=1
                ).numpy()
        eval_meta = {
            v: {"labels": d["labels"], "scanners": d["scanners"]} for v, d in eval_sets.items()
        }
        rows.extend(_eval_rows(scores, eval_meta, cfg, seed, sub.size))

    return MetricsReport.from_rows(
        pd.DataFrame(rows), metadata={"mode": cfg.mode, "encoder": cfg.encoder_name}
    )
