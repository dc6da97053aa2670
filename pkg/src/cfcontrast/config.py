"""Declarative experiment configuration.

One config file drives the whole pipeline; every module's parameters live
here and nowhere else. The canonical serialisation is JSON (YAML accepted
on load), and the config hash -- sha256 over the canonical JSON -- is
embedded in every artifact so mixed-provenance comparisons can be refused.

Seed derivation: each stage uses ``derive_int_seed(master_seed, stage_name,
...)`` so a single master seed reproduces the full pipeline regardless of
execution order or worker count.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from .augment import AugmentationPolicy
from .contrastive.encoder import EncoderConfig
from .contrastive.pretrain import PretrainConfig
from .scm.hvae import ScmConfig
from .seeding import derive_int_seed
from .synthdata import DataConfig, ScannerSpec, default_scanner_specs


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


@dataclass
class DataSection:
    num_records: int = 20_000
    image_shape: tuple[int, int] = (32, 32)
    num_classes: int = 4
    scanners: list[dict] = field(default_factory=lambda: [s.to_dict() for s in default_scanner_specs()])
    images_per_subject: tuple[int, int] = (2, 4)
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    class_priors: tuple[float, ...] | None = (0.4, 0.3, 0.2, 0.1)
    label_scanner_correlation: float = 0.0


@dataclass
class ScmSection:
    num_levels: int = 2
    base_channels: int = 24
    z_channels: tuple[int, ...] = (8, 4)
    emb_dim: int = 16
    epochs: int = 12
    batch_size: int = 128
    lr: float = 1e-3
    recon_sigma: float = 0.1
    free_bits: float = 0.0
    grad_clip: float = 5.0
    store_batch_size: int = 256


@dataclass
class AugmentSection:
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    hflip_prob: float = 0.5
    intensity_jitter: tuple[float, float] = (0.2, 0.1)
    blur_prob: float = 0.1


@dataclass
class PretrainSection:
    strategies: tuple[str, ...] = ("simclr", "simclr_plus", "cf_simclr")
    temperature: float = 0.5
    batch_size: int = 256
    epochs: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    repr_dim: int = 128
    proj_dim: int = 64


@dataclass
class EvalSection:
    budgets: tuple[float, ...] = (0.05,)
    seeds: tuple[int, ...] = (0, 1, 2)
    probe_lr: float = 0.05
    probe_max_epochs: int = 200
    probe_tol: float = 1e-6
    finetune_epochs: int = 6
    finetune_lr: float = 1e-3
    finetune_batch_size: int = 128
    sweep_budgets: tuple[float, ...] = (0.05,)
    knn_k: int = 10
    separation_per_scanner: int = 150
    effectiveness_samples: int = 300
    domain_clf_epochs: int = 8
    make_tsne: bool = False
    ood_scanners: list[dict] = field(default_factory=list)
    ood_num_records: int = 2_000


@dataclass
class PathsSection:
    output_dir: str = ""


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    scm: ScmSection = field(default_factory=ScmSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)
    master_seed: int = 1234

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sections = {
            "data": DataSection,
            "scm": ScmSection,
            "augment": AugmentSection,
            "pretrain": PretrainSection,
            "eval": EvalSection,
            "paths": PathsSection,
        }
        kwargs: dict = {"master_seed": int(d.get("master_seed", 1234))}
        for name, section_cls in sections.items():
            payload = dict(d.get(name, {}))
            defaults = section_cls()
            for key, value in payload.items():
                if not hasattr(defaults, key):
                    raise KeyError(f"unknown config key {name}.{key}")
                template = getattr(defaults, key)
                if isinstance(value, list) and isinstance(template, (tuple, type(None))):
                    payload[key] = _tuplify(value)
            kwargs[name] = section_cls(**payload)
        return cls(**kwargs)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def section_hash(self, section: str) -> str:
        payload = {
            "section": section,
            "values": self.to_dict()[section],
            "master_seed": self.master_seed,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            return cls.from_dict(yaml.safe_load(text))
        return cls.from_dict(json.loads(text))

    # -- per-module config builders -----------------------------------------

    def scanner_specs(self) -> list[ScannerSpec]:
        return [ScannerSpec.from_dict(d) for d in self.data.scanners]

    def data_config(self) -> DataConfig:
        return DataConfig(
            num_records=self.data.num_records,
            image_shape=tuple(self.data.image_shape),
            num_classes=self.data.num_classes,
            scanners=self.scanner_specs(),
            images_per_subject=tuple(self.data.images_per_subject),
            split_ratios=tuple(self.data.split_ratios),
            class_priors=self.data.class_priors,
            label_scanner_correlation=self.data.label_scanner_correlation,
            master_seed=derive_int_seed(self.master_seed, "generate-data"),
        )

    def ood_data_config(self) -> DataConfig | None:
        if not self.eval.ood_scanners:
            return None
        return DataConfig(
            num_records=self.eval.ood_num_records,
            image_shape=tuple(self.data.image_shape),
            num_classes=self.data.num_classes,
            scanners=[ScannerSpec.from_dict(d) for d in self.eval.ood_scanners],
            images_per_subject=tuple(self.data.images_per_subject),
            split_ratios=tuple(self.data.split_ratios),
            class_priors=self.data.class_priors,
            label_scanner_correlation=self.data.label_scanner_correlation,
            master_seed=derive_int_seed(self.master_seed, "generate-ood"),
        )

    def scm_config(self) -> ScmConfig:
        return ScmConfig(
            num_levels=self.scm.num_levels,
            base_channels=self.scm.base_channels,
            z_channels=tuple(self.scm.z_channels),
            emb_dim=self.scm.emb_dim,
            epochs=self.scm.epochs,
            batch_size=self.scm.batch_size,
            lr=self.scm.lr,
            recon_sigma=self.scm.recon_sigma,
            free_bits=self.scm.free_bits,
            grad_clip=self.scm.grad_clip,
            seed=derive_int_seed(self.master_seed, "train-scm"),
        )

    def augmentation_policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(
            crop_scale_range=tuple(self.augment.crop_scale_range),
            hflip_prob=self.augment.hflip_prob,
            intensity_jitter=tuple(self.augment.intensity_jitter),
            blur_prob=self.augment.blur_prob,
            output_shape=tuple(self.data.image_shape),
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            channels=tuple(self.pretrain.encoder_channels),
            repr_dim=self.pretrain.repr_dim,
            proj_dim=self.pretrain.proj_dim,
        )

    def pretrain_config(self, strategy: str) -> PretrainConfig:
        return PretrainConfig(
            strategy=strategy,
            temperature=self.pretrain.temperature,
            batch_size=self.pretrain.batch_size,
            epochs=self.pretrain.epochs,
            lr=self.pretrain.lr,
            weight_decay=self.pretrain.weight_decay,
            encoder=self.encoder_config(),
            seed=derive_int_seed(self.master_seed, "pretrain"),
        )

    def probe_seed(self, user_seed: int) -> int:
        return derive_int_seed(self.master_seed, "probe", user_seed)
