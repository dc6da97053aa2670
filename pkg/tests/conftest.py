"""Shared fixtures.

``small_world`` is a session-scoped miniature pipeline (tiny dataset, short
SCM + pretraining) reused by module tests that need trained components.
The full desk-scale pipeline used by the acceptance suite lives in
``test_acceptance.py`` and is cached on disk between runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from cfcontrast import synthdata as sd
from cfcontrast.augment import AugmentationPolicy
from cfcontrast.contrastive.encoder import EncoderConfig
from cfcontrast.contrastive.pretrain import PretrainConfig, pretrain
from cfcontrast.scm.hvae import ScmConfig
from cfcontrast.scm.store import CounterfactualStore, build_store
from cfcontrast.scm.train import GenerativeModel, train_scm


@pytest.fixture(scope="session")
def tiny_manifest() -> sd.DatasetManifest:
    """600 records, 3 scanners (80/10/10); enough for data-level tests."""
    cfg = sd.DataConfig(
        num_records=600,
        scanners=_three_scanners(0.8, 0.1, 0.1),
        master_seed=101,
    )
    return sd.generate_dataset(cfg)


def _three_scanners(p0: float, p1: float, p2: float) -> list[sd.ScannerSpec]:
    base = sd.default_scanner_specs()
    return [
        sd.ScannerSpec.from_dict({**base[0].to_dict(), "prevalence": p0}),
        sd.ScannerSpec.from_dict({**base[1].to_dict(), "prevalence": p1}),
        sd.ScannerSpec.from_dict({**base[2].to_dict(), "prevalence": p2}),
    ]


@dataclass
class SmallWorld:
    manifest: sd.DatasetManifest
    model: GenerativeModel
    store: CounterfactualStore
    store_dir: Path
    policy: AugmentationPolicy
    encoders: dict  # strategy -> PretrainResult


@pytest.fixture(scope="session")
def small_world(tmp_path_factory) -> SmallWorld:
    """Miniature end-to-end world: 1.5k images, 4-epoch SCM, 4-epoch encoders."""
    root = tmp_path_factory.mktemp("small_world")
    cfg = sd.DataConfig(
        num_records=1500,
        scanners=_three_scanners(0.8, 0.1, 0.1),
        master_seed=2024,
    )
    manifest = sd.generate_dataset(cfg)
    model = train_scm(manifest, ScmConfig(epochs=4, batch_size=128, seed=7))
    store = build_store(model, manifest, root / "cfstore")
    policy = AugmentationPolicy()
    enc_cfg = EncoderConfig()
    encoders = {}
    for strategy in ("simclr", "cf_simclr"):
        pcfg = PretrainConfig(
            strategy=strategy, epochs=4, batch_size=128, encoder=enc_cfg, seed=31
        )
        encoders[strategy] = pretrain(
            manifest, None if strategy == "simclr" else store, policy, pcfg
        )
    return SmallWorld(
        manifest=manifest,
        model=model,
        store=store,
        store_dir=root / "cfstore",
        policy=policy,
        encoders=encoders,
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(99)
