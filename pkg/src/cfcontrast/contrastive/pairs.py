"""Positive-pair construction for the three pretraining strategies.

- simclr: two independent augmentations of the same real image.
- simclr_plus: identical rule, but the incoming batch is drawn from the
  union of real images and stored counterfactuals treated as independent
  samples (no real <-> counterfactual matching).
- cf_simclr: each real image is paired with one of its domain
  counterfactuals (target scanner drawn uniformly among the other
  scanners); both sides then go through the augmentation pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..augment import AugmentationPolicy, sample_view
from ..scm.store import CounterfactualStore

STRATEGIES = ("simclr", "simclr_plus", "cf_simclr")


@dataclass
class BatchSamples:
    """A sampled training batch before view generation."""

    images: np.ndarray  # (N, H, W) float32
    scanner_ids: np.ndarray  # (N,) int64
    record_indices: np.ndarray  # (N,) int64; for counterfactuals, the source record
    is_counterfactual: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class PairBatch:
    """Aligned two-view stacks; view_a[i] and view_b[i] are positive pair i."""

    view_a: np.ndarray  # (N, H, W) float32
    view_b: np.ndarray
    strategy: str
    source_scanner: np.ndarray  # scanner of view_a's origin
    view_b_scanner: np.ndarray  # scanner of view_b's origin
    a_is_counterfactual: np.ndarray
    b_is_counterfactual: np.ndarray
    record_indices: np.ndarray

    def __len__(self) -> int:
        return self.view_a.shape[0]

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.view_a.shape != self.view_b.shape:
            raise ValueError("view stacks must be aligned")
        if self.strategy == "cf_simclr":
            one_cf = self.a_is_counterfactual ^ self.b_is_counterfactual
            if not one_cf.all():
                raise ValueError("cf_simclr pairs must contain exactly one counterfactual")
            if (self.source_scanner == self.view_b_scanner).any():
                raise ValueError("cf_simclr pair scanners must differ")


def _augment_pairwise(
    first: np.ndarray,
    second: np.ndarray,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    # One child stream per (position, view): streams 2i and 2i+1 belong to
    # pair i, so the two views never share randomness.
    n = first.shape[0]
    streams = rng.spawn(2 * n)
    view_a = np.empty((n, *policy.output_shape), dtype=np.float32)
    view_b = np.empty((n, *policy.output_shape), dtype=np.float32)
    for i in range(n):
        view_a[i] = sample_view(first[i], policy, streams[2 * i])
        view_b[i] = sample_view(second[i], policy, streams[2 * i + 1])
    return view_a, view_b


def make_pairs_simclr(
    batch: BatchSamples, policy: AugmentationPolicy, rng: np.random.Generator
) -> PairBatch:
    """Standard strategy: both views are augmentations of the same image."""
    if batch.is_counterfactual.any():
        raise ValueError("simclr batches must contain real images only")
    view_a, view_b = _augment_pairwise(batch.images, batch.images, policy, rng)
    return PairBatch(
        view_a=view_a,
        view_b=view_b,
        strategy="simclr",
        source_scanner=batch.scanner_ids.copy(),
        view_b_scanner=batch.scanner_ids.copy(),
        a_is_counterfactual=batch.is_counterfactual.copy(),
        b_is_counterfactual=batch.is_counterfactual.copy(),
        record_indices=batch.record_indices.copy(),
    )


def make_pairs_simclr_plus(
    batch: BatchSamples, policy: AugmentationPolicy, rng: np.random.Generator
) -> PairBatch:
    """Augmented-training-set strategy: same pairing rule on a mixed batch.

    A counterfactual sample pairs with its own second augmentation, never
    with its source image.
    """
    view_a, view_b = _augment_pairwise(batch.images, batch.images, policy, rng)
    return PairBatch(
        view_a=view_a,
        view_b=view_b,
        strategy="simclr_plus",
        source_scanner=batch.scanner_ids.copy(),
        view_b_scanner=batch.scanner_ids.copy(),
        a_is_counterfactual=batch.is_counterfactual.copy(),
        b_is_counterfactual=batch.is_counterfactual.copy(),
        record_indices=batch.record_indices.copy(),
    )


def make_pairs_cf(
    batch: BatchSamples,
    store: CounterfactualStore,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
) -> PairBatch:
    """Counterfactual strategy: real image + domain counterfactual pairs.

    The target scanner is drawn uniformly among the scanners other than the
    source, guaranteeing a cross-domain positive pair.
    """
    if batch.is_counterfactual.any():
        raise ValueError("cf_simclr batches must contain real images only")
    n = len(batch)
    num_scanners = store.num_scanners
    if num_scanners < 2:
        raise ValueError("cf_simclr needs at least two scanners")

    targets = np.empty(n, dtype=np.int64)
    partners = np.empty_like(batch.images)
    for i in range(n):
        source = int(batch.scanner_ids[i])
        others = [t for t in range(num_scanners) if t != source]
        targets[i] = others[int(rng.integers(0, len(others)))]
        key = (int(batch.record_indices[i]), int(targets[i]))
        if key not in store:
            raise KeyError(
                f"counterfactual store has no entry for record {key[0]} -> scanner {key[1]}"
            )
        partners[i] = store.get(*key)

    view_a, view_b = _augment_pairwise(batch.images, partners, policy, rng)
    return PairBatch(
        view_a=view_a,
        view_b=view_b,
        strategy="cf_simclr",
        source_scanner=batch.scanner_ids.copy(),
        view_b_scanner=targets,
        a_is_counterfactual=np.zeros(n, dtype=bool),
        b_is_counterfactual=np.ones(n, dtype=bool),
        record_indices=batch.record_indices.copy(),
    )
