"""Reproducible multi-scanner synthetic grayscale dataset.

Images are rendered as blob ensembles whose thickness band encodes an
ordinal class label, then passed through a parameterised scanner transform
that emulates acquisition shift (photometric curve, blur, noise, vignette,
optional burned-in text glyph). Everything is derived from a master seed so
a manifest regenerates bit-identically.

On-disk layout of a dataset directory (see also README):

- ``manifest.json``  -- scanner specs, master seed, shape, class count
- ``records.csv``    -- one row per record: index, class, scanner, subject,
  split, counterfactual flag, source index
- ``images.f32``     -- raw little-endian float32, record ``i`` occupying
  ``H*W`` consecutive values in row-major order
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage

from .seeding import seed_sequence, substream

SPLITS = ("train", "val", "test")

_PREVALENCE_TOL = 1e-9

# Blob radius band per class, in pixels at a 32-pixel reference side.
_RADIUS_BASE = 1.8
_RADIUS_STEP = 1.25
_RADIUS_BAND = 0.8

_GLYPH_VALUE = 0.92


class ConfigError(ValueError):
    """Invalid dataset or pipeline configuration."""


@dataclass(frozen=True)
class ScannerSpec:
    """Parameterisation of one synthetic acquisition domain."""

    scanner_id: int
    gamma: float = 1.0
    contrast_gain: float = 1.0
    brightness_offset: float = 0.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    vignette_strength: float = 0.0
    watermark: bool = False
    prevalence: float = 1.0

    def __post_init__(self) -> None:
        if self.scanner_id < 0:
            raise ConfigError(f"scanner_id must be >= 0, got {self.scanner_id}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.contrast_gain <= 0:
            raise ConfigError(f"contrast_gain must be positive, got {self.contrast_gain}")
        if not -0.3 <= self.brightness_offset <= 0.3:
            raise ConfigError(f"brightness_offset must be in [-0.3, 0.3], got {self.brightness_offset}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blur_radius < 0:
            raise ConfigError(f"blur_radius must be >= 0, got {self.blur_radius}")
        if not 0.0 <= self.vignette_strength <= 1.0:
            raise ConfigError(f"vignette_strength must be in [0, 1], got {self.vignette_strength}")
        if not 0.0 < self.prevalence <= 1.0:
            raise ConfigError(f"prevalence must be in (0, 1], got {self.prevalence}")

    def is_identity(self) -> bool:
        return (
            self.gamma == 1.0
            and self.contrast_gain == 1.0
            and self.brightness_offset == 0.0
            and self.noise_sigma == 0.0
            and self.blur_radius == 0.0
            and self.vignette_strength == 0.0
            and not self.watermark
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScannerSpec":
        return cls(**d)


def validate_prevalences(specs: list[ScannerSpec]) -> None:
    total = sum(s.prevalence for s in specs)
    if abs(total - 1.0) > _PREVALENCE_TOL:
        raise ConfigError(f"scanner prevalences must sum to 1, got {total!r}")
    ids = [s.scanner_id for s in specs]
    if ids != list(range(len(specs))):
        raise ConfigError(f"scanner_ids must be 0..{len(specs) - 1} in order, got {ids}")


@dataclass
class SampleRecord:
    """One image plus its metadata view of the manifest."""

    image: np.ndarray
    class_label: int
    scanner_id: int
    subject_id: int
    split: str
    is_counterfactual: bool = False
    source_index: int = -1


@dataclass
class DataConfig:
    """Inputs needed to generate a dataset deterministically."""

    num_records: int = 20_000
    image_shape: tuple[int, int] = (32, 32)
    num_classes: int = 4
    scanners: list[ScannerSpec] = field(default_factory=list)
    images_per_subject: tuple[int, int] = (2, 4)
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    class_priors: tuple[float, ...] | None = (0.4, 0.3, 0.2, 0.1)
    label_scanner_correlation: float = 0.0
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_records < 1:
            raise ConfigError("num_records must be >= 1")
        if min(self.image_shape) < 16:
            raise ConfigError(f"image_shape must be >= 16x16, got {self.image_shape}")
        if not self.scanners:
            raise ConfigError("at least one ScannerSpec is required")
        validate_prevalences(self.scanners)
        lo, hi = self.images_per_subject
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid images_per_subject {self.images_per_subject}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) <= 0:
            raise ConfigError(f"split ratios must be positive and sum to 1, got {self.split_ratios}")
        if self.class_priors is not None:
            if len(self.class_priors) != self.num_classes:
                raise ConfigError("class_priors length must equal num_classes")
            if abs(sum(self.class_priors) - 1.0) > 1e-9 or min(self.class_priors) <= 0:
                raise ConfigError("class_priors must be positive and sum to 1")
        if not 0.0 <= self.label_scanner_correlation <= 1.0:
            raise ConfigError("label_scanner_correlation must be in [0, 1]")


@dataclass
class DatasetManifest:
    """Immutable dataset container: image stack + per-record metadata arrays."""

    images: np.ndarray  # (n, H, W) float32 in [0, 1]
    class_labels: np.ndarray  # (n,) int64
    scanner_ids: np.ndarray  # (n,) int64
    subject_ids: np.ndarray  # (n,) int64
    splits: np.ndarray  # (n,) int8 index into SPLITS
    is_counterfactual: np.ndarray  # (n,) bool
    source_index: np.ndarray  # (n,) int64
    scanner_specs: list[ScannerSpec]
    master_seed: int
    num_classes: int
    image_shape: tuple[int, int]
    config_hash: str = ""

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_scanners(self) -> int:
        return len(self.scanner_specs)

    def record(self, index: int) -> SampleRecord:
        return SampleRecord(
            image=self.images[index],
            class_label=int(self.class_labels[index]),
            scanner_id=int(self.scanner_ids[index]),
            subject_id=int(self.subject_ids[index]),
            split=SPLITS[self.splits[index]],
            is_counterfactual=bool(self.is_counterfactual[index]),
            source_index=int(self.source_index[index]),
        )

    def indices_for_split(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLITS.index(split))

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": 1,
            "master_seed": self.master_seed,
            "num_classes": self.num_classes,
            "image_shape": list(self.image_shape),
            "num_records": len(self),
            "scanner_specs": [s.to_dict() for s in self.scanner_specs],
            "config_hash": self.config_hash,
        }
        (directory / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        table = pd.DataFrame(
            {
                "index": np.arange(len(self)),
                "class_label": self.class_labels,
                "scanner_id": self.scanner_ids,
                "subject_id": self.subject_ids,
                "split": [SPLITS[s] for s in self.splits],
                "is_counterfactual": self.is_counterfactual.astype(int),
                "source_index": self.source_index,
            }
        )
        table.to_csv(directory / "records.csv", index=False)
        self.images.astype("<f4").tofile(directory / "images.f32")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "DatasetManifest":
        directory = Path(directory)
        meta = json.loads((directory / "manifest.json").read_text())
        table = pd.read_csv(directory / "records.csv")
        h, w = meta["image_shape"]
        n = int(meta["num_records"])
        images = np.fromfile(directory / "images.f32", dtype="<f4")
        if images.size != n * h * w:
            raise IOError(
                f"images.f32 holds {images.size} values, expected {n * h * w} for {n} records of {h}x{w}"
            )
        return cls(
            images=images.reshape(n, h, w),
            class_labels=table["class_label"].to_numpy(np.int64),
            scanner_ids=table["scanner_id"].to_numpy(np.int64),
            subject_ids=table["subject_id"].to_numpy(np.int64),
            splits=np.array([SPLITS.index(s) for s in table["split"]], dtype=np.int8),
            is_counterfactual=table["is_counterfactual"].to_numpy(bool),
            source_index=table["source_index"].to_numpy(np.int64),
            scanner_specs=[ScannerSpec.from_dict(d) for d in meta["scanner_specs"]],
            master_seed=int(meta["master_seed"]),
            num_classes=int(meta["num_classes"]),
            image_shape=(h, w),
            config_hash=meta.get("config_hash", ""),
        )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def class_radius_band(class_label: int, image_shape: tuple[int, int]) -> tuple[float, float]:
    """Blob radius interval (pixels) for an ordinal class at this resolution."""
    unit = min(image_shape) / 32.0
    lo = (_RADIUS_BASE + _RADIUS_STEP * class_label) * unit
    return lo, lo + _RADIUS_BAND * unit


def render_base(
    class_label: int,
    subject_seed: int,
    image_shape: tuple[int, int] = (32, 32),
    num_classes: int = 4,
) -> np.ndarray:
    """Render the scanner-free base image for one sample.

    The class label sets the blob thickness band; the subject seed drives all
    nuisance geometry (blob count, positions, background shading).
    """
    if not 0 <= class_label < num_classes:
        raise ConfigError(f"class_label must be in [0, {num_classes}), got {class_label}")
    if min(image_shape) < 16:
        raise ConfigError(f"image_shape must be >= 16x16, got {image_shape}")
    rng = np.random.default_rng(seed_sequence(subject_seed, "render", class_label))
    h, w = image_shape

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    gx = rng.uniform(-0.06, 0.06)
    gy = rng.uniform(-0.06, 0.06)
    base = 0.10 + gx * (xx / w - 0.5) + gy * (yy / h - 0.5)
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=4.0)
    img = (base + 0.02 * texture).astype(np.float32)

    r_lo, r_hi = class_radius_band(class_label, image_shape)
    n_blobs = int(rng.integers(3, 6))
    margin = r_hi + 1.0
    for _ in range(n_blobs):
        cy = rng.uniform(margin, h - margin)
        cx = rng.uniform(margin, w - margin)
        radius = rng.uniform(r_lo, r_hi)
        level = rng.uniform(0.65, 0.85)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        blob = np.clip(radius + 0.5 - dist, 0.0, 1.0) * level
        img = np.maximum(img, blob.astype(np.float32))

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _glyph_bitmaps() -> dict[str, np.ndarray]:
    # 5x3 block letterforms for the burned-in corner tag.
    a = ["111", "101", "111", "101", "101"]
    one = ["010", "110", "010", "010", "111"]
    to_arr = lambda rows: np.array([[c == "1" for c in r] for r in rows], dtype=bool)
    return {"A": to_arr(a), "1": to_arr(one)}


def watermark_mask(image_shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of the corner text glyph ("A1") for this image shape."""
    h, w = image_shape
    scale = max(1, round(min(h, w) / 32))
    glyphs = _glyph_bitmaps()
    text = np.hstack([glyphs["A"], np.zeros((5, 1), dtype=bool), glyphs["1"]])
    text = np.kron(text, np.ones((scale, scale), dtype=bool))
    mask = np.zeros((h, w), dtype=bool)
    margin = 2 * scale
    th, tw = text.shape
    mask[margin : margin + th, w - margin - tw : w - margin] = text
    return mask


def glyph_bbox(image_shape: tuple[int, int]) -> tuple[slice, slice]:
    """Row/column slices bounding the watermark glyph."""
    mask = watermark_mask(image_shape)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def apply_scanner(image: np.ndarray, spec: ScannerSpec, noise_seed: int) -> np.ndarray:
    """Apply one scanner's acquisition transform.

    Fixed order: gamma curve, contrast gain about 0.5, brightness offset,
    Gaussian blur, additive seeded noise, vignette, watermark glyph. Each
    step is skipped at its identity parameter so the identity spec maps any
    image to itself exactly. Output is clamped to [0, 1].
    """
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("apply_scanner expects image values in [0, 1]")
    x = image.astype(np.float32, copy=True)
    h, w = x.shape

    if spec.gamma != 1.0:
        x = np.power(x, np.float32(spec.gamma))
    if spec.contrast_gain != 1.0:
        x = np.float32(0.5) + np.float32(spec.contrast_gain) * (x - np.float32(0.5))
    if spec.brightness_offset != 0.0:
        x = x + np.float32(spec.brightness_offset)
    if spec.blur_radius > 0.0:
        x = ndimage.gaussian_filter(x, sigma=spec.blur_radius, mode="nearest")
    if spec.noise_sigma > 0.0:
        rng = np.random.default_rng(seed_sequence(noise_seed, "scanner-noise", spec.scanner_id))
        x = x + rng.standard_normal((h, w), dtype=np.float32) * np.float32(spec.noise_sigma)
    if spec.vignette_strength > 0.0:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        ny = (2.0 * yy / (h - 1)) - 1.0
        nx = (2.0 * xx / (w - 1)) - 1.0
        rho2 = (nx**2 + ny**2) / 2.0
        x = x * (1.0 - np.float32(spec.vignette_strength) * rho2)
    if spec.watermark:
        mask = watermark_mask((h, w))
        x[mask] = np.maximum(x[mask], np.float32(_GLYPH_VALUE))

    return np.clip(x, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def _scanner_distribution(cfg: DataConfig, class_label: int) -> np.ndarray:
    prev = np.array([s.prevalence for s in cfg.scanners], dtype=np.float64)
    rho = cfg.label_scanner_correlation
    if rho == 0.0:
        return prev
    tied = np.zeros_like(prev)
    tied[class_label % len(prev)] = 1.0
    mix = (1.0 - rho) * prev + rho * tied
    return mix / mix.sum()


def generate_dataset(cfg: DataConfig) -> DatasetManifest:
    """Generate a full dataset (images, labels, scanners, subject splits).

    All per-record randomness comes from substreams keyed on the master seed
    and record/subject indices, so regeneration is bit-identical and record
    generation could be fanned out across workers.
    """
    n = cfg.num_records
    num_scanners = len(cfg.scanners)
    priors = (
        np.array(cfg.class_priors, dtype=np.float64)
        if cfg.class_priors is not None
        else np.full(cfg.num_classes, 1.0 / cfg.num_classes)
    )

    class_labels = np.empty(n, dtype=np.int64)
    scanner_ids = np.empty(n, dtype=np.int64)
    subject_ids = np.empty(n, dtype=np.int64)
    images = np.empty((n, *cfg.image_shape), dtype=np.float32)

    record = 0
    subject = 0
    while record < n:
        rng_subject = substream(cfg.master_seed, "subject", subject)
        n_img = int(rng_subject.integers(cfg.images_per_subject[0], cfg.images_per_subject[1] + 1))
        n_img = min(n_img, n - record)
        class_label = int(rng_subject.choice(cfg.num_classes, p=priors))
        for j in range(n_img):
            rng_rec = substream(cfg.master_seed, "record", record)
            scanner = int(rng_rec.choice(num_scanners, p=_scanner_distribution(cfg, class_label)))
            render_seed = int(rng_rec.integers(0, 2**62))
            base = render_base(class_label, render_seed, cfg.image_shape, cfg.num_classes)
            noise_seed = int(rng_rec.integers(0, 2**62))
            images[record] = apply_scanner(base, cfg.scanners[scanner], noise_seed)
            class_labels[record] = class_label
            scanner_ids[record] = scanner
            subject_ids[record] = subject
            record += 1
        subject += 1

    manifest = DatasetManifest(
        images=images,
        class_labels=class_labels,
        scanner_ids=scanner_ids,
        subject_ids=subject_ids,
        splits=np.zeros(n, dtype=np.int8),
        is_counterfactual=np.zeros(n, dtype=bool),
        source_index=np.arange(n, dtype=np.int64),
        scanner_specs=list(cfg.scanners),
        master_seed=cfg.master_seed,
        num_classes=cfg.num_classes,
        image_shape=cfg.image_shape,
    )
    return split_by_subject(manifest, cfg.split_ratios, cfg.master_seed)


def split_by_subject(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float],
    seed: int,
) -> DatasetManifest:
    """Assign train/val/test tags at the subject level.

    Returns a new manifest (images shared by reference; manifests are
    treated as immutable). Subjects are shuffled with a seeded stream and
    partitioned so subject counts match the ratios up to rounding; every
    record of a subject lands in the same split.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ConfigError(f"split ratios must be positive and sum to 1, got {ratios}")
    subjects = np.unique(manifest.subject_ids)
    if subjects.size < 3:
        raise ConfigError(f"need at least 3 subjects to split, got {subjects.size}")

    rng = substream(seed, "subject-split")
    order = rng.permutation(subjects)

    n = subjects.size
    counts = np.floor(np.array(ratios) * n).astype(int)
    # Hand leftovers to the splits with the largest fractional remainders.
    remainders = np.array(ratios) * n - counts
    for _ in range(n - counts.sum()):
        k = int(np.argmax(remainders))
        counts[k] += 1
        remainders[k] = -1.0

    split_of_subject = {}
    start = 0
    for split_idx, count in enumerate(counts):
        for s in order[start : start + count]:
            split_of_subject[int(s)] = split_idx
        start += count

    new_splits = np.array(
        [split_of_subject[int(s)] for s in manifest.subject_ids], dtype=np.int8
    )
    return replace(manifest, splits=new_splits)


def make_weighted_sampler(
    manifest: DatasetManifest, indices: np.ndarray | None = None
) -> np.ndarray:
    """Per-record sampling probabilities inversely proportional to scanner count.

    Drawing with these weights makes the expected per-scanner frequency
    uniform across the scanners present in ``indices`` (default: all records).
    """
    if indices is None:
        indices = np.arange(len(manifest))
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ConfigError("cannot build a sampler over an empty record set")
    scanners = manifest.scanner_ids[indices]
    counts = np.bincount(scanners, minlength=manifest.num_scanners)
    weights = 1.0 / counts[scanners]
    return weights / weights.sum()


def scanner_label_contingency(manifest: DatasetManifest) -> np.ndarray:
    """Class-by-scanner count table (for independence checks)."""
    table = np.zeros((manifest.num_classes, manifest.num_scanners), dtype=np.int64)
    np.add.at(table, (manifest.class_labels, manifest.scanner_ids), 1)
    return table


def default_scanner_specs() -> list[ScannerSpec]:
    """Three-domain desk default: one dominant scanner plus two minorities.

    The photometric signatures are deliberately strong and mutually distinct
    so a domain classifier separates them easily, while remaining the kind
    of global appearance change a conditional decoder can reproduce.
    """
    return [
        ScannerSpec(
            scanner_id=0,
            gamma=1.0,
            contrast_gain=1.0,
            brightness_offset=0.0,
            noise_sigma=0.01,
            blur_radius=0.0,
            vignette_strength=0.0,
            watermark=False,
            prevalence=0.90,
        ),
        ScannerSpec(
            scanner_id=1,
            gamma=0.65,
            contrast_gain=1.25,
            brightness_offset=0.10,
            noise_sigma=0.01,
            blur_radius=0.6,
            vignette_strength=0.35,
            watermark=True,
            prevalence=0.05,
        ),
        ScannerSpec(
            scanner_id=2,
            gamma=1.7,
            contrast_gain=0.75,
            brightness_offset=-0.08,
            noise_sigma=0.01,
            blur_radius=0.0,
            vignette_strength=0.0,
            watermark=False,
            prevalence=0.05,
        ),
    ]
