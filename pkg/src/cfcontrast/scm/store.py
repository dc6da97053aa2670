"""Offline counterfactual store: build once, read forever.

Layout of a store directory:

- ``cf_scanner<t>.f32`` -- one shard per target scanner, raw little-endian
  float32 images in write order
- ``index.csv``         -- (source_index, target_scanner, shard, offset)
- ``store.json``        -- written last; its presence marks the store
  complete (a crashed build leaves no marker and the store is refused)
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

from ..synthdata import DatasetManifest
from .inference import LatentState, ParentVector, abduct, predict
from .train import GenerativeModel, model_hash


class StoreError(RuntimeError):
    """Missing, incomplete or inconsistent counterfactual store."""


class CounterfactualStore:
    """Read-only map (source_index, target_scanner) -> counterfactual image."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        marker = self.directory / "store.json"
        if not marker.exists():
            raise StoreError(
                f"{self.directory} is not a complete counterfactual store "
                "(missing store.json; the build may have been interrupted)"
            )
        meta = json.loads(marker.read_text())
        self.image_shape: tuple[int, int] = tuple(meta["image_shape"])
        self.checkpoint_hash: str = meta["checkpoint_hash"]
        self.config_hash: str = meta.get("config_hash", "")
        self.num_scanners: int = meta["num_scanners"]
        index = pd.read_csv(self.directory / "index.csv")
        if len(index) != meta["num_entries"]:
            raise StoreError(
                f"index holds {len(index)} entries, store.json declares {meta['num_entries']}"
            )
        self._offsets: dict[tuple[int, int], tuple[str, int]] = {
            (int(r.source_index), int(r.target_scanner)): (str(r.shard), int(r.offset))
            for r in index.itertuples()
        }
        self._shards: dict[str, np.memmap] = {}
        h, w = self.image_shape
        for shard in index["shard"].unique():
            path = self.directory / shard
            data = np.memmap(path, dtype="<f4", mode="r")
            if data.size % (h * w):
                raise StoreError(f"shard {shard} size is not a multiple of the image size")
            self._shards[str(shard)] = data.reshape(-1, h, w)

    def __len__(self) -> int:
        return len(self._offsets)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return (int(key[0]), int(key[1])) in self._offsets

    def keys(self):
        return self._offsets.keys()

    def get(self, source_index: int, target_scanner: int) -> np.ndarray:
        key = (int(source_index), int(target_scanner))
        if key not in self._offsets:
            raise KeyError(
                f"no counterfactual for record {key[0]} -> scanner {key[1]} in {self.directory}"
            )
        shard, offset = self._offsets[key]
        return np.array(self._shards[shard][offset], dtype=np.float32)

    def content_hash(self) -> str:
        """Digest over shard bytes + index, for rebuild-determinism checks."""
        digest = hashlib.sha256()
        for shard in sorted(self._shards):
            digest.update(shard.encode())
            digest.update((self.directory / shard).read_bytes())
        digest.update((self.directory / "index.csv").read_bytes())
        return digest.hexdigest()


def build_store(
    model: GenerativeModel,
    manifest: DatasetManifest,
    directory: str | Path,
    batch_size: int = 256,
) -> CounterfactualStore:
    """Generate one deterministic counterfactual per (train record, other
    scanner) pair and persist them shard-per-target-scanner."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    marker = directory / "store.json"
    if marker.exists():
        marker.unlink()  # any rebuild invalidates the old completeness marker

    train_idx = manifest.indices_for_split("train")
    train_idx = train_idx[~manifest.is_counterfactual[train_idx]]
    num_scanners = manifest.num_scanners
    h, w = manifest.image_shape

    shard_files = {
        t: open(directory / f"cf_scanner{t}.f32", "wb") for t in range(num_scanners)
    }
    shard_counts = {t: 0 for t in range(num_scanners)}
    index_rows: list[tuple[int, int, str, int]] = []
    try:
        for start in range(0, train_idx.size, batch_size):
            batch = train_idx[start : start + batch_size]
            images = manifest.images[batch]
            sources = manifest.scanner_ids[batch]
            state: LatentState = abduct(
                model, images, ParentVector(sources), mode="deterministic"
            )
            for target in range(num_scanners):
                rows = np.flatnonzero(sources != target)
                if rows.size == 0:
                    continue
                sub_state = state.select(rows)
                targets = ParentVector(np.full(rows.size, target, dtype=np.int64))
                generated = predict(model, sub_state, targets).astype("<f4")
                shard_files[target].write(generated.tobytes())
                shard = f"cf_scanner{target}.f32"
                for k, row in enumerate(rows):
                    index_rows.append((int(batch[row]), target, shard, shard_counts[target] + k))
                shard_counts[target] += rows.size
    finally:
        for f in shard_files.values():
            f.close()

    index = pd.DataFrame(index_rows, columns=["source_index", "target_scanner", "shard", "offset"])
    index.sort_values(["source_index", "target_scanner"], inplace=True, kind="stable")
    index.to_csv(directory / "index.csv", index=False)

    meta = {
        "format_version": 1,
        "num_entries": len(index),
        "num_scanners": num_scanners,
        "image_shape": [h, w],
        "checkpoint_hash": model_hash(model),
        "config_hash": model.config_hash,
    }
    marker.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return CounterfactualStore(directory)
