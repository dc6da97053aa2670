"""Embedding extraction and domain-separation diagnostics.

Domain separation replaces eyeballing a t-SNE plot with a number:
leave-one-out k-nearest-neighbour scanner-prediction accuracy in cosine
space. A t-SNE scatter is kept as a purely diagnostic plot.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ..seeding import substream
from ..synthdata import DatasetManifest
from ..contrastive.encoder import ConvEncoder, embed_images

_TSNE_MAX_ROWS = 20_000
_TSNE_SUBSAMPLE = 16_000


@dataclass
class EmbeddingDump:
    embeddings: np.ndarray  # (n, D) float32
    scanner_ids: np.ndarray  # (n,) int64
    class_labels: np.ndarray  # (n,) int64
    record_indices: np.ndarray  # (n,) int64

    def __post_init__(self) -> None:
        n = self.embeddings.shape[0]
        for name in ("scanner_ids", "class_labels", "record_indices"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} must have one row per embedding")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            embeddings=self.embeddings,
            scanner_ids=self.scanner_ids,
            class_labels=self.class_labels,
            record_indices=self.record_indices,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingDump":
        data = np.load(Path(path))
        return cls(
            embeddings=data["embeddings"],
            scanner_ids=data["scanner_ids"],
            class_labels=data["class_labels"],
            record_indices=data["record_indices"],
        )


def extract_embedding_dump(
    encoder: ConvEncoder, manifest: DatasetManifest, split: str = "test"
) -> EmbeddingDump:
    idx = manifest.indices_for_split(split)
    idx = idx[~manifest.is_counterfactual[idx]]
    return EmbeddingDump(
        embeddings=embed_images(encoder, manifest.images[idx]),
        scanner_ids=manifest.scanner_ids[idx],
        class_labels=manifest.class_labels[idx],
        record_indices=idx.astype(np.int64),
    )


def subsample_balanced(dump: EmbeddingDump, per_scanner: int, seed: int) -> EmbeddingDump:
    """Equal-sized per-scanner subsample (seeded), for separation scoring."""
    rng = substream(seed, "balanced-subsample")
    picks = []
    for scanner in np.unique(dump.scanner_ids):
        members = np.flatnonzero(dump.scanner_ids == scanner)
        take = min(per_scanner, members.size)
        picks.append(rng.choice(members, size=take, replace=False))
    sel = np.sort(np.concatenate(picks))
    return EmbeddingDump(
        embeddings=dump.embeddings[sel],
        scanner_ids=dump.scanner_ids[sel],
        class_labels=dump.class_labels[sel],
        record_indices=dump.record_indices[sel],
    )


def domain_separation(dump: EmbeddingDump, k: int = 10) -> float:
    """Leave-one-out kNN scanner-prediction accuracy under cosine distance.

    1.0 means perfectly domain-separated embeddings; chance is
    1/num_scanners for balanced scanner groups.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts = np.bincount(dump.scanner_ids)
    counts = counts[counts > 0]
    if counts.min() < k + 1:
        raise ValueError(
            f"every scanner needs at least k+1={k + 1} records, smallest group has {counts.min()}"
        )
    z = dump.embeddings.astype(np.float64)
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    z = z / norms
    n = z.shape[0]
    labels = dump.scanner_ids
    num_scanners = int(labels.max()) + 1

    correct = 0
    chunk = 1024
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sims = z[start:stop] @ z.T
        for r in range(stop - start):
            sims[r, start + r] = -np.inf  # leave self out
        top = np.argpartition(-sims, kth=k - 1, axis=1)[:, :k]
        for r in range(stop - start):
            neigh = top[r]
            votes = np.bincount(labels[neigh], minlength=num_scanners)
            best = votes.max()
            tied = np.flatnonzero(votes == best)
            if tied.size == 1:
                pred = tied[0]
            else:
                # break ties by the most similar neighbour among tied classes
                tied_set = set(int(t) for t in tied)
                order = neigh[np.argsort(-sims[r, neigh], kind="stable")]
                pred = next(int(labels[i]) for i in order if int(labels[i]) in tied_set)
            correct += int(pred == labels[start + r])
    return correct / n


def tsne_plot(
    dump: EmbeddingDump,
    seed: int,
    out_path: str | Path,
    config_hash: str = "",
) -> Path:
    """2-D t-SNE scatter coloured by scanner (diagnostic only).

    Dumps above 20k rows are first subsampled to 16k with a seeded stream.
    """
    from sklearn.manifold import TSNE

    if len(dump) > _TSNE_MAX_ROWS:
        sel = tsne_subsample_indices(len(dump), seed)
        dump = EmbeddingDump(
            embeddings=dump.embeddings[sel],
            scanner_ids=dump.scanner_ids[sel],
            class_labels=dump.class_labels[sel],
            record_indices=dump.record_indices[sel],
        )
    n = len(dump)
    perplexity = min(30.0, max(2.0, (n - 1) / 3.0))
    coords = TSNE(
        n_components=2, random_state=seed, init="pca", perplexity=perplexity
    ).fit_transform(dump.embeddings.astype(np.float64))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 5))
    for scanner in np.unique(dump.scanner_ids):
        sel = dump.scanner_ids == scanner
        ax.scatter(coords[sel, 0], coords[sel, 1], s=6, alpha=0.6, label=f"scanner {scanner}")
    ax.legend(markerscale=2)
    title = "embedding t-SNE by scanner"
    if config_hash:
        title += f"  [config {config_hash}]"
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def tsne_subsample_indices(n: int, seed: int) -> np.ndarray:
    """Seeded selection of the 16k rows plotted when a dump exceeds 20k."""
    rng = substream(seed, "tsne-subsample")
    return np.sort(rng.choice(n, size=_TSNE_SUBSAMPLE, replace=False))
