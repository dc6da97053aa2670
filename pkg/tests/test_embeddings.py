"""Embedding dumps, domain separation, t-SNE plumbing."""

import numpy as np
import pytest

from cfcontrast.evalharness.embeddings import (
    EmbeddingDump,
    domain_separation,
    extract_embedding_dump,
    subsample_balanced,
    tsne_plot,
    tsne_subsample_indices,
)


def _synthetic_dump(rng, per_scanner=120, scanners=3, d=16, spread=0.0):
    centers = rng.normal(size=(scanners, d)) * 5.0
    embeddings, labels = [], []
    for s in range(scanners):
        embeddings.append(centers[s] + spread * rng.normal(size=(per_scanner, d)))
        labels.extend([s] * per_scanner)
    n = per_scanner * scanners
    return EmbeddingDump(
        embeddings=np.concatenate(embeddings).astype(np.float32),
        scanner_ids=np.array(labels, dtype=np.int64),
        class_labels=rng.integers(0, 4, size=n),
        record_indices=np.arange(n, dtype=np.int64),
    )


class TestDomainSeparation:
    def test_identical_per_scanner_embeddings_score_one(self, rng):
        dump = _synthetic_dump(rng, spread=0.0)
        assert domain_separation(dump, k=10) == 1.0

    def test_permuted_labels_near_chance(self, rng):
        dump = _synthetic_dump(rng, per_scanner=300, spread=0.0)
        permuted = EmbeddingDump(
            embeddings=dump.embeddings,
            scanner_ids=rng.permutation(dump.scanner_ids),
            class_labels=dump.class_labels,
            record_indices=dump.record_indices,
        )
        acc = domain_separation(permuted, k=10)
        assert abs(acc - 1.0 / 3.0) <= 0.05, acc

    def test_k_validation(self, rng):
        dump = _synthetic_dump(rng)
        with pytest.raises(ValueError):
            domain_separation(dump, k=0)

    def test_small_group_rejected(self, rng):
        dump = _synthetic_dump(rng, per_scanner=5)
        with pytest.raises(ValueError, match="k\\+1"):
            domain_separation(dump, k=10)

    def test_row_count_preserved_by_extraction(self, small_world):
        m = small_world.manifest
        dump = extract_embedding_dump(
            small_world.encoders["simclr"].encoder, m, split="test"
        )
        assert len(dump) == m.indices_for_split("test").size
        assert dump.embeddings.shape[1] == small_world.encoders["simclr"].encoder.cfg.repr_dim


class TestBalancedSubsample:
    def test_equal_groups(self, small_world):
        dump = extract_embedding_dump(
            small_world.encoders["simclr"].encoder, small_world.manifest, split="test"
        )
        balanced = subsample_balanced(dump, per_scanner=15, seed=4)
        counts = np.bincount(balanced.scanner_ids)
        assert (counts[counts > 0] == 15).all()

    def test_seeded(self, rng):
        dump = _synthetic_dump(rng)
        a = subsample_balanced(dump, 20, seed=9)
        b = subsample_balanced(dump, 20, seed=9)
        np.testing.assert_array_equal(a.record_indices, b.record_indices)


class TestTsne:
    def test_plot_file_written(self, rng, tmp_path):
        dump = _synthetic_dump(rng, per_scanner=40, spread=1.0)
        path = tsne_plot(dump, seed=3, out_path=tmp_path / "tsne.png", config_hash="beef")
        assert path.exists() and path.stat().st_size > 0

    def test_subsample_is_16k_when_dump_exceeds_20k(self):
        sel = tsne_subsample_indices(25_000, seed=1)
        assert sel.size == 16_000
        assert np.unique(sel).size == sel.size

    def test_subsample_selection_seeded(self):
        a = tsne_subsample_indices(30_000, seed=7)
        b = tsne_subsample_indices(30_000, seed=7)
        np.testing.assert_array_equal(a, b)

    def test_dump_save_load(self, rng, tmp_path):
        dump = _synthetic_dump(rng, per_scanner=10)
        dump.save(tmp_path / "dump.npz")
        loaded = EmbeddingDump.load(tmp_path / "dump.npz")
        np.testing.assert_array_equal(loaded.embeddings, dump.embeddings)
        np.testing.assert_array_equal(loaded.scanner_ids, dump.scanner_ids)
