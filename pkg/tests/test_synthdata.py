"""Synthetic dataset generation: rendering, scanner transforms, splits,
weighted sampling."""

import numpy as np
import pytest
from scipy import ndimage
from scipy.stats import chi2_contingency

from cfcontrast import synthdata as sd


def mean_thickness(image: np.ndarray, threshold: float = 0.45) -> float:
    """Morphological oracle: mean distance-to-background over foreground."""
    fg = image > threshold
    assert fg.any(), "render produced no foreground"
    return float(ndimage.distance_transform_edt(fg)[fg].mean())


class TestRenderBase:
    def test_deterministic(self):
        a = sd.render_base(2, 1234, (32, 32))
        b = sd.render_base(2, 1234, (32, 32))
        np.testing.assert_array_equal(a, b)

    def test_thickness_increases_with_class(self):
        # independent morphological oracle over 100 renders per class
        means = []
        for c in range(4):
            values = [mean_thickness(sd.render_base(c, seed, (32, 32))) for seed in range(100)]
            means.append(np.mean(values))
        assert all(means[i] < means[i + 1] for i in range(3)), means

    def test_subject_seed_changes_image(self):
        a = sd.render_base(1, 0, (32, 32))
        b = sd.render_base(1, 1, (32, 32))
        assert float(((a - b) ** 2).sum()) > 0

    def test_range_and_dtype(self):
        img = sd.render_base(3, 5, (48, 40))
        assert img.shape == (48, 40)
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_invalid_class_rejected(self):
        with pytest.raises(sd.ConfigError):
            sd.render_base(4, 0, (32, 32))
        with pytest.raises(sd.ConfigError):
            sd.render_base(-1, 0, (32, 32))


class TestApplyScanner:
    def test_identity_spec_is_exact(self):
        img = sd.render_base(1, 3, (32, 32))
        ident = sd.ScannerSpec(scanner_id=0)
        assert ident.is_identity()
        for seed in (0, 1, 99):
            np.testing.assert_array_equal(sd.apply_scanner(img, ident, seed), img)

    def test_zero_noise_is_seed_independent(self):
        img = sd.render_base(0, 8, (32, 32))
        spec = sd.ScannerSpec(scanner_id=0, gamma=1.4, vignette_strength=0.3, noise_sigma=0.0)
        a = sd.apply_scanner(img, spec, 0)
        b = sd.apply_scanner(img, spec, 12345)
        np.testing.assert_array_equal(a, b)

    def test_noise_is_seeded(self):
        img = sd.render_base(0, 8, (32, 32))
        spec = sd.ScannerSpec(scanner_id=0, noise_sigma=0.05)
        a = sd.apply_scanner(img, spec, 1)
        b = sd.apply_scanner(img, spec, 1)
        c = sd.apply_scanner(img, spec, 2)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_watermark_confined_to_glyph_bbox(self):
        # pixel-diff mask oracle: on/off outputs may differ only inside the bbox
        img = sd.render_base(2, 11, (32, 32))
        on = sd.ScannerSpec(scanner_id=1, gamma=0.8, noise_sigma=0.02, watermark=True)
        off = sd.ScannerSpec(scanner_id=1, gamma=0.8, noise_sigma=0.02, watermark=False)
        a = sd.apply_scanner(img, on, 7)
        b = sd.apply_scanner(img, off, 7)
        diff = a != b
        rows, cols = sd.glyph_bbox((32, 32))
        outside = diff.copy()
        outside[rows, cols] = False
        assert not outside.any()
        assert diff[rows, cols].any()

    def test_output_clamped(self):
        img = sd.render_base(3, 2, (32, 32))
        spec = sd.ScannerSpec(scanner_id=0, brightness_offset=0.3, noise_sigma=0.2, contrast_gain=2.0)
        out = sd.apply_scanner(img, spec, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rejects_out_of_range_input(self):
        bad = np.full((32, 32), 1.5, dtype=np.float32)
        with pytest.raises(ValueError):
            sd.apply_scanner(bad, sd.ScannerSpec(scanner_id=0), 0)


class TestScannerSpecValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"gamma": 0.0},
            {"gamma": -1.0},
            {"contrast_gain": 0.0},
            {"brightness_offset": 0.4},
            {"noise_sigma": -0.1},
            {"blur_radius": -1.0},
            {"vignette_strength": 1.5},
            {"prevalence": 0.0},
            {"prevalence": 1.2},
        ],
    )
    def test_invalid_fields_rejected(self, kwargs):
        with pytest.raises(sd.ConfigError):
            sd.ScannerSpec(scanner_id=0, **kwargs)

    def test_prevalences_must_sum_to_one(self):
        specs = [
            sd.ScannerSpec(scanner_id=0, prevalence=0.7),
            sd.ScannerSpec(scanner_id=1, prevalence=0.2),
        ]
        with pytest.raises(sd.ConfigError):
            sd.validate_prevalences(specs)


class TestGenerateDataset:
    def test_prevalence_counts_within_one_percent(self):
        cfg = sd.DataConfig(
            num_records=20_000,
            scanners=sd.default_scanner_specs(),
            master_seed=3,
        )
        manifest = sd.generate_dataset(cfg)
        freq = np.bincount(manifest.scanner_ids, minlength=3) / len(manifest)
        expected = np.array([0.90, 0.05, 0.05])
        assert np.all(np.abs(freq - expected) <= 0.01), freq

    def test_single_scanner(self):
        cfg = sd.DataConfig(
            num_records=300,
            scanners=[sd.ScannerSpec(scanner_id=0, prevalence=1.0)],
            master_seed=5,
        )
        manifest = sd.generate_dataset(cfg)
        assert (manifest.scanner_ids == 0).all()

    def test_regeneration_is_bit_identical(self, tiny_manifest):
        cfg = sd.DataConfig(
            num_records=600,
            scanners=tiny_manifest.scanner_specs,
            master_seed=101,
        )
        again = sd.generate_dataset(cfg)
        np.testing.assert_array_equal(again.images, tiny_manifest.images)
        np.testing.assert_array_equal(again.class_labels, tiny_manifest.class_labels)
        np.testing.assert_array_equal(again.scanner_ids, tiny_manifest.scanner_ids)
        np.testing.assert_array_equal(again.splits, tiny_manifest.splits)

    def test_real_records_point_to_themselves(self, tiny_manifest):
        assert not tiny_manifest.is_counterfactual.any()
        np.testing.assert_array_equal(
            tiny_manifest.source_index, np.arange(len(tiny_manifest))
        )

    def test_class_scanner_independence_chi_square(self):
        cfg = sd.DataConfig(
            num_records=20_000,
            scanners=sd.default_scanner_specs(),
            master_seed=3,
        )
        manifest = sd.generate_dataset(cfg)
        table = sd.scanner_label_contingency(manifest)
        result = chi2_contingency(table)
        assert result.pvalue > 0.01, result.pvalue

    def test_correlation_knob_induces_dependence(self):
        cfg = sd.DataConfig(
            num_records=5_000,
            scanners=sd.default_scanner_specs(),
            label_scanner_correlation=0.5,
            master_seed=3,
        )
        manifest = sd.generate_dataset(cfg)
        result = chi2_contingency(sd.scanner_label_contingency(manifest))
        assert result.pvalue < 1e-6

    def test_bad_prevalences_rejected(self):
        with pytest.raises(sd.ConfigError):
            sd.DataConfig(
                num_records=100,
                scanners=[
                    sd.ScannerSpec(scanner_id=0, prevalence=0.5),
                    sd.ScannerSpec(scanner_id=1, prevalence=0.4),
                ],
                master_seed=0,
            )

    def test_images_in_range(self, tiny_manifest):
        assert tiny_manifest.images.min() >= 0.0
        assert tiny_manifest.images.max() <= 1.0


class TestSplitBySubject:
    def test_subjects_not_split_across_splits(self, tiny_manifest):
        for subject in np.unique(tiny_manifest.subject_ids):
            tags = tiny_manifest.splits[tiny_manifest.subject_ids == subject]
            assert len(set(tags.tolist())) == 1

    def test_split_proportions(self):
        # ~1000 subjects at 2-4 images each
        cfg = sd.DataConfig(
            num_records=3000,
            scanners=[sd.ScannerSpec(scanner_id=0, prevalence=1.0)],
            split_ratios=(0.8, 0.1, 0.1),
            master_seed=17,
        )
        manifest = sd.generate_dataset(cfg)
        subjects = np.unique(manifest.subject_ids)
        subj_split = {
            s: manifest.splits[manifest.subject_ids == s][0] for s in subjects
        }
        counts = np.bincount(list(subj_split.values()), minlength=3)
        frac = counts / subjects.size
        assert np.all(np.abs(frac - np.array([0.8, 0.1, 0.1])) <= 0.02), frac

    def test_same_seed_same_assignment(self, tiny_manifest):
        a = sd.split_by_subject(tiny_manifest, (0.7, 0.1, 0.2), seed=55)
        b = sd.split_by_subject(tiny_manifest, (0.7, 0.1, 0.2), seed=55)
        np.testing.assert_array_equal(a.splits, b.splits)
        # the input manifest itself is untouched
        assert a.splits is not tiny_manifest.splits

    def test_too_few_subjects_rejected(self):
        cfg_small = sd.DataConfig(
            num_records=4,
            scanners=[sd.ScannerSpec(scanner_id=0, prevalence=1.0)],
            images_per_subject=(4, 4),
            master_seed=1,
        )
        with pytest.raises(sd.ConfigError):
            sd.generate_dataset(cfg_small)


class TestWeightedSampler:
    def test_weight_ratio_matches_counts(self, tiny_manifest):
        weights = sd.make_weighted_sampler(tiny_manifest)
        counts = np.bincount(tiny_manifest.scanner_ids)
        w_by_scanner = [weights[tiny_manifest.scanner_ids == s][0] for s in range(3)]
        # weight ratio is inverse count ratio
        np.testing.assert_allclose(
            w_by_scanner[0] / w_by_scanner[1], counts[1] / counts[0], rtol=1e-12
        )

    def test_two_scanner_ratio_one_to_nine(self):
        cfg = sd.DataConfig(
            num_records=1000,
            scanners=[
                sd.ScannerSpec(scanner_id=0, prevalence=0.9),
                sd.ScannerSpec(scanner_id=1, prevalence=0.1),
            ],
            master_seed=23,
        )
        manifest = sd.generate_dataset(cfg)
        counts = np.bincount(manifest.scanner_ids)
        weights = sd.make_weighted_sampler(manifest)
        w0 = weights[manifest.scanner_ids == 0][0]
        w1 = weights[manifest.scanner_ids == 1][0]
        np.testing.assert_allclose(w1 / w0, counts[0] / counts[1], rtol=1e-12)

    def test_monte_carlo_uniform_frequency(self, tiny_manifest, rng):
        # 100k seeded draws: per-scanner frequency within [0.313, 0.353]
        weights = sd.make_weighted_sampler(tiny_manifest)
        draws = rng.choice(len(tiny_manifest), size=100_000, p=weights)
        freq = np.bincount(tiny_manifest.scanner_ids[draws], minlength=3) / 100_000
        assert np.all(freq >= 0.313) and np.all(freq <= 0.353), freq

    def test_single_scanner_uniform(self):
        cfg = sd.DataConfig(
            num_records=100,
            scanners=[sd.ScannerSpec(scanner_id=0, prevalence=1.0)],
            master_seed=2,
        )
        manifest = sd.generate_dataset(cfg)
        weights = sd.make_weighted_sampler(manifest)
        np.testing.assert_allclose(weights, 1.0 / len(manifest))

    def test_empty_rejected(self, tiny_manifest):
        with pytest.raises(sd.ConfigError):
            sd.make_weighted_sampler(tiny_manifest, indices=np.array([], dtype=int))


class TestManifestIO:
    def test_save_load_roundtrip(self, tiny_manifest, tmp_path):
        tiny_manifest.save(tmp_path / "ds")
        loaded = sd.DatasetManifest.load(tmp_path / "ds")
        np.testing.assert_array_equal(loaded.images, tiny_manifest.images)
        np.testing.assert_array_equal(loaded.class_labels, tiny_manifest.class_labels)
        np.testing.assert_array_equal(loaded.splits, tiny_manifest.splits)
        np.testing.assert_array_equal(loaded.subject_ids, tiny_manifest.subject_ids)
        assert loaded.scanner_specs == tiny_manifest.scanner_specs
        assert loaded.master_seed == tiny_manifest.master_seed

    def test_truncated_image_file_rejected(self, tiny_manifest, tmp_path):
        path = tiny_manifest.save(tmp_path / "ds")
        blob = (path / "images.f32").read_bytes()
        (path / "images.f32").write_bytes(blob[:-64])
        with pytest.raises(IOError):
            sd.DatasetManifest.load(path)
