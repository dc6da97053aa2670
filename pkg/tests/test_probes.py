"""Linear probing, finetuning, sweeps: schema, determinism, baselines."""

import numpy as np
import pandas as pd
import pytest
import torch

from cfcontrast.contrastive.encoder import ConvEncoder, EncoderConfig
from cfcontrast.evalharness.probes import (
    MetricsReport,
    ProbeConfig,
    _budget_count,
    _stratified_subsample,
    finetune,
    linear_probe,
)
from cfcontrast.evalharness.sweep import label_efficiency_sweep


@pytest.fixture(scope="module")
def probe_report(small_world):
    cfg = ProbeConfig(mode="linear_probe", label_budget=0.1, seeds=(0, 1, 2), encoder_name="simclr")
    return linear_probe(small_world.encoders["simclr"].encoder, small_world.manifest, cfg)


class TestLinearProbe:
    def test_one_row_per_scanner_budget_seed(self, small_world, probe_report):
        m = small_world.manifest
        groups = m.num_scanners + 1  # per-scanner plus pooled
        assert len(probe_report.rows) == groups * 3  # 3 seeds, 1 budget, 1 variant
        combos = probe_report.rows.groupby(["scanner_group", "seed"]).size()
        assert (combos == 1).all()

    def test_pretrained_beats_random_init_at_10pct(self, small_world):
        m = small_world.manifest
        torch.manual_seed(123)
        random_encoder = ConvEncoder(EncoderConfig())
        cfg = ProbeConfig(mode="linear_probe", label_budget=0.1, seeds=(0, 1, 2))
        pre = linear_probe(small_world.encoders["simclr"].encoder, m, cfg)
        rnd = linear_probe(random_encoder, m, cfg)

        def pooled_mean(report):
            agg = report.aggregates
            row = agg[(agg["variant"] == "id") & (agg["scanner_group"] == "all")]
            return float(row["auc_mean"].iloc[0])

        assert pooled_mean(pre) > pooled_mean(rnd)

    def test_identical_config_identical_report(self, small_world):
        cfg = ProbeConfig(mode="linear_probe", label_budget=0.2, seeds=(5,))
        a = linear_probe(small_world.encoders["simclr"].encoder, small_world.manifest, cfg)
        b = linear_probe(small_world.encoders["simclr"].encoder, small_world.manifest, cfg)
        pd.testing.assert_frame_equal(a.rows, b.rows)

    def test_budget_below_class_count_rejected(self, small_world):
        cfg = ProbeConfig(mode="linear_probe", label_budget=3, seeds=(0,))
        with pytest.raises(ValueError, match="class count"):
            linear_probe(small_world.encoders["simclr"].encoder, small_world.manifest, cfg)

    def test_budget_above_train_size_rejected(self, small_world):
        cfg = ProbeConfig(mode="linear_probe", label_budget=10**6, seeds=(0,))
        with pytest.raises(ValueError, match="exceeds"):
            linear_probe(small_world.encoders["simclr"].encoder, small_world.manifest, cfg)

    def test_wrong_mode_rejected(self, small_world):
        cfg = ProbeConfig(mode="finetune", label_budget=0.5, seeds=(0,))
        with pytest.raises(ValueError):
            linear_probe(small_world.encoders["simclr"].encoder, small_world.manifest, cfg)

    def test_aucs_in_unit_interval(self, probe_report):
        values = probe_report.rows["auc"].dropna()
        assert ((values >= 0.0) & (values <= 1.0)).all()


class TestBudgeting:
    def test_fraction_and_count_budgets(self):
        assert _budget_count(0.25, 400, 4) == 100
        assert _budget_count(32, 400, 4) == 32

    def test_stratified_subsample_covers_classes(self, rng):
        labels = np.array([0] * 80 + [1] * 15 + [2] * 5)
        picks = _stratified_subsample(labels, 20, rng)
        assert picks.size == 20
        assert set(np.unique(labels[picks])) == {0, 1, 2}
        # proportional allocation: dominant class gets the bulk
        assert (labels[picks] == 0).sum() >= 14

    def test_subsample_is_seed_dependent(self):
        labels = np.tile(np.arange(4), 50)
        a = _stratified_subsample(labels, 40, np.random.default_rng(1))
        b = _stratified_subsample(labels, 40, np.random.default_rng(2))
        assert not np.array_equal(a, b)


class TestFinetune:
    def test_finetune_not_inferior_to_probe_at_full_budget(self, small_world):
        m = small_world.manifest
        enc = small_world.encoders["simclr"].encoder
        probe_cfg = ProbeConfig(mode="linear_probe", label_budget=1.0, seeds=(0,))
        ft_cfg = ProbeConfig(mode="finetune", label_budget=1.0, seeds=(0,), finetune_epochs=4)
        probe_auc = linear_probe(enc, m, probe_cfg).aggregates
        ft_auc = finetune(enc, m, ft_cfg).aggregates

        def pooled(agg):
            row = agg[(agg["variant"] == "id") & (agg["scanner_group"] == "all")]
            return float(row["auc_mean"].iloc[0])

        assert pooled(ft_auc) >= pooled(probe_auc) - 0.02

    def test_supervised_baseline_below_pretrained_at_low_budget(self, small_world):
        m = small_world.manifest
        budget = 24  # tiny label budget, where pretraining should matter
        ft_cfg = ProbeConfig(mode="finetune", label_budget=budget, seeds=(0, 1, 2), finetune_epochs=4)
        sup_cfg = ProbeConfig(
            mode="supervised_baseline", label_budget=budget, seeds=(0, 1, 2), finetune_epochs=4
        )
        pre = finetune(small_world.encoders["simclr"].encoder, m, ft_cfg).aggregates
        sup = finetune(None, m, sup_cfg, encoder_config=EncoderConfig()).aggregates

        def pooled(agg):
            row = agg[(agg["variant"] == "id") & (agg["scanner_group"] == "all")]
            return float(row["auc_mean"].iloc[0])

        assert pooled(sup) < pooled(pre)

    def test_identical_seed_identical_report(self, small_world):
        cfg = ProbeConfig(mode="finetune", label_budget=32, seeds=(7,), finetune_epochs=2)
        a = finetune(small_world.encoders["simclr"].encoder, small_world.manifest, cfg)
        b = finetune(small_world.encoders["simclr"].encoder, small_world.manifest, cfg)
        pd.testing.assert_frame_equal(a.rows, b.rows)

    def test_finetune_requires_encoder(self, small_world):
        cfg = ProbeConfig(mode="finetune", label_budget=32, seeds=(0,))
        with pytest.raises(ValueError):
            finetune(None, small_world.manifest, cfg)


class TestReportAggregation:
    def test_recomputed_aggregates_match_stored(self, probe_report):
        recomputed = MetricsReport.aggregate_rows(probe_report.rows)
        merged = recomputed.merge(
            probe_report.aggregates,
            on=["encoder", "mode", "variant", "scanner_group", "label_budget"],
            suffixes=("_a", "_b"),
        )
        assert len(merged) == len(recomputed)
        np.testing.assert_allclose(merged["auc_mean_a"], merged["auc_mean_b"], atol=1e-12)
        np.testing.assert_allclose(
            merged["auc_stderr_a"].fillna(-1), merged["auc_stderr_b"].fillna(-1), atol=1e-12
        )

    def test_stderr_absent_with_single_seed(self, small_world):
        cfg = ProbeConfig(mode="linear_probe", label_budget=0.5, seeds=(0,))
        report = linear_probe(small_world.encoders["simclr"].encoder, small_world.manifest, cfg)
        assert report.aggregates["auc_stderr"].isna().all()

    def test_save_load_roundtrip(self, probe_report, tmp_path):
        probe_report.save(tmp_path / "report")
        loaded = MetricsReport.load(tmp_path / "report")
        pd.testing.assert_frame_equal(loaded.rows, probe_report.rows)


class TestSweep:
    def test_table_shape_plots_exist_and_endpoint_matches(self, small_world, tmp_path):
        m = small_world.manifest
        encoders = {
            "simclr": small_world.encoders["simclr"].encoder,
            "cf_simclr": small_world.encoders["cf_simclr"].encoder,
        }
        base = ProbeConfig(mode="linear_probe", label_budget=1.0, seeds=(0, 1))
        budgets = [0.2, 1.0]
        report, plots = label_efficiency_sweep(
            encoders, m, budgets, base, tmp_path, config_hash="cafe012345"
        )
        groups = m.num_scanners + 1
        assert len(report.rows) == len(encoders) * len(budgets) * 2 * groups
        assert plots and all(p.exists() for p in plots)
        assert all("cafe012345" in p.name for p in plots)

        # rightmost sweep point equals a standalone probe at full budget
        cfg = ProbeConfig(mode="linear_probe", label_budget=1.0, seeds=(0, 1), encoder_name="simclr")
        standalone = linear_probe(encoders["simclr"], m, cfg)
        sweep_rows = report.rows[
            (report.rows["encoder"] == "simclr") & (report.rows["label_budget"] == 1.0)
        ].reset_index(drop=True)
        pd.testing.assert_frame_equal(
            sweep_rows.sort_values(["scanner_group", "seed"]).reset_index(drop=True),
            standalone.rows.sort_values(["scanner_group", "seed"]).reset_index(drop=True),
        )
