"""Staged pipeline: caching, actionable errors, comparison report, CLI."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from cfcontrast.config import ExperimentConfig
from cfcontrast.pipeline import (
    PipelineError,
    RunLedger,
    compare_strategies,
    run_all,
    run_stage,
    stage_paths,
)


def tiny_experiment_config(master_seed: int = 424) -> ExperimentConfig:
    """Full-pipeline config small enough for test runs (~1 min end to end)."""
    return ExperimentConfig.from_dict(
        {
            "master_seed": master_seed,
            "data": {
                "num_records": 600,
                "image_shape": [32, 32],
                "scanners": [
                    {**s, "prevalence": p}
                    for s, p in zip(
                        ExperimentConfig().to_dict()["data"]["scanners"], (0.8, 0.1, 0.1)
                    )
                ],
            },
            "scm": {
                "base_channels": 12,
                "z_channels": [6, 3],
                "emb_dim": 8,
                "epochs": 3,
                "batch_size": 64,
            },
            "pretrain": {
                "batch_size": 64,
                "epochs": 2,
                "encoder_channels": [8, 16, 32, 64],
                "repr_dim": 64,
                "proj_dim": 32,
            },
            "eval": {
                "budgets": [0.3],
                "seeds": [0, 1],
                "sweep_budgets": [0.3],
                "knn_k": 3,
                "separation_per_scanner": 8,
                "effectiveness_samples": 40,
                "domain_clf_epochs": 14,
                "finetune_epochs": 2,
            },
        }
    )


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    config = tiny_experiment_config()
    out_dir = tmp_path_factory.mktemp("tiny_run")
    results = run_all(config, out_dir)
    return config, Path(out_dir), results


class TestRunAll:
    def test_all_declared_artifacts_exist(self, tiny_run):
        _, out_dir, results = tiny_run
        paths = stage_paths(out_dir)
        assert (paths["dataset"] / "manifest.json").exists()
        assert paths["scm"].exists()
        assert (paths["cfstore"] / "store.json").exists()
        for strategy in ("simclr", "simclr_plus", "cf_simclr"):
            assert (paths["encoders"] / f"{strategy}.pt").exists()
        assert (paths["probe"] / "rows.csv").exists()
        assert (paths["finetune"] / "rows.csv").exists()
        assert (paths["sweep"] / "sweep_rows.csv").exists()
        assert (paths["report"] / "comparison.json").exists()
        assert paths["ledger"].exists()
        assert not any(r.cache_hit for r in results)

    def test_rerun_is_all_cache_hits(self, tiny_run):
        config, out_dir, _ = tiny_run
        ledger_before = len(RunLedger(stage_paths(out_dir)["ledger"]).entries())
        results = run_all(config, out_dir)
        assert all(r.cache_hit for r in results)
        entries = RunLedger(stage_paths(out_dir)["ledger"]).entries()
        assert len(entries) == ledger_before + len(results)
        assert all(e["cache_hit"] for e in entries[ledger_before:])

    def test_changed_section_invalidates_stage(self, tiny_run, tmp_path):
        config, out_dir, _ = tiny_run
        payload = config.to_dict()
        payload["eval"]["budgets"] = [0.5]
        changed = ExperimentConfig.from_dict(payload)
        result = run_stage(changed, "probe", out_dir)
        assert not result.cache_hit
        # restore the original probe artifacts for the other tests
        run_stage(config, "probe", out_dir)

    def test_report_lists_exactly_three_strategies(self, tiny_run):
        _, out_dir, _ = tiny_run
        comparison = json.loads(
            (stage_paths(out_dir)["report"] / "comparison.json").read_text()
        )
        assert sorted(comparison["strategies"]) == ["cf_simclr", "simclr", "simclr_plus"]
        assert 0.0 <= comparison["effectiveness"] <= 1.0
        assert set(comparison["domain_separation"]) == {"simclr", "simclr_plus", "cf_simclr"}

    def test_deltas_recomputed_from_raw_rows_match(self, tiny_run):
        _, out_dir, _ = tiny_run
        paths = stage_paths(out_dir)
        rows = pd.read_csv(paths["probe"] / "rows.csv")
        deltas = pd.read_csv(paths["report"] / "auc_deltas.csv")
        seed_means = (
            rows.groupby(["variant", "scanner_group", "label_budget", "encoder"])["auc"]
            .mean()
            .unstack("encoder")
        )
        recomputed = (seed_means["cf_simclr"] - seed_means["simclr"]).reset_index(drop=True)
        np.testing.assert_allclose(
            deltas["cf_minus_simclr"].to_numpy(), recomputed.to_numpy(), atol=1e-12
        )

    def test_artifacts_embed_config_hash(self, tiny_run):
        config, out_dir, _ = tiny_run
        paths = stage_paths(out_dir)
        manifest_meta = json.loads((paths["dataset"] / "manifest.json").read_text())
        assert manifest_meta["config_hash"] == config.config_hash()
        store_meta = json.loads((paths["cfstore"] / "store.json").read_text())
        assert store_meta["config_hash"] == config.config_hash()
        probe_meta = json.loads((paths["probe"] / "metadata.json").read_text())
        assert probe_meta["config_hash"] == config.config_hash()


class TestStageErrors:
    def test_pretrain_without_store_is_actionable(self, tmp_path):
        config = tiny_experiment_config()
        run_stage(config, "generate-data", tmp_path)
        with pytest.raises(PipelineError, match="build-cf-store"):
            run_stage(config, "pretrain", tmp_path, strategy="cf-simclr")

    def test_probe_without_encoders_is_actionable(self, tmp_path):
        config = tiny_experiment_config()
        run_stage(config, "generate-data", tmp_path)
        with pytest.raises(PipelineError, match="pretrain"):
            run_stage(config, "probe", tmp_path)

    def test_unknown_stage_rejected(self, tmp_path):
        with pytest.raises(PipelineError, match="unknown stage"):
            run_stage(tiny_experiment_config(), "deploy", tmp_path)

    def test_pretrain_requires_strategy(self, tmp_path):
        config = tiny_experiment_config()
        run_stage(config, "generate-data", tmp_path)
        with pytest.raises(PipelineError, match="strategy"):
            run_stage(config, "pretrain", tmp_path)

    def test_strategy_alias_normalization(self, tiny_run):
        config, out_dir, _ = tiny_run
        result = run_stage(config, "pretrain", out_dir, strategy="cf-simclr")
        assert result.cache_hit  # normalized to the already-built cf_simclr

    def test_mixed_provenance_comparison_refused(self, tiny_run):
        config, out_dir, _ = tiny_run
        import dataclasses

        other = dataclasses.replace(config, master_seed=config.master_seed + 1)
        with pytest.raises(PipelineError, match="config"):
            compare_strategies(other, out_dir)


class TestCli:
    def _run(self, *args):
        return subprocess.run(
            [sys.executable, "-m", "cfcontrast.cli", *args],
            capture_output=True,
            text=True,
        )

    def test_show_config(self, tmp_path):
        config = tiny_experiment_config()
        path = config.save(tmp_path / "exp.json")
        proc = self._run("show-config", "--config", str(path))
        assert proc.returncode == 0
        assert json.loads(proc.stdout)["master_seed"] == config.master_seed

    def test_stage_subcommand_and_caching(self, tmp_path):
        config = tiny_experiment_config()
        path = config.save(tmp_path / "exp.json")
        out = tmp_path / "work"
        proc = self._run("generate-data", "--config", str(path), "--output-dir", str(out))
        assert proc.returncode == 0, proc.stderr
        assert (out / "dataset" / "manifest.json").exists()
        again = self._run("generate-data", "--config", str(path), "--output-dir", str(out))
        assert "cached" in again.stdout

    def test_error_line_is_machine_readable(self, tmp_path):
        config = tiny_experiment_config()
        path = config.save(tmp_path / "exp.json")
        proc = self._run(
            "pretrain", "--config", str(path), "--output-dir", str(tmp_path / "empty"),
            "--strategy", "cf-simclr",
        )
        assert proc.returncode != 0
        err = json.loads(proc.stderr.strip().splitlines()[-1])
        assert err["error"] == "PipelineError"
        assert "generate-data" in err["message"]

    def test_seed_override_changes_hash(self, tmp_path):
        config = tiny_experiment_config()
        path = config.save(tmp_path / "exp.json")
        a = self._run("show-config", "--config", str(path))
        b = self._run("show-config", "--config", str(path), "--seed-override", "9")
        assert json.loads(a.stdout)["master_seed"] != json.loads(b.stdout)["master_seed"]

    def test_cache_root_env_used(self, tmp_path, monkeypatch):
        from cfcontrast.cli import resolve_output_dir

        config = tiny_experiment_config()
        monkeypatch.setenv("CFCONTRAST_CACHE_ROOT", str(tmp_path / "cache"))
        resolved = resolve_output_dir(config, None)
        assert str(resolved).startswith(str(tmp_path / "cache"))
        assert resolved.name == config.config_hash()
