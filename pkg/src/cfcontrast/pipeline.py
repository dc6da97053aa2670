"""Staged pipeline orchestration with content-addressed caching.

Every stage writes its artifacts atomically, records a stamp keyed by
(stage, input hashes, config section hash + master seed) and appends a
ledger entry. Re-running a completed stage with unchanged inputs is a
no-op recorded as a cache hit.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .config import ExperimentConfig
from .contrastive.pretrain import load_encoder_checkpoint, pretrain, save_encoder_checkpoint
from .evalharness.embeddings import domain_separation, extract_embedding_dump, subsample_balanced, tsne_plot
from .evalharness.probes import MetricsReport, ProbeConfig, finetune, linear_probe
from .evalharness.sweep import label_efficiency_sweep
from .scm.inference import ParentVector
from .scm.domain import DomainClassifierConfig, effectiveness, train_domain_classifier
from .scm.store import CounterfactualStore, build_store
from .scm.train import load_scm_checkpoint, model_hash, save_scm_checkpoint, train_scm
from .seeding import derive_int_seed
from .synthdata import DatasetManifest, generate_dataset

STAGE_ORDER = (
    "generate-data",
    "train-scm",
    "build-cf-store",
    "pretrain",
    "probe",
    "finetune",
    "sweep",
    "report",
)

_STAGE_SECTIONS = {
    "generate-data": ("data",),
    "train-scm": ("data", "scm"),
    "build-cf-store": ("data", "scm"),
    "pretrain": ("data", "scm", "augment", "pretrain"),
    "probe": ("pretrain", "eval"),
    "finetune": ("pretrain", "eval"),
    "sweep": ("pretrain", "eval"),
    "report": ("pretrain", "eval"),
}

_STRATEGY_ALIASES = {
    "simclr": "simclr",
    "simclr-plus": "simclr_plus",
    "simclr_plus": "simclr_plus",
    "cf-simclr": "cf_simclr",
    "cf_simclr": "cf_simclr",
}


class PipelineError(RuntimeError):
    """Missing upstream artifacts, stale hashes or invalid stage requests."""


@dataclass
class StageResult:
    stage: str
    outputs: dict[str, str]
    cache_hit: bool
    duration_s: float


class RunLedger:
    """Append-only record of executed stages (one JSON object per line)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, entry: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


def file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def artifact_digest(path: str | Path) -> str:
    """Digest of a file, or of a directory's (relpath, file digest) listing."""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    digest = hashlib.sha256()
    for sub in sorted(p for p in path.rglob("*") if p.is_file()):
        digest.update(str(sub.relative_to(path)).encode())
        digest.update(file_digest(sub).encode())
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Artifact paths
# ---------------------------------------------------------------------------


def stage_paths(out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    return {
        "dataset": out / "dataset",
        "ood_dataset": out / "ood_dataset",
        "scm": out / "scm.pt",
        "cfstore": out / "cfstore",
        "encoders": out / "encoders",
        "probe": out / "probe",
        "finetune": out / "finetune",
        "sweep": out / "sweep",
        "report": out / "report",
        "ledger": out / "ledger.jsonl",
        "stamps": out / "stamps",
    }


def encoder_path(out_dir: str | Path, strategy: str) -> Path:
    return stage_paths(out_dir)["encoders"] / f"{strategy}.pt"


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise PipelineError(
            f"missing upstream artifact {path}; run stage '{produced_by}' first"
        )
    return path


# ---------------------------------------------------------------------------
# Stage bodies (return {artifact name: path})
# ---------------------------------------------------------------------------


def _stage_generate_data(config: ExperimentConfig, out: dict[str, Path]) -> dict[str, Path]:
    manifest = generate_dataset(config.data_config())
    manifest.config_hash = config.config_hash()
    manifest.save(out["dataset"])
    outputs = {"dataset": out["dataset"]}
    ood_cfg = config.ood_data_config()
    if ood_cfg is not None:
        ood = generate_dataset(ood_cfg)
        ood.config_hash = config.config_hash()
        ood.save(out["ood_dataset"])
        outputs["ood_dataset"] = out["ood_dataset"]
    return outputs


def _stage_train_scm(config: ExperimentConfig, out: dict[str, Path]) -> dict[str, Path]:
    manifest = DatasetManifest.load(_require(out["dataset"], "generate-data"))
    model = train_scm(manifest, config.scm_config())
    model.config_hash = config.config_hash()
    save_scm_checkpoint(model, out["scm"])
    return {"scm": out["scm"]}


def _stage_build_cf_store(config: ExperimentConfig, out: dict[str, Path]) -> dict[str, Path]:
    manifest = DatasetManifest.load(_require(out["dataset"], "generate-data"))
    model = load_scm_checkpoint(_require(out["scm"], "train-scm"))
    build_store(model, manifest, out["cfstore"], batch_size=config.scm.store_batch_size)
    return {"cfstore": out["cfstore"]}


def _stage_pretrain(
    config: ExperimentConfig, out: dict[str, Path], strategy: str
) -> dict[str, Path]:
    manifest = DatasetManifest.load(_require(out["dataset"], "generate-data"))
    store = None
    if strategy in ("simclr_plus", "cf_simclr"):
        _require(out["cfstore"] / "store.json", "build-cf-store")
        store = CounterfactualStore(out["cfstore"])
    result = pretrain(manifest, store, config.augmentation_policy(), config.pretrain_config(strategy))
    result.config_hash = config.config_hash()
    path = encoder_path(out["dataset"].parent, strategy)
    save_encoder_checkpoint(result, path)
    return {f"encoder_{strategy}": path}


def _load_ood_eval(config: ExperimentConfig, out: dict[str, Path]) -> dict[str, DatasetManifest] | None:
    if not config.eval.ood_scanners:
        return None
    return {"ood": DatasetManifest.load(_require(out["ood_dataset"], "generate-data"))}


def _probe_config(config: ExperimentConfig, mode: str, budget, encoder_name: str) -> ProbeConfig:
    ev = config.eval
    return ProbeConfig(
        mode=mode,
        label_budget=budget,
        seeds=tuple(config.probe_seed(s) for s in ev.seeds),
        probe_lr=ev.probe_lr,
        probe_max_epochs=ev.probe_max_epochs,
        probe_tol=ev.probe_tol,
        finetune_epochs=ev.finetune_epochs,
        finetune_lr=ev.finetune_lr,
        finetune_batch_size=ev.finetune_batch_size,
        encoder_name=encoder_name,
    )


def _rewrite_seeds(rows: pd.DataFrame, config: ExperimentConfig) -> pd.DataFrame:
    """Replace derived probe seeds by the user-facing seed indices."""
    mapping = {config.probe_seed(s): s for s in config.eval.seeds}
    rows = rows.copy()
    rows["seed"] = rows["seed"].map(mapping)
    return rows


def _stage_probe(config: ExperimentConfig, out: dict[str, Path]) -> dict[str, Path]:
    manifest = DatasetManifest.load(_require(out["dataset"], "generate-data"))
    extra = _load_ood_eval(config, out)
    all_rows = []
    for strategy in config.pretrain.strategies:
        payload = load_encoder_checkpoint(_require(encoder_path(out["dataset"].parent, strategy), "pretrain"))
        for budget in config.eval.budgets:
            cfg = _probe_config(config, "linear_probe", budget, strategy)
            report = linear_probe(payload["encoder"], manifest, cfg, extra_eval=extra)
            all_rows.append(report.rows)
    rows = _rewrite_seeds(pd.concat(all_rows, ignore_index=True), config)
    report = MetricsReport.from_rows(rows, metadata={"config_hash": config.config_hash(), "kind": "probe"})
    report.save(out["probe"])
    return {"probe": out["probe"]}


def _stage_finetune(config: ExperimentConfig, out: dict[str, Path]) -> dict[str, Path]:
    manifest = DatasetManifest.load(_require(out["dataset"], "generate-data"))
    extra = _load_ood_eval(config, out)
    all_rows = []
    for strategy in config.pretrain.strategies:
        payload = load_encoder_checkpoint(_require(encoder_path(out["dataset"].parent, strategy), "pretrain"))
        for budget in config.eval.budgets:
            cfg = _probe_config(config, "finetune", budget, strategy)
            report = finetune(payload["encoder"], manifest, cfg, extra_eval=extra)
            all_rows.append(report.rows)
    for budget in config.eval.budgets:
        cfg = _probe_config(config, "supervised_baseline", budget, "supervised_baseline")
        report = finetune(None, manifest, cfg, extra_eval=extra, encoder_config=config.encoder_config())
        all_rows.append(report.rows)
    rows = _rewrite_seeds(pd.concat(all_rows, ignore_index=True), config)
    report = MetricsReport.from_rows(rows, metadata={"config_hash": config.config_hash(), "kind": "finetune"})
    report.save(out["finetune"])
    return {"finetune": out["finetune"]}


def _stage_sweep(config: ExperimentConfig, out: dict[str, Path]) -> dict[str, Path]:
    manifest = DatasetManifest.load(_require(out["dataset"], "generate-data"))
    extra = _load_ood_eval(config, out)
    encoders = {}
    for strategy in config.pretrain.strategies:
        payload = load_encoder_checkpoint(_require(encoder_path(out["dataset"].parent, strategy), "pretrain"))
        encoders[strategy] = payload["encoder"]
    base = _probe_config(config, "linear_probe", config.eval.sweep_budgets[0], "sweep")
    report, _plots = label_efficiency_sweep(
        encoders,
        manifest,
        list(config.eval.sweep_budgets),
        base,
        out["sweep"],
        config_hash=config.config_hash(),
        extra_eval=extra,
    )
    rows = _rewrite_seeds(report.rows, config)
    rows.to_csv(out["sweep"] / "sweep_rows.csv", index=False)
    MetricsReport.aggregate_rows(rows).to_csv(out["sweep"] / "sweep_aggregates.csv", index=False)
    return {"sweep": out["sweep"]}


def _minority_scanners(config: ExperimentConfig) -> list[int]:
    specs = config.scanner_specs()
    dominant = max(s.prevalence for s in specs)
    return [s.scanner_id for s in specs if s.prevalence < dominant]


def _stage_report(config: ExperimentConfig, out: dict[str, Path]) -> dict[str, Path]:
    compare_strategies(config, out["dataset"].parent)
    return {"report": out["report"]}


def compare_strategies(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Side-by-side comparison of the three strategies.

    Emits AUC deltas per (variant, scanner group, budget), domain-separation
    scores, counterfactual effectiveness, and directional flags; refuses
    artifacts whose config hashes do not match.
    """
    out = stage_paths(out_dir)
    strategies = tuple(config.pretrain.strategies)
    if set(strategies) != {"simclr", "simclr_plus", "cf_simclr"}:
        raise PipelineError(
            f"strategy comparison needs exactly simclr, simclr_plus and cf_simclr; configured {strategies}"
        )
    expected_hash = config.config_hash()

    manifest = DatasetManifest.load(_require(out["dataset"], "generate-data"))
    if manifest.config_hash != expected_hash:
        raise PipelineError(
            f"dataset config hash {manifest.config_hash} does not match config {expected_hash}"
        )

    encoders = {}
    for strategy in strategies:
        payload = load_encoder_checkpoint(_require(encoder_path(out_dir, strategy), "pretrain"))
        if payload.get("config_hash") != expected_hash:
            raise PipelineError(
                f"encoder checkpoint for {strategy} has config hash {payload.get('config_hash')}, "
                f"expected {expected_hash}"
            )
        encoders[strategy] = payload["encoder"]

    probe_report = MetricsReport.load(_require(out["probe"], "probe"))
    if probe_report.metadata.get("config_hash") != expected_hash:
        raise PipelineError("probe results were produced by a different config")

    # AUC deltas on seed means
    agg = probe_report.aggregates
    pivot = agg.pivot_table(
        index=["variant", "scanner_group", "label_budget"],
        columns="encoder",
        values="auc_mean",
    )
    deltas = pd.DataFrame(
        {
            "cf_minus_simclr": pivot["cf_simclr"] - pivot["simclr"],
            "cf_minus_simclr_plus": pivot["cf_simclr"] - pivot["simclr_plus"],
        }
    ).reset_index()

    # Domain separation on a balanced test subsample
    sep_seed = derive_int_seed(config.master_seed, "report-separation")
    separation = {}
    for strategy, encoder in encoders.items():
        dump = extract_embedding_dump(encoder, manifest, split="test")
        balanced = subsample_balanced(dump, config.eval.separation_per_scanner, sep_seed)
        separation[strategy] = domain_separation(balanced, k=config.eval.knn_k)
        if config.eval.make_tsne:
            tsne_plot(
                balanced,
                seed=sep_seed,
                out_path=out["report"] / f"tsne_{strategy}_{expected_hash}.png",
                config_hash=expected_hash,
            )

    # Counterfactual effectiveness on held-out validation images
    model = load_scm_checkpoint(_require(out["scm"], "train-scm"))
    if model.config_hash != expected_hash:
        raise PipelineError("generative model checkpoint was produced by a different config")
    clf = train_domain_classifier(
        manifest,
        DomainClassifierConfig(
            epochs=config.eval.domain_clf_epochs,
            seed=derive_int_seed(config.master_seed, "report-domain-clf"),
        ),
    )
    val_idx = manifest.indices_for_split("val")
    val_idx = val_idx[~manifest.is_counterfactual[val_idx]][: config.eval.effectiveness_samples]
    eff = effectiveness(
        model,
        manifest.images[val_idx],
        ParentVector(manifest.scanner_ids[val_idx]),
        clf,
        seed=derive_int_seed(config.master_seed, "report-effectiveness"),
    )

    # Directional claims on the under-represented scanners at the lowest budget
    minority = [str(s) for s in _minority_scanners(config)]
    low_budget = min(config.eval.budgets)
    id_rows = pivot.reset_index()
    sel = (
        (id_rows["variant"] == "id")
        & (id_rows["scanner_group"].isin(minority))
        & (id_rows["label_budget"] == low_budget)
    )
    minority_means = id_rows[sel][["simclr", "simclr_plus", "cf_simclr"]].mean()
    flags = {
        "cf_ge_simclr_minority": bool(minority_means["cf_simclr"] >= minority_means["simclr"]),
        "cf_ge_simclr_plus_minority": bool(minority_means["cf_simclr"] >= minority_means["simclr_plus"]),
        "cf_minus_simclr_minority": float(minority_means["cf_simclr"] - minority_means["simclr"]),
        "domain_separation_gap": float(separation["simclr"] - separation["cf_simclr"]),
        "cf_less_domain_separated": bool(separation["cf_simclr"] < separation["simclr"]),
    }

    out["report"].mkdir(parents=True, exist_ok=True)
    comparison = {
        "strategies": list(strategies),
        "config_hash": expected_hash,
        "scm_checkpoint_hash": model_hash(model),
        "domain_classifier_accuracy": clf.val_accuracy,
        "effectiveness": eff,
        "domain_separation": separation,
        "minority_scanners": minority,
        "low_budget": low_budget,
        "minority_auc_means": {k: float(v) for k, v in minority_means.items()},
        "flags": flags,
    }
    (out["report"] / "comparison.json").write_text(json.dumps(comparison, indent=2, sort_keys=True))
    deltas.to_csv(out["report"] / "auc_deltas.csv", index=False)
    _write_markdown_report(comparison, deltas, out["report"] / "comparison.md")
    return comparison


def _write_markdown_report(comparison: dict, deltas: pd.DataFrame, path: Path) -> None:
    lines = [
        "# Strategy comparison",
        "",
        f"Config hash: `{comparison['config_hash']}`",
        "",
        f"- Counterfactual effectiveness: **{comparison['effectiveness']:.3f}** "
        f"(domain classifier accuracy {comparison['domain_classifier_accuracy']:.4f})",
        "- Domain separation (kNN scanner accuracy, balanced test subsample):",
    ]
    for strategy, value in comparison["domain_separation"].items():
        lines.append(f"  - {strategy}: {value:.3f}")
    lines += [
        f"- Under-represented scanners {comparison['minority_scanners']} at budget "
        f"{comparison['low_budget']}: mean macro AUC "
        + ", ".join(f"{k}={v:.4f}" for k, v in comparison["minority_auc_means"].items()),
        "",
        "## Directional claims",
        "",
    ]
    for key, value in comparison["flags"].items():
        lines.append(f"- {key}: {value}")
    lines += ["", "## AUC deltas (seed means)", ""]
    header = list(deltas.columns)
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join("---" for _ in header) + "|")
    for record in deltas.itertuples(index=False):
        cells = [f"{v:.6f}" if isinstance(v, float) else str(v) for v in record]
        lines.append("| " + " | ".join(cells) + " |")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Stage runner with caching
# ---------------------------------------------------------------------------

_STAGE_BODIES = {
    "generate-data": _stage_generate_data,
    "train-scm": _stage_train_scm,
    "build-cf-store": _stage_build_cf_store,
    "probe": _stage_probe,
    "finetune": _stage_finetune,
    "sweep": _stage_sweep,
    "report": _stage_report,
}

_STAGE_INPUTS = {
    "generate-data": (),
    "train-scm": ("dataset",),
    "build-cf-store": ("dataset", "scm"),
    "pretrain": ("dataset", "cfstore"),
    "probe": ("dataset", "encoders"),
    "finetune": ("dataset", "encoders"),
    "sweep": ("dataset", "encoders"),
    "report": ("dataset", "scm", "encoders", "probe"),
}


def normalize_strategy(strategy: str) -> str:
    if strategy not in _STRATEGY_ALIASES:
        raise PipelineError(f"unknown strategy {strategy!r}; expected one of {sorted(set(_STRATEGY_ALIASES))}")
    return _STRATEGY_ALIASES[strategy]


def _stage_key(stage: str, strategy: str | None) -> str:
    return f"{stage}:{strategy}" if strategy else stage


def _input_hashes(stage: str, out: dict[str, Path], config: ExperimentConfig, strategy: str | None) -> dict[str, str]:
    hashes = {}
    for name in _STAGE_INPUTS[stage]:
        path = out[name]
        if name == "cfstore" and strategy == "simclr":
            continue  # plain simclr does not read the store
        if not path.exists():
            producer = {
                "dataset": "generate-data",
                "scm": "train-scm",
                "cfstore": "build-cf-store",
                "encoders": "pretrain",
                "probe": "probe",
            }[name]
            raise PipelineError(f"missing upstream artifact {path}; run stage '{producer}' first")
        hashes[name] = artifact_digest(path)
    return hashes


def run_stage(
    config: ExperimentConfig,
    stage: str,
    out_dir: str | Path,
    strategy: str | None = None,
    force: bool = False,
) -> StageResult:
    """Execute one stage (with caching) and append a ledger entry."""
    if stage not in STAGE_ORDER:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {STAGE_ORDER}")
    out_dir = Path(out_dir)
    out = stage_paths(out_dir)
    ledger = RunLedger(out["ledger"])

    if stage == "pretrain":
        if strategy is None:
            raise PipelineError("pretrain requires a strategy (e.g. --strategy cf-simclr)")
        strategy = normalize_strategy(strategy)
        if strategy not in config.pretrain.strategies:
            raise PipelineError(f"strategy {strategy} is not listed in config.pretrain.strategies")
    elif strategy is not None:
        raise PipelineError(f"stage {stage} does not take a strategy")

    key = _stage_key(stage, strategy)
    section_hash = "|".join(config.section_hash(s) for s in _STAGE_SECTIONS[stage])
    inputs = _input_hashes(stage, out, config, strategy)

    stamp_path = out["stamps"] / f"{key}.json"
    if stamp_path.exists() and not force:
        stamp = json.loads(stamp_path.read_text())
        outputs_exist = all(Path(p).exists() for p in stamp.get("outputs", {}).values())
        if (
            stamp.get("section_hash") == section_hash
            and stamp.get("input_hashes") == inputs
            and outputs_exist
        ):
            ledger.append(
                {
                    "stage": key,
                    "cache_hit": True,
                    "duration_s": 0.0,
                    "input_hashes": inputs,
                    "outputs": stamp["outputs"],
                    "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                }
            )
            return StageResult(stage=key, outputs=stamp["outputs"], cache_hit=True, duration_s=0.0)

    started = time.perf_counter()
    if stage == "pretrain":
        produced = _stage_pretrain(config, out, strategy)
    else:
        produced = _STAGE_BODIES[stage](config, out)
    duration = time.perf_counter() - started

    outputs = {name: str(path) for name, path in produced.items()}
    output_hashes = {name: artifact_digest(path) for name, path in produced.items()}
    out["stamps"].mkdir(parents=True, exist_ok=True)
    stamp_path.write_text(
        json.dumps(
            {
                "stage": key,
                "section_hash": section_hash,
                "input_hashes": inputs,
                "outputs": outputs,
                "output_hashes": output_hashes,
            },
            indent=2,
            sort_keys=True,
        )
    )
    ledger.append(
        {
            "stage": key,
            "cache_hit": False,
            "duration_s": round(duration, 3),
            "input_hashes": inputs,
            "outputs": outputs,
            "output_hashes": output_hashes,
            "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
    )
    return StageResult(stage=key, outputs=outputs, cache_hit=False, duration_s=duration)


def run_all(config: ExperimentConfig, out_dir: str | Path, force: bool = False) -> list[StageResult]:
    """Run the full pipeline in order; pretrain fans out over strategies."""
    results = []
    for stage in STAGE_ORDER:
        if stage == "pretrain":
            for strategy in config.pretrain.strategies:
                results.append(run_stage(config, stage, out_dir, strategy=strategy, force=force))
        else:
            results.append(run_stage(config, stage, out_dir, force=force))
    return results
