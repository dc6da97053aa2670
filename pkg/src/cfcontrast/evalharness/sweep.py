"""Label-efficiency sweeps over (encoder, budget, seed) with band plots."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from ..synthdata import DatasetManifest
from ..contrastive.encoder import ConvEncoder
from .probes import MetricsReport, ProbeConfig, linear_probe

_LINE_COLORS = {"simclr": "tab:blue", "simclr_plus": "tab:green", "cf_simclr": "tab:orange"}


def label_efficiency_sweep(
    encoders: dict[str, ConvEncoder],
    manifest: DatasetManifest,
    budgets: list[float | int],
    base_cfg: ProbeConfig,
    out_dir: str | Path,
    config_hash: str = "",
    extra_eval: dict[str, DatasetManifest] | None = None,
) -> tuple[MetricsReport, list[Path]]:
    """Linear-probe every encoder at every budget/seed; write a tidy table
    and per-(variant, scanner group) line plots with +/- 1 stderr bands."""
    if not encoders:
        raise ValueError("at least one encoder is required")
    if len(budgets) < 1:
        raise ValueError("at least one budget is required")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    all_rows = []
    for name, encoder in encoders.items():
        for budget in budgets:
            cfg = replace(base_cfg, mode="linear_probe", label_budget=budget, encoder_name=name)
            report = linear_probe(encoder, manifest, cfg, extra_eval=extra_eval)
            all_rows.append(report.rows)
    rows = pd.concat(all_rows, ignore_index=True)
    report = MetricsReport.from_rows(rows, metadata={"config_hash": config_hash, "budgets": list(budgets)})
    report.rows.to_csv(out_dir / "sweep_rows.csv", index=False)
    report.aggregates.to_csv(out_dir / "sweep_aggregates.csv", index=False)

    plots = _sweep_plots(report.aggregates, out_dir, config_hash)
    return report, plots


def _sweep_plots(agg: pd.DataFrame, out_dir: Path, config_hash: str) -> list[Path]:
    paths = []
    tag = config_hash or "na"
    for (variant, group), sub in agg.groupby(["variant", "scanner_group"], sort=True):
        fig, ax = plt.subplots(figsize=(5.5, 4))
        for encoder, line in sub.groupby("encoder", sort=True):
            line = line.sort_values("label_budget")
            x = line["label_budget"].to_numpy(dtype=np.float64)
            y = line["auc_mean"].to_numpy()
            err = np.nan_to_num(line["auc_stderr"].to_numpy())
            color = _LINE_COLORS.get(encoder)
            ax.plot(x, y, marker="o", label=encoder, color=color)
            ax.fill_between(x, y - err, y + err, alpha=0.2, color=color)
        ax.set_xscale("log")
        ax.set_xlabel("label budget (fraction of train split)")
        ax.set_ylabel("macro one-vs-rest ROC-AUC")
        ax.set_title(f"{variant} / scanner {group}  [config {tag}]", fontsize=10)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"sweep_{variant}_scanner-{group}_{tag}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
