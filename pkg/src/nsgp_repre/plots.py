"""Static figures for run directories. Everything renders with the Agg
backend straight to files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

from .harness import MetricsRecord  # noqa: E402

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps re-rendered PNGs byte-identical
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def accuracy_heatmap(record: MetricsRecord, path) -> Path:
    acc = np.ma.masked_invalid(record.accuracy)
    fig, ax = plt.subplots(figsize=(4.5, 3.8))
    im = ax.imshow(acc, vmin=0.0, vmax=1.0, cmap="viridis")
    for (t, i), v in np.ndenumerate(record.accuracy):
        if not np.isnan(v):
            ax.text(i, t, f"{v:.2f}", ha="center", va="center", color="w" if v < 0.6 else "k", fontsize=8)
    ax.set_xlabel("evaluated stage")
    ax.set_ylabel("model after stage")
    ax.set_xticks(range(acc.shape[1]))
    ax.set_yticks(range(acc.shape[0]))
    ax.set_title(f"{record.method}, seed {record.seed}")
    fig.colorbar(im, ax=ax, label="accuracy")
    fig.tight_layout()
    return _save(fig, path)


def anatomy_curves(rows: Sequence[dict], path) -> Path:
    """Per old stage: plain vs fresh accuracy (left) and designated vs fresh
    regression MSE (right), as later models take over."""
    stages = sorted({r["eval_stage"] for r in rows})
    fig, (ax_acc, ax_mse) = plt.subplots(1, 2, figsize=(9, 3.6))
    for i in stages:
        sub = sorted((r for r in rows if r["eval_stage"] == i), key=lambda r: r["model_stage"])
        if len(sub) < 2:
            continue
        t = [r["model_stage"] for r in sub]
        line, = ax_acc.plot(t, [r["plain_accuracy"] for r in sub], marker="o", label=f"stage {i} plain")
        ax_acc.plot(t, [r["designated_accuracy"] for r in sub], ls="--", color=line.get_color(),
                    label=f"stage {i} designated")
        ax_mse.plot(t, [r["plain_mse"] for r in sub], marker="o", color=line.get_color(), label=f"stage {i} model t")
        ax_mse.axhline(sub[0]["fresh_mse"], ls="--", color=line.get_color(), lw=0.8)
    ax_acc.set_xlabel("model after stage")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_acc.legend(fontsize=7)
    ax_mse.set_xlabel("model after stage")
    ax_mse.set_ylabel("regression MSE (dashed: fresh model)")
    ax_mse.legend(fontsize=7)
    for ax in (ax_acc, ax_mse):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    fig.tight_layout()
    return _save(fig, path)


def spectra_plot(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for layer in sorted({r["layer"] for r in rows}):
        lam = np.array([r["lambda"] for r in rows if r["layer"] == layer])
        lam = np.where(lam > 0, lam, np.nan)
        ax.semilogy(np.arange(lam.size), lam, label=f"layer {int(layer)}")
    ax.set_xlabel("index")
    ax.set_ylabel("singular value")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(table: Sequence[dict], path) -> Path:
    names = [r["method"] for r in table]
    vals = [r["median_avg_old_accuracy"] for r in table]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.bar(range(len(names)), vals, color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("median avg. old-stage accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)
