"""Report figures written straight to image files (no display needed)."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed metadata keeps PNG bytes stable across runs.
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_training_curve(log: Mapping, path) -> None:
    """Mean batch loss per epoch with validation R@1 on a twin axis."""
    epochs = [e["epoch"] for e in log["epochs"]]
    losses = [e["mean_loss"] for e in log["epochs"]]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, losses, color="tab:blue", lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss", color="tab:blue")
    evals = log.get("evaluations", [])
    if evals:
        ax2 = ax.twinx()
        ax2.plot([e["epoch"] for e in evals], [e["recall"]["1"] for e in evals],
                 "o-", color="tab:red", ms=4, lw=1)
        ax2.set_ylabel("validation R@1", color="tab:red")
        ax2.set_ylim(0, 1.02)
        best = log.get("best_epoch")
        if best:
            ax.axvline(best, color="0.6", ls=":", lw=1)
    _save(fig, path)


def plot_pr_curves(curves: Mapping, path, title: str = "", max_classes: int = 12) -> None:
    """Precision/recall curves, one line per class (first ``max_classes`` only)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for c in list(curves)[:max_classes]:
        rec, prec = curves[c]
        ax.step(rec, prec, where="post", lw=1, label=str(c))
    ax.set_xlim(0, 1.0)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if title:
        ax.set_title(title)
    if curves:
        ax.legend(fontsize=6, ncol=2, loc="lower left")
    _save(fig, path)


def plot_ablation(names: Sequence[str], medians: Sequence[float], per_seed: Sequence[Sequence[float]], path) -> None:
    """Median validation R@1 per configuration, individual seeds as dots."""
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(names) + 2), 3.5))
    xs = range(len(names))
    ax.bar(xs, medians, color="tab:gray", width=0.6)
    for x, vals in zip(xs, per_seed):
        ax.plot([x] * len(vals), vals, "k.", ms=4)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=45 if len(names) > 6 else 0, ha="right" if len(names) > 6 else "center", fontsize=7)
    ax.set_ylabel("validation R@1")
    ax.set_ylim(0, 1.02)
    _save(fig, path)
