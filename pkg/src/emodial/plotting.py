"""Report figures written next to the TSV/JSON outputs."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.", suffix=path.suffix)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=150, bbox_inches="tight", metadata={"Software": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def plot_agreement(matrix: np.ndarray, names: Sequence[str], path) -> Path:
    """Heatmap of pairwise Pearson agreement between models."""
    k = len(names)
    with plt.rc_context(STYLE):
        size = max(3.0, 0.6 * k + 1.5)
        fig, ax = plt.subplots(figsize=(size, size * 0.85))
        im = ax.imshow(matrix, vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_xticks(range(k), names, rotation=45, ha="right")
        ax.set_yticks(range(k), names)
        for i in range(k):
            for j in range(k):
                v = matrix[i, j]
                ax.text(j, i, "nan" if np.isnan(v) else f"{v:.2f}", ha="center", va="center",
                        fontsize=7, color="white" if abs(v) > 0.6 else "black")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="Pearson r")
        ax.set_title("Prediction agreement")
        return _save(fig, path)


def plot_training(report, path) -> Path:
    epochs = np.arange(1, len(report.train_loss) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(epochs, report.train_loss, color="tab:blue", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        ax2 = ax.twinx()
        ax2.plot(epochs, report.val_f1, color="tab:orange", label="val micro-F1")
        ax2.axvline(report.best_epoch, color="grey", ls=":", lw=1)
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("micro-F1")
        lines = ax.get_lines() + ax2.get_lines()[:1]
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
        return _save(fig, path)


def plot_search(history, path) -> Path:
    """Observed objective per evaluation with the best-so-far envelope."""
    ys = [t.y for t in history]
    best = [t.f_best for t in history]
    n = np.arange(1, len(ys) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        failed = [t.failed for t in history]
        ax.scatter(n, ys, s=10, c=["tab:red" if f else "tab:blue" for f in failed], label="trial")
        ax.step(n, best, where="post", color="black", lw=1.2, label="best so far")
        ax.set_xlabel("evaluation")
        ax.set_ylabel("validation micro-F1")
        ax.legend(loc="lower right")
        return _save(fig, path)
