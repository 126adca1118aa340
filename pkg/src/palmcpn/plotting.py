"""Figure rendering for reports. Every function writes one image file and returns its path."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_roc(curves: Dict[str, np.ndarray], path, log_far: bool = True) -> Path:
    """``curves`` maps a label to (FAR, GAR) rows."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, roc in curves.items():
        far, gar = roc[:, 0], roc[:, 1]
        if log_far:
            keep = far > 0
            far, gar = far[keep], gar[keep]
        ax.plot(far, gar, label=label, drawstyle="steps-post")
    if log_far:
        ax.set_xscale("log")
    ax.set_xlabel("FAR")
    ax.set_ylabel("GAR")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_density(grid: np.ndarray, genuine: np.ndarray, impostor: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(grid, genuine, label="genuine")
    ax.plot(grid, impostor, label="impostor")
    ax.fill_between(grid, genuine, alpha=0.2)
    ax.fill_between(grid, impostor, alpha=0.2)
    ax.set_xlabel("distance")
    ax.set_ylabel("normalized density")
    if title:
        ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_bias_sweep(rows: Sequence, path) -> Path:
    """EER (percent) against mean translation, one line per matcher."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in dict.fromkeys(r.matcher for r in rows):
        pts = sorted((r.mean_translation, r.eer) for r in rows if r.matcher == name)
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("mean translation (pixels)")
    ax.set_ylabel("EER (%)")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_mu_sweep(mus: Sequence[float], rank1: Sequence[float], eer: Sequence[float], path) -> Path:
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    x = np.arange(len(mus))
    ax1.plot(x, [100 * v for v in rank1], marker="o", color="tab:blue", label="Rank-1")
    ax1.set_ylabel("Rank-1 (%)", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(x, [100 * v for v in eer], marker="s", color="tab:red", label="EER")
    ax2.set_ylabel("EER (%)", color="tab:red")
    ax1.set_xticks(x)
    ax1.set_xticklabels([f"{m:g}" for m in mus])
    ax1.set_xlabel("loss weight mu")
    return _save(fig, path)


def plot_table(header: Sequence[str], rows: Sequence[Sequence], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(1.3 * len(header), 0.45 * (len(rows) + 2)))
    ax.axis("off")
    table = ax.table(cellText=[[str(c) for c in r] for r in rows], colLabels=list(header), loc="center")
    table.scale(1, 1.3)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_loss(losses: Sequence[float], path, lrs: Sequence[float] = ()) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses, label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    if len(lrs):
        ax2 = ax.twinx()
        ax2.plot(np.arange(1, len(lrs) + 1), lrs, color="tab:gray", linestyle="--")
        ax2.set_ylabel("learning rate")
    return _save(fig, path)


def plot_bank(kernels: np.ndarray, path, columns: int = 12, max_kernels: int = 216) -> Path:
    k = kernels[:max_kernels]
    rows = int(np.ceil(len(k) / columns))
    fig, axes = plt.subplots(rows, columns, figsize=(columns * 0.6, rows * 0.6), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, ker in zip(axes.ravel(), k):
        lim = np.abs(ker).max() or 1.0
        ax.imshow(ker, cmap="gray", vmin=-lim, vmax=lim)
    return _save(fig, path)
