"""Figures written next to the CSV/text reports: loss curves and image panels."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps repeated renders byte-identical.
_PNG_META = {"Software": None}

plt.rcParams.update(
    {
        "font.size": 8,
        "axes.titlesize": 8,
        "axes.labelsize": 8,
        "legend.fontsize": 7,
        "xtick.labelsize": 7,
        "ytick.labelsize": 7,
        "figure.dpi": 100,
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


_LOSS_COLORS = {"loss_total": "0.2", "loss_e": "C0", "loss_a": "C1", "loss_g": "C2", "loss_p": "C3"}


def read_loss_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def plot_loss_curves(csv_paths: Sequence, out_path, title: str = "") -> Path:
    """One panel per loss CSV; every nonzero column is drawn on a log axis."""
    fig, axes = plt.subplots(1, len(csv_paths), figsize=(3.2 * len(csv_paths), 2.4), squeeze=False)
    for ax, p in zip(axes[0], csv_paths):
        cols = read_loss_csv(p)
        if not cols:
            continue
        for k, color in _LOSS_COLORS.items():
            v = cols[k]
            if np.any(v > 0):
                ax.plot(cols["iter"], v, lw=0.8, color=color, label=k.replace("loss_", ""))
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_title(Path(p).stem)
        ax.legend(frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, out_path)


def _hwc(img: np.ndarray) -> np.ndarray:
    img = np.clip(np.asarray(img), 0.0, 1.0)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    return img.transpose(1, 2, 0) if img.ndim == 3 else img


def contact_sheet(rows: Sequence[Sequence[np.ndarray]], columns: Sequence[str], out_path, row_labels: Sequence[str] | None = None) -> Path:
    """Grid of images; each row is one sample, each column one stage (e.g. input | dehazed | target)."""
    n, m = len(rows), len(columns)
    fig, axes = plt.subplots(n, m, figsize=(1.4 * m, 1.4 * n + 0.3), squeeze=False)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            ax = axes[i][j]
            if img is not None:
                ax.imshow(_hwc(img), cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(columns[j])
            if j == 0 and row_labels:
                ax.set_ylabel(row_labels[i], fontsize=6)
    fig.tight_layout(pad=0.2)
    return _save(fig, out_path)


def ablation_bars(table: dict[str, float], out_path, ylabel: str = "SSIM") -> Path:
    names = list(table)
    fig, ax = plt.subplots(figsize=(0.8 * len(names) + 1.0, 2.4))
    ax.bar(range(len(names)), [table[k] for k in names], color="0.4")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    return _save(fig, out_path)
