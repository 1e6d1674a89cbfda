"""PNG figures rendered next to the CSV/JSON outputs (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GROUP_COLORS = {"id": "tab:blue", "background": "tab:gray", "synthetic_od": "tab:red"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def loss_curves(history, warmup_iters, path):
    h = np.asarray(history, dtype=np.float64).reshape(-1, 5)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    for ax, col, name in zip(axes, (1, 2, 3), ("detection", "flow NLL", "regularizer")):
        ax.plot(h[:, 0], h[:, col], lw=0.6)
        if warmup_iters:
            ax.axvline(warmup_iters, color="k", ls=":", lw=0.8)
        ax.set_title(name)
        ax.set_xlabel("iteration")
    _save(fig, path)


def likelihood_histogram(rows, path):
    """Rows as produced by ``evalkit.histogram_rows``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for group in dict.fromkeys(r[0] for r in rows):
        sel = [r for r in rows if r[0] == group]
        left = np.array([r[1] for r in sel])
        width = np.array([r[2] - r[1] for r in sel])
        counts = np.array([r[3] for r in sel], dtype=np.float64)
        total = counts.sum()
        if total == 0:
            continue
        ax.bar(left, counts / (total * width), width=width, align="edge", alpha=0.5,
               color=GROUP_COLORS.get(group), label=group)
    ax.set_xlabel("log-likelihood")
    ax.set_ylabel("density")
    ax.legend()
    _save(fig, path)


def pca_scatter(rows, path):
    """Rows ``(label, pc1, pc2)``; label -1 marks synthesized outliers."""
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for lab in np.unique(arr[:, 0]):
        sel = arr[arr[:, 0] == lab]
        if lab < 0:
            ax.scatter(sel[:, 1], sel[:, 2], s=12, c="k", marker="x", label="outlier")
        else:
            ax.scatter(sel[:, 1], sel[:, 2], s=3, alpha=0.5, label=f"class {int(lab)}")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(markerscale=2, fontsize=7)
    _save(fig, path)


def energy_histogram(id_energies, ood_energies, threshold, path, bins=50):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    pooled = np.concatenate([id_energies, ood_energies])
    edges = np.linspace(pooled.min(), pooled.max(), bins + 1)
    ax.hist(id_energies, bins=edges, density=True, alpha=0.5, label="inlier")
    ax.hist(ood_energies, bins=edges, density=True, alpha=0.5, label="OOD")
    ax.axvline(threshold, color="k", ls="--", lw=1, label="threshold")
    ax.set_xlabel("energy")
    ax.legend()
    _save(fig, path)


def sweep_summary(rows, key, path):
    """Median FPR95 and AUROC against one swept key (other keys pooled)."""
    values = sorted({r[key] for r in rows}, key=lambda v: (isinstance(v, str), v))
    fpr = [np.median([r["fpr95"] for r in rows if r[key] == v]) for v in values]
    auc = [np.median([r["auroc"] for r in rows if r[key] == v]) for v in values]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    labels = [str(v) for v in values]
    axes[0].plot(labels, fpr, "o-")
    axes[0].set_title("median FPR95")
    axes[1].plot(labels, auc, "o-")
    axes[1].set_title("median AUROC")
    for ax in axes:
        ax.set_xlabel(key)
    _save(fig, path)
