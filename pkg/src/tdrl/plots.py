"""Diagnostic figures: matched true-vs-estimated scatter, correlation heatmap, loss curves."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ArtifactIOError  # noqa: E402


def _save(fig, path):
    try:
        fig.savefig(path, dpi=100, metadata={"Software": None})
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def scatter_matched(z_true, z_est, report, path, max_points: int = 2000, seed: int = 0):
    """One panel per true component against its matched estimate."""
    a = np.asarray(z_true).reshape(-1, np.shape(z_true)[-1])
    b = np.asarray(z_est).reshape(-1, np.shape(z_est)[-1])
    idx = np.random.default_rng(seed).permutation(a.shape[0])[:max_points]
    n = a.shape[1]
    cols = min(n, 4)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for k in range(n):
        ax = axes[k // cols][k % cols]
        j = report.assignment[k]
        ax.scatter(a[idx, k], b[idx, j], s=2, alpha=0.5)
        ax.set_title(f"z{k} vs est {j}  |r|={report.corr[k, j]:.2f}", fontsize=8)
    for k in range(n, rows * cols):
        axes[k // cols][k % cols].axis("off")
    fig.tight_layout()
    _save(fig, path)


def correlation_heatmap(corr, path):
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(corr, vmin=0, vmax=1, cmap="viridis")
    ax.set_xlabel("estimated")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)


def loss_curves(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    epochs = [r["epoch"] for r in rows]
    ax.plot(epochs, [r["train_total"] for r in rows], label="train")
    ax.plot(epochs, [r["val_total"] for r in rows], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("negative ELBO")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
