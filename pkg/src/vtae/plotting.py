"""Figure rendering for the CLI report paths (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps PNG bytes stable across reruns
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(metrics: list, path, grad_series: list | None = None) -> Path:
    epochs = [r["epoch"] for r in metrics]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(epochs, [r["elbo"] for r in metrics], marker="o")
    axes[0].set_title("ELBO")
    axes[1].plot(epochs, [r["recon"] for r in metrics], marker="o", color="tab:orange")
    axes[1].set_title("reconstruction MSE")
    ax = axes[2]
    if grad_series:
        layers = sorted({r["layer"] for r in grad_series})
        for layer in layers:
            rows = [r for r in grad_series if r["layer"] == layer and r["ratio"] is not None]
            pool = rows[0]["pooling"] if rows else False
            ax.plot([r["epoch"] for r in rows], [r["ratio"] for r in rows],
                    linestyle="--" if pool else "-", label=layer)
        ax.legend(fontsize=6)
    else:
        ax.plot(epochs, [r["grad_ratio"] for r in metrics], marker="o", color="tab:green")
    ax.axhline(1.0, color="grey", lw=0.8)
    ax.set_title("gradient-norm ratio")
    for a in axes:
        a.set_xlabel("epoch")
    fig.tight_layout()
    return _save(fig, path)


def plot_paths_2d(geodesic: np.ndarray, linear: np.ndarray, path, data: np.ndarray | None = None,
                  radii: tuple | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    if data is not None:
        ax.scatter(data[:, 0], data[:, 1], s=2, color="lightgrey")
    if radii is not None:
        t = np.linspace(0, 2 * np.pi, 200)
        for r in radii:
            ax.plot(r * np.cos(t), r * np.sin(t), color="grey", lw=0.6, ls=":")
    ax.plot(linear[:, 0], linear[:, 1], color="tab:red", label="linear")
    ax.plot(geodesic[:, 0], geodesic[:, 1], color="tab:blue", label="geodesic")
    ax.set_aspect("equal")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_frames(geodesic: np.ndarray, linear: np.ndarray, shape: tuple, path) -> Path:
    """Two rows of decoded images, geodesic on top."""
    n = len(geodesic)
    fig, axes = plt.subplots(2, n, figsize=(n * 0.9, 2.0), squeeze=False)
    for row, frames in enumerate((geodesic, linear)):
        for i in range(n):
            axes[row, i].imshow(frames[i].reshape(shape[-2:]), cmap="gray", vmin=0, vmax=1)
            axes[row, i].axis("off")
    return _save(fig, path)


def plot_speed(s: np.ndarray, speeds: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    for name, v in speeds.items():
        ax.plot(s, v, label=name)
    ax.set_xlabel("s")
    ax.set_ylabel("decoded speed")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_diagnostics(cond: np.ndarray, mf_norm: np.ndarray, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
    axes[0].boxplot(np.log10(cond[np.isfinite(cond)]))
    axes[0].set_title("log10 condition number")
    axes[1].boxplot(mf_norm)
    axes[1].set_title("normalized MF")
    fig.tight_layout()
    return _save(fig, path)


def plot_roc(fpr, tpr, auc: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, label=f"AUC {auc:.3f}")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_denoise(aggregates: dict, path) -> Path:
    """``aggregates`` maps noise kind to {level: mean NLL}."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind, by_level in aggregates.items():
        lv = sorted(by_level)
        ax.plot(lv, [by_level[v] for v in lv], marker="o", label=kind)
    ax.set_xlabel("noise level")
    ax.set_ylabel("mean NLL")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
