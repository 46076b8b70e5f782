"""Figures written by the ``refine`` command."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no Software/date entries so repeated runs produce identical files
_PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)


def plot_loss_trace(loss_trace, view_trace, path):
    """Per-iteration photometric loss, one marker colour per sampled view."""
    loss = np.asarray(loss_trace, dtype=float)
    views = np.asarray(view_trace, dtype=int)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    it = np.arange(len(loss))
    ax.plot(it, loss, color="0.7", lw=0.8, zorder=1)
    for v in np.unique(views):
        sel = views == v
        ax.scatter(it[sel], loss[sel], s=8, label=f"view {v}", zorder=2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("photometric loss")
    if len(loss) and np.all(loss > 0):
        ax.set_yscale("log")
    if len(views):
        ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    _save(fig, path)


def plot_view_comparison(targets, initial, final, path):
    """Rows of target / initial render / refined render / |refined - target|."""
    n = len(targets)
    fig, axes = plt.subplots(n, 4, figsize=(8, 2.1 * n), squeeze=False)
    titles = ("target", "initial", "refined", "abs error")
    for i in range(n):
        err = np.abs(final[i] - targets[i]).mean(axis=2)
        for j, img in enumerate((targets[i], initial[i], final[i], err)):
            ax = axes[i, j]
            if img.ndim == 2:
                ax.imshow(img, cmap="magma", vmin=0.0, vmax=max(float(err.max()), 1e-6))
            else:
                ax.imshow(np.clip(img, 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j], fontsize=9)
        axes[i, 0].set_ylabel(f"view {i}", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
