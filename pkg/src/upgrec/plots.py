"""Report figures written to files with the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no version stamp, so repeated PNG renders compare equal
    fig.savefig(path, dpi=100, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def rmse_bars(scores: dict, path, title: str = "Test RMSE") -> Path:
    """Bar chart of model name -> RMSE."""
    names = list(scores)
    vals = [scores[n] for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(names, vals, color="0.55")
    lo = min(vals)
    ax.set_ylim(lo - 0.1 * abs(lo) if lo > 0 else lo, max(vals) * 1.02)
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.4f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("RMSE")
    ax.set_title(title)
    return _save(fig, path)


def sparsity_curve(rhos, fractions, path, rmses=None) -> Path:
    """Nonzero off-diagonal fraction of the precision against rho, optionally with RMSE."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(rhos, 100 * np.asarray(fractions), "o-", color="k")
    ax.set_xlabel("rho")
    ax.set_ylabel("nonzero off-diagonal (%)")
    if rmses is not None:
        ax2 = ax.twinx()
        ax2.plot(rhos, rmses, "s--", color="tab:red")
        ax2.set_ylabel("RMSE", color="tab:red")
    return _save(fig, path)


def partial_correlation_heatmap(pc: np.ndarray, path, max_items: int = 100) -> Path:
    """Heatmap of the partial correlations of the first ``max_items`` items."""
    pc = np.asarray(pc)[:max_items, :max_items].copy()
    np.fill_diagonal(pc, 0.0)
    lim = max(float(np.abs(pc).max()), 1e-12)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(pc, cmap="RdBu_r", vmin=-lim, vmax=lim, interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_xlabel("item")
    ax.set_ylabel("item")
    return _save(fig, path)


def lift_boxplot(lifts: dict, path) -> Path:
    """Box plot of bootstrap click lifts (percent) per policy."""
    names = list(lifts)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.boxplot([lifts[n] for n in names])
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_ylabel("click lift (%)")
    return _save(fig, path)


def prequential_curve(errors: np.ndarray, path, batch_rmse: float | None = None) -> Path:
    """Running RMSE of predict-then-update replay against the batch value."""
    errors = np.asarray(errors, dtype=float)
    running = np.sqrt(np.cumsum(errors ** 2) / np.arange(1, len(errors) + 1))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(errors) + 1), running, color="k", lw=1, label="online")
    if batch_rmse is not None:
        ax.axhline(batch_rmse, color="tab:red", ls="--", label="batch")
    ax.set_xlabel("test observations replayed")
    ax.set_ylabel("running RMSE")
    ax.legend()
    return _save(fig, path)
