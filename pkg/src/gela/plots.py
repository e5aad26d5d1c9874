"""Matplotlib figures for the report commands (rendered off-screen to files)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def attention_heatmap(matrix: np.ndarray, path, tokens: Sequence[str] | None = None, title: str = "") -> Path:
    """Rows are instruction slots, columns the 36 views plus the stop slot."""
    m = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(9, 0.25 * m.shape[0] + 1.5))
    im = ax.imshow(m, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_xlabel("panorama slot (36 views + stop)")
    ax.set_ylabel("instruction slot")
    if tokens is not None:
        ax.set_yticks(range(len(tokens)))
        ax.set_yticklabels(tokens, fontsize=7)
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.03)
    fig.tight_layout()
    return _save(fig, path)


def training_curves(series: dict[str, Sequence[tuple[int, float]]], path, ylabel: str = "loss", window: int = 25) -> Path:
    """One smoothed line per task; each series is (iteration, value) pairs."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in sorted(series):
        pts = np.asarray(series[name], dtype=float)
        if len(pts) == 0:
            continue
        k = max(1, min(window, len(pts)))
        smooth = np.convolve(pts[:, 1], np.ones(k) / k, mode="valid")
        ax.plot(pts[k - 1 :, 0], smooth, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def comparison_bars(values: dict[str, dict[str, float]], path, title: str = "") -> Path:
    """Grouped bars: ``values[model][metric]``."""
    models = list(values)
    metrics = sorted({k for v in values.values() for k in v})
    x = np.arange(len(metrics))
    width = 0.8 / max(1, len(models))
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, name in enumerate(models):
        ax.bar(x + i * width, [values[name].get(m, 0.0) for m in metrics], width, label=name)
    ax.set_xticks(x + width * (len(models) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
