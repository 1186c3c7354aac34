"""Static figures for training logs and evaluation reports (Agg backend, files only)."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def read_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def trailing_mean(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if window <= 1 or values.size == 0:
        return values
    csum = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty_like(values)
    for i in range(values.size):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def plot_alpha_trend(records: list, out_path, window: int = 20) -> Path:
    """Mean adaptive weight per pyramid level (left view) against step."""
    steps = [r["step"] for r in records]
    alpha = np.array([r["mean_alpha"] for r in records])  # (steps, levels, 2)
    fig, ax = plt.subplots(figsize=(5, 3))
    for level in range(alpha.shape[1]):
        ax.plot(steps, trailing_mean(alpha[:, level, 0], window), label=f"level {level}")
    ax.set_xlabel("step")
    ax.set_ylabel("mean adaptive weight")
    ax.legend(loc="lower right")
    out_path = Path(out_path)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_loss_curves(records: list, out_path, window: int = 20) -> Path:
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3))
    for key in ("l_ph", "l_st", "l_sm", "l_bc", "l_init"):
        ax.plot(steps, trailing_mean([r[key] for r in records], window), label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("weighted term")
    ax.legend(ncol=2)
    out_path = Path(out_path)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_per_image(rows: list, out_path, metric: str = "abs_rel") -> Path:
    """Sorted per-image values of one metric."""
    values = sorted(v for v in (getattr(rep, metric) for _, rep in rows) if v is not None)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(values)), values, marker=".", lw=0.8)
    if values:
        ax.axhline(float(np.mean(values)), color="k", ls="--", lw=0.8, label="mean")
        ax.legend()
    ax.set_xlabel("image (sorted)")
    ax.set_ylabel(metric)
    out_path = Path(out_path)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
