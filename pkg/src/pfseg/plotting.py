"""Figures written next to the CLI's tab-separated outputs."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss_curve(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [r["epoch"] for r in rows]
    for key in ("loss", "l_ust", "l_srt", "l_tel", "l_ssl"):
        values = [r[key] for r in rows]
        if any(values):
            ax.plot(epochs, values, label=key, lw=1.5 if key == "loss" else 1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss (epoch mean)")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_patchsize_vs_dsc(rows: list[dict], path) -> None:
    """``rows`` carry ``model``, ``voxels`` and ``dsc``; one line per model."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series = defaultdict(list)
    for r in rows:
        series[r["model"]].append((r["voxels"], r["dsc"]))
    for name, pts in series.items():
        pts.sort()
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("input patch voxels")
    ax.set_ylabel("mean test DSC")
    if series:
        ax.legend(fontsize=8)
    _save(fig, path)


def plot_memory_vs_patch(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series = defaultdict(list)
    for r in rows:
        series[r["model"]].append((r["voxels"], r["megabytes"]))
    for name, pts in series.items():
        pts.sort()
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="s", label=name)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("HR extent voxels")
    ax.set_ylabel("activation memory estimate (MB, f32)")
    if series:
        ax.legend(fontsize=8)
    _save(fig, path)
