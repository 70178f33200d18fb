"""Report figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# background, hybrid, EWA
PATH_COLORS = np.array([[0, 0, 0], [70, 130, 180], [230, 120, 40]], np.uint8)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_loss(round_losses, path):
    """Training loss per epoch, one line per round, on a log axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    start = 0
    for i, losses in enumerate(round_losses):
        x = np.arange(start, start + len(losses))
        ax.plot(x, losses, marker=".", label=f"round {i + 1}")
        start += len(losses)
    ax.set_yscale("log")
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel("summed smooth L1")
    if len(round_losses) > 1:
        ax.legend(fontsize=7)
    _save(fig, path)


def plot_psnr_bars(report, path):
    fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(report.entries)), 3.5))
    colors = {"train": "tab:blue", "test": "tab:orange"}
    xs = np.arange(len(report.entries))
    ax.bar(xs, [e.psnr for e in report.entries], color=[colors.get(e.split, "gray") for e in report.entries])
    ax.set_xticks(xs, [str(e.view) for e in report.entries], fontsize=6)
    ax.set_xlabel("view")
    ax.set_ylabel("PSNR (dB)")
    for split, c in colors.items():
        m = report.mean_psnr(split)
        if np.isfinite(m):
            ax.axhline(m, color=c, ls="--", lw=1, label=f"{split} mean {m:.2f}")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_density_rounds(reports, path):
    """Per-mesh texel spacing after each adaptive round."""
    meshes = sorted({row[0] for r in reports for row in r.rows})
    dens = np.array([[dict((row[0], row[7]) for row in r.rows)[m] for m in meshes] for r in reports])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    rounds = np.arange(1, len(reports) + 1)
    if len(meshes) <= 12:
        for j, m in enumerate(meshes):
            ax.plot(rounds, dens[:, j], marker="o", label=f"mesh {m}")
        ax.legend(fontsize=6, ncol=2)
    else:
        ax.plot(rounds, dens, color="gray", alpha=0.3, lw=0.8)
        ax.plot(rounds, np.median(dens, axis=1), color="k", lw=2, label="median")
        ax.legend(fontsize=7)
    ax.set_yscale("log")
    ax.set_xlabel("round")
    ax.set_ylabel("texel spacing (m)")
    _save(fig, path)


def save_path_mask(mask: np.ndarray, path):
    """Color-coded shading path per pixel (black: background, blue: hybrid, orange: EWA)."""
    plt.imsave(path, PATH_COLORS[np.asarray(mask, np.int64)], metadata={"Software": None})
