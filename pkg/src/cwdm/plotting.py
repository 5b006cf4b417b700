"""Figures: middle-slice panels, loss curves and report charts.

All figures are written straight to files with the non-interactive Agg
backend.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import DISPLAY_ORDER  # noqa: E402

PLANES = ("axial", "sagittal", "coronal")

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}


def middle_slices(volume: np.ndarray) -> dict[str, np.ndarray]:
    """Slices through the centre voxel; the volume is indexed (depth, height, width)."""
    d, h, w = (n // 2 for n in volume.shape)
    return {"axial": volume[d], "sagittal": volume[:, :, w], "coronal": volume[:, h, :]}


def panel_mosaic(real: np.ndarray, synthetic: np.ndarray) -> np.ndarray:
    """Grayscale mosaic: per plane, the real slice row above the synthetic one.

    Tiles are zero-padded at the bottom/right to a common size; values are
    not rescaled.
    """
    rows = []
    for plane in PLANES:
        rows.append(middle_slices(real)[plane])
        rows.append(middle_slices(synthetic)[plane])
    height = max(r.shape[0] for r in rows)
    width = max(r.shape[1] for r in rows)
    mosaic = np.zeros((height * len(rows), width), dtype=np.float64)
    for i, r in enumerate(rows):
        mosaic[i * height : i * height + r.shape[0], : r.shape[1]] = r
    return mosaic


def save_mosaic(path: Path | str, mosaic: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # explicit 8-bit gray levels: pixel = round(255 * value), no colormap lookup
    levels = np.round(np.clip(mosaic, 0.0, 1.0) * 255).astype(np.uint8)
    plt.imsave(path, np.stack([levels] * 3, axis=-1))
    return path


def slice_panel(real: Mapping[str, np.ndarray], synthetic: Mapping[str, np.ndarray], path: Path | str, title: str | None = None) -> Path:
    """Modalities as columns; rows alternate real/synthetic for each plane."""
    modalities = [m for m in DISPLAY_ORDER if m in real and m in synthetic]
    if not modalities:
        raise ValueError("no modality has both a real and a synthetic volume")
    with plt.rc_context(RC):
        fig, axes = plt.subplots(
            2 * len(PLANES), len(modalities), figsize=(1.6 * len(modalities), 1.6 * 2 * len(PLANES)),
            squeeze=False, facecolor="black",
        )
        for col, m in enumerate(modalities):
            pairs = (middle_slices(real[m]), middle_slices(synthetic[m]))
            for p, plane in enumerate(PLANES):
                for k, label in enumerate(("Real", "Synthetic")):
                    ax = axes[2 * p + k, col]
                    img = pairs[k][plane]
                    ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0, origin="upper" if plane == "axial" else "lower",
                              interpolation="nearest")
                    ax.set_xticks([])
                    ax.set_yticks([])
                    if col == 0:
                        ax.set_ylabel(f"{label}\n{plane}", color="white")
            axes[0, col].set_title(m, color="white")
        if title:
            fig.suptitle(title, color="white")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, facecolor=fig.get_facecolor())
        plt.close(fig)
    return path


def loss_curve(loss_log: Path | str, path: Path | str, window: int = 100) -> Path:
    with open(loss_log, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    it = np.array([int(r["iteration"]) for r in rows])
    loss = np.array([float(r["loss"]) for r in rows])
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(it, loss, lw=0.5, alpha=0.4, label="loss")
        if len(loss) >= window:
            smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax.plot(it[window - 1 :], smooth, lw=1.5, label=f"{window}-iter mean")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("MSE (wavelet coefficients)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def metrics_chart(report, path: Path | str) -> Path:
    """Per-modality strip plot of PSNR and SSIM."""
    groups = [m for m in DISPLAY_ORDER if any(r.modality == m for r in report.per_case)]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(6, 2.8))
        for ax, key in zip(axes, ("psnr", "ssim")):
            for i, m in enumerate(groups):
                vals = [getattr(r, key) for r in report.per_case if r.modality == m]
                ax.scatter(np.full(len(vals), i), vals, s=12)
                ax.hlines(np.mean(vals), i - 0.3, i + 0.3, color="k")
            ax.set_xticks(range(len(groups)))
            ax.set_xticklabels(groups)
            ax.set_ylabel(key.upper())
        fig.suptitle(f"crop: {report.crop_mode}")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def ablation_chart(rows: list[dict], path: Path | str) -> Path:
    labels = [f"{r['skip']}/{r['schedule']}/C={r['base_channels']}" for r in rows]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3))
        for ax, key in zip(axes, ("mse", "psnr", "ssim")):
            ax.barh(range(len(rows)), [r[key] for r in rows])
            ax.set_yticks(range(len(rows)))
            ax.set_yticklabels(labels if ax is axes[0] else [])
            ax.set_xlabel(key.upper())
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
