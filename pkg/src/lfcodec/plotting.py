"""Figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_rd_curves(curves: Sequence, path, title: str = "") -> Path:
    """MS-SSIM_Y and PSNR_Y against bpp, one line per curve."""
    with plt.rc_context(_RC):
        fig, (ax_ms, ax_ps) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for curve in curves:
            label = getattr(curve, "name", "") or None
            ax_ms.plot(curve.rates(), curve.quality("msssim_y_db"), marker="o", ms=3, label=label)
            ax_ps.plot(curve.rates(), curve.quality("psnr_y"), marker="o", ms=3, label=label)
        ax_ms.set_xlabel("bpp")
        ax_ms.set_ylabel("MS-SSIM$_Y$ (dB)")
        ax_ps.set_xlabel("bpp")
        ax_ps.set_ylabel("PSNR$_Y$ (dB)")
        if any(getattr(c, "name", "") for c in curves):
            ax_ps.legend(loc="lower right")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_training_log(records, path) -> Path:
    steps = [r.step for r in records]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 3, figsize=(8.0, 2.4))
        for ax, key, label in zip(axes, ("loss", "rate_bpp", "mse"), ("L", "rate (bpp)", "MSE")):
            ax.plot(steps, [getattr(r, key) for r in records], lw=0.8)
            ax.set_xlabel("step")
            ax.set_ylabel(label)
        axes[2].set_yscale("log")
        fig.tight_layout()
        return _save(fig, path)


def flow_to_color(flow: np.ndarray, max_mag: float = None) -> np.ndarray:
    """HSV false color: hue from direction, value from magnitude. ``flow`` is ``(h, w, 2)``."""
    from matplotlib.colors import hsv_to_rgb

    dx, dy = flow[..., 0], flow[..., 1]
    mag = np.hypot(dx, dy)
    scale = max_mag if max_mag else max(float(mag.max()), 1e-6)
    hsv = np.stack(
        [(np.arctan2(dy, dx) / (2 * np.pi)) % 1.0, np.ones_like(mag), np.clip(mag / scale, 0, 1)], axis=-1
    )
    return hsv_to_rgb(hsv)


def save_disparity_maps(flows: np.ndarray, path, row_index: int = 0) -> Path:
    """Grid figure of the eight flows of one row, ``flows`` is ``(8, h, w, 2)``."""
    max_mag = max(float(np.hypot(flows[..., 0], flows[..., 1]).max()), 1e-6)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, len(flows), figsize=(1.3 * len(flows), 1.6))
        for i, ax in enumerate(np.atleast_1d(axes)):
            ax.imshow(flow_to_color(flows[i], max_mag))
            ax.set_title(f"view {i}")
            ax.axis("off")
        fig.suptitle(f"row {row_index} disparity (max |d| = {max_mag:.2f} px)")
        return _save(fig, path)


def plot_view_psnr(per_view: np.ndarray, path) -> Path:
    """Heat map of per-view PSNR_Y over the (row, column) view grid."""
    with plt.rc_context({**_RC, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(3.4, 2.9))
        im = ax.imshow(per_view, cmap="viridis")
        ax.set_xlabel("view column")
        ax.set_ylabel("view row")
        fig.colorbar(im, ax=ax, label="PSNR$_Y$ (dB)")
        fig.tight_layout()
        return _save(fig, path)
