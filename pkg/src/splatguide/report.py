"""Figures written next to the CSV outputs: guidance panels, loss curves, metric bars."""
from __future__ import annotations

import csv
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import TERMS  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.0,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _show(ax, data, title, cmap="gray", vmin=None, vmax=None):
    ax.imshow(data, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])


def _rgb(img):
    img = np.asarray(img)
    return img[:, :, 0] if img.shape[2] == 1 else np.clip(img, 0, 1)


def guidance_figure(image, mask, result, path) -> None:
    """Incomplete image, mask, edge, distance and splat map side by side."""
    incomplete = np.asarray(image) * (1.0 - np.asarray(mask))[:, :, None]
    panels = [
        (_rgb(incomplete), "incomplete", "gray", 0, 1),
        (mask, "mask (1 = missing)", "gray", 0, 1),
        (result.edge.data, "edge", "magma", None, None),
        (result.distance.data, "distance", "viridis", None, None),
        (result.splat.data, "splat", "inferno", 0, 1),
    ]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.0 * len(panels), 2.3))
        for ax, (data, title, cmap, lo, hi) in zip(axes, panels):
            _show(ax, data, title, cmap, lo, hi)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def inpaint_figure(incomplete, mask, output, path, truth=None) -> None:
    m = np.asarray(mask)[:, :, None]
    panels = [(_rgb(np.asarray(incomplete) * (1 - m)), "input"), (_rgb(output), "inpainted")]
    if truth is not None:
        panels.append((_rgb(truth), "truth"))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.0 * len(panels), 2.3))
        for ax, (data, title) in zip(axes, panels):
            _show(ax, data, title, vmin=0, vmax=1)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def read_loss_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def loss_figure(log_path, path, window: int = 10) -> None:
    """Per-term loss curves (log scale) with a trailing moving average of the total."""
    log = read_loss_log(log_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        if log:
            steps = log["step"]
            for k in (*TERMS, "total"):
                y = np.maximum(log[k], 1e-12)
                ax.plot(steps, y, label=k, lw=1.4 if k == "total" else 0.8, alpha=1.0 if k == "total" else 0.7)
            if len(steps) >= window:
                ma = np.convolve(log["total"], np.ones(window) / window, mode="valid")
                ax.plot(steps[window - 1:], ma, "k--", lw=1.0, label=f"total, {window}-step mean")
            ax.set_yscale("log")
            ax.legend(ncol=2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def metrics_figure(report, path) -> None:
    """Per-image PSNR and SSIM bars with the aggregate mean as a dashed line."""
    names = [r.name for r in report.rows]
    x = np.arange(len(names))
    ps = np.array([r.psnr for r in report.rows])
    finite = ps[np.isfinite(ps)]
    cap = (finite.max() + 5.0) if finite.size else 100.0
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(2, 1, figsize=(max(4.0, 0.35 * len(names) + 2), 4.2), sharex=True)
        a1.bar(x, np.where(np.isfinite(ps), ps, cap), color="C0")
        if math.isfinite(report.mean_psnr):
            a1.axhline(report.mean_psnr, color="k", ls="--", lw=0.8)
        a1.set_ylabel("PSNR (dB)")
        a2.bar(x, [r.ssim for r in report.rows], color="C1")
        a2.axhline(report.mean_ssim, color="k", ls="--", lw=0.8)
        a2.set_ylabel("SSIM")
        a2.set_xticks(x)
        a2.set_xticklabels(names, rotation=60, ha="right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
