"""Matplotlib figures for reports; rendered off-screen to files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _overlay(ax, image, mask, title):
    from matplotlib.colors import ListedColormap

    ax.imshow(image.T, cmap="gray", vmin=0.15, vmax=0.45, origin="lower")
    cmap = ListedColormap([(0, 0, 0, 0), (0.1, 0.4, 0.9, 0.45), (0.9, 0.2, 0.2, 0.45), (1.0, 0.85, 0.1, 0.6)])
    ax.imshow(mask.T, cmap=cmap, vmin=0, vmax=3, origin="lower", interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.axis("off")


def plot_slices(y, y_hat, mask_gt, mask_pred, path: Path, z: int | None = None) -> Path:
    """Truth and reconstruction at mid-volume, plain and with organ overlays."""
    z = y.shape[-1] // 2 if z is None else z
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    for ax, img, title in ((axes[0], y, "truth"), (axes[1], y_hat, "reconstruction")):
        ax.imshow(img[:, :, z].T, cmap="gray", vmin=0.15, vmax=0.45, origin="lower")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    _overlay(axes[2], y[:, :, z], mask_gt[:, :, z], "phantom labels")
    _overlay(axes[3], y_hat[:, :, z], mask_pred[:, :, z], "segmented reconstruction")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_metrics(report, path: Path) -> Path:
    """Per-sample PSNR/SSIM and per-organ DSC of one report."""
    rows = report.rows
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    psnr = np.array([r["psnr_db"] for r in rows])
    axes[0].hist(psnr[np.isfinite(psnr)], bins=15, color="tab:gray")
    axes[0].set_xlabel("PSNR [dB]")
    axes[1].hist([r["ssim"] for r in rows], bins=15, color="tab:gray")
    axes[1].set_xlabel("SSIM")
    organs = ("lung", "liver", "bone")
    x = np.arange(len(organs))
    for k, (suffix, label) in enumerate((("gt", "vs labels"), ("s", "vs seg(truth)"))):
        means = [report.mean(f"dsc_{o}_{suffix}") for o in organs]
        stds = [report.aggregate[f"dsc_{o}_{suffix}"]["std"] for o in organs]
        axes[2].bar(x + (k - 0.5) * 0.35, means, 0.35, yerr=stds, label=label)
    axes[2].set_xticks(x, organs)
    axes[2].set_ylim(0, 1)
    axes[2].set_ylabel("DSC")
    axes[2].legend(fontsize=8)
    fig.suptitle(report.run_id, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_sweep(reports, path: Path) -> Path:
    """Mean DSC_gt and PSNR over the (lambda_s, lambda_p) grid."""
    ls = sorted({r.weights["lambda_s"] for r in reports})
    lp = sorted({r.weights["lambda_p"] for r in reports})
    grids = {c: np.full((len(ls), len(lp)), np.nan) for c in ("dsc_mean_gt", "psnr_db")}
    for r in reports:
        i, j = ls.index(r.weights["lambda_s"]), lp.index(r.weights["lambda_p"])
        for c in grids:
            grids[c][i, j] = r.mean(c)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, (c, title) in zip(axes, (("dsc_mean_gt", "mean DSC"), ("psnr_db", "PSNR [dB]"))):
        im = ax.imshow(grids[c], origin="lower", cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(lp)), [f"{v:g}" for v in lp])
        ax.set_yticks(range(len(ls)), [f"{v:g}" for v in ls])
        ax.set_xlabel("lambda_p")
        ax.set_ylabel("lambda_s")
        ax.set_title(title, fontsize=10)
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_loss_log(csv_path: Path, path: Path) -> Path:
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("dis", "gen", "r", "proj", "s", "p", "total"):
        vals = np.array([float(r[key]) for r in rows])
        if np.any(vals):
            ax.plot(steps, vals, label=key, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=8, ncol=4)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_projections(x_ap, x_lat, path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for ax, img, title in ((axes[0], x_ap, "a.p."), (axes[1], x_lat, "lat.")):
        ax.imshow(np.asarray(img).T, cmap="gray", origin="lower", aspect="auto")
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("detector bin")
        ax.set_ylabel("z")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
