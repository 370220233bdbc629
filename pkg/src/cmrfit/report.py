"""Report figures (matplotlib, Agg backend) and delimited tables."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_csv(path, rows: list, fields: list | None = None) -> Path:
    path = Path(path)
    if fields is None:
        fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (float(v) if isinstance(v, np.floating) else v) for k, v in r.items()})
    return path


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_iou_curve(report, path) -> Path:
    """Fraction of instances above each IoU threshold, for the SfM and the
    predicted cameras."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(report.thresholds, report.curve_sfm, "o-", label=f"SfM camera (mean {report.mean_iou_sfm:.3f})")
    ax.plot(report.thresholds, report.curve_pred, "s--", label=f"predicted camera (mean {report.mean_iou_pred:.3f})")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("fraction of instances")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_loss_trace(trace: list, path, terms=None) -> Path:
    """Per-term loss curves on a log axis."""
    if terms is None:
        terms = [k for k in trace[0] if k not in ("stage", "step", "sigma")] if trace else []
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    steps = [r["step"] for r in trace]
    for k in terms:
        vals = np.abs([r[k] for r in trace])
        if np.any(vals > 0):
            ax.semilogy(steps, np.maximum(vals, 1e-12), label=k, lw=1.2 if k == "total" else 0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_images(images: list, titles: list, path, ncols: int | None = None) -> Path:
    n = len(images)
    ncols = ncols or n
    nrows = -(-n // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.3 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, img, title in zip(axes.ravel(), images, titles):
        ax.imshow(np.clip(img, 0, 1), cmap="gray" if np.ndim(img) == 2 else None, vmin=0, vmax=1)
        ax.set_title(title, fontsize=8)
    return _save(fig, path)


def plot_pca_modes(rows: list, path) -> Path:
    """rows: (label, [image at -2 sigma, mean, +2 sigma]) per mode."""
    images = [img for _, imgs in rows for img in imgs]
    titles = [f"{label} {tag}" for label, _ in rows for tag in ("-2σ", "mean", "+2σ")]
    return plot_images(images, titles, path, ncols=3)
