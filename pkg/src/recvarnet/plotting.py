"""Figure emitters: reconstruction comparison panels, masks and training curves."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

__all__ = ["comparison_panel", "default_zoom_box", "mask_figure", "training_curve"]


def default_zoom_box(shape: Sequence[int], fraction: float = 0.3) -> tuple[int, int, int, int]:
    """Centered ``(row, col, height, width)`` crop covering ``fraction`` of each axis."""
    n_y, n_x = shape
    h, w = max(4, int(n_y * fraction)), max(4, int(n_x * fraction))
    return (n_y - h) // 2, (n_x - w) // 2, h, w


def comparison_panel(
    images: dict,
    path: Union[str, Path],
    zoom_box: Optional[tuple[int, int, int, int]] = None,
    title: Optional[str] = None,
    dpi: int = 120,
) -> Path:
    """Write a grid of images (top row) with zoomed crops (bottom row).

    ``images`` maps a column label to a 2D magnitude image; all columns share the
    display range of the first one, which should be the reference.
    """
    labels = list(images)
    if not labels:
        raise ValueError("No images to plot.")
    first = np.asarray(images[labels[0]])
    zoom_box = zoom_box or default_zoom_box(first.shape)
    r, c, h, w = zoom_box
    vmax = float(first.max()) or 1.0

    fig, axes = plt.subplots(2, len(labels), figsize=(2.4 * len(labels), 5.0), squeeze=False)
    for j, label in enumerate(labels):
        image = np.asarray(images[label])
        axes[0, j].imshow(image, cmap="gray", vmin=0, vmax=vmax)
        axes[0, j].add_patch(Rectangle((c - 0.5, r - 0.5), w, h, fill=False, edgecolor="yellow", linewidth=1))
        axes[0, j].set_title(label, fontsize=10)
        axes[1, j].imshow(image[r : r + h, c : c + w], cmap="gray", vmin=0, vmax=vmax)
        for ax in axes[:, j]:
            ax.set_xticks([])
            ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=11)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path


def mask_figure(mask: np.ndarray, path: Union[str, Path], title: Optional[str] = None) -> Path:
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(np.asarray(mask, dtype=float), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curve(metrics_log: Union[str, Path], path: Union[str, Path]) -> Path:
    """Plot loss and validation SSIM columns of a ``metrics.tsv`` log."""
    lines = Path(metrics_log).read_text().strip().splitlines()
    header = lines[0].split("\t")
    rows = np.array([[float(v) for v in line.split("\t")] for line in lines[1:]], dtype=float).reshape(-1, len(header))
    fig, (ax_loss, ax_ssim) = plt.subplots(1, 2, figsize=(8, 3))
    ax_loss.plot(rows[:, 0], rows[:, 1], marker="o")
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("training loss")
    for j, name in enumerate(header[2:], start=2):
        ax_ssim.plot(rows[:, 0], rows[:, j], marker="o", label=name)
    ax_ssim.set_xlabel("iteration")
    ax_ssim.set_ylabel("validation SSIM")
    ax_ssim.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
