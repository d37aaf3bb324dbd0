"""Static figure emission: contribution charts, ROI heatmap grids, overlays.

Cortical-surface projection is out of scope here; parcel contributions are
shown as per-parcel bar charts and hemisphere scatter layouts instead.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .atlas import ParcelAtlas
from .ibbi import PARTITION_NAMES, ContributionResult, ROIAttentionMap


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def contribution_bar_chart(result: ContributionResult, atlas: ParcelAtlas, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(max(6, atlas.size * 0.35), 3.2))
    colors = ["tab:blue" if p.hemisphere == "left" else "tab:orange" for p in atlas.parcels]
    ax.bar(range(atlas.size), result.mean, color=colors)
    ax.set_xticks(range(atlas.size))
    ax.set_xticklabels([str(p.id) for p in atlas.parcels], fontsize=7)
    ax.set_xlabel("parcel id (blue = left, orange = right)")
    ax.set_ylabel("mean contribution")
    _save(fig, path)


def hemisphere_scatter(result: ContributionResult, atlas: ParcelAtlas, path: str | Path, seed: int = 0) -> None:
    """Quintile-colored parcel layout, one panel per hemisphere."""
    rng = np.random.default_rng([seed, 13])
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
    cmap = plt.get_cmap("viridis_r", 5)
    for ax, hemi in zip(axes, ("left", "right")):
        idx = [i for i, p in enumerate(atlas.parcels) if p.hemisphere == hemi]
        xy = rng.uniform(0.05, 0.95, size=(len(idx), 2))
        sizes = 3000.0 * result.mean[idx] + 20.0
        sc = ax.scatter(xy[:, 0], xy[:, 1], s=sizes, c=result.partition[idx], cmap=cmap, vmin=-0.5, vmax=4.5)
        for (x, y), i in zip(xy, idx):
            ax.annotate(str(atlas.parcels[i].id), (x, y), fontsize=6, ha="center", va="center")
        ax.set_title(f"{hemi} hemisphere")
        ax.set_xticks([])
        ax.set_yticks([])
    cbar = fig.colorbar(sc, ax=axes, ticks=range(5), shrink=0.8)
    cbar.ax.set_yticklabels(PARTITION_NAMES)
    _save(fig, path)


def overlay_map_on_image(image: np.ndarray, attention: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Compose an attention heatmap over an image at fixed alpha.

    ``image`` is (3, H, W) in [-1, 1]; returns (H, W, 3) floats in [0, 1].
    """
    base = np.clip((np.asarray(image, dtype=np.float64).transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)
    peak = attention.max()
    norm = attention / peak if peak > 0 else attention
    heat = plt.get_cmap("inferno")(norm)[..., :3]
    return (1.0 - alpha) * base + alpha * heat


def roi_heatmap_grid(
    maps_by_roi: dict[str, list[ROIAttentionMap]],
    path: str | Path,
    image: np.ndarray | None = None,
    alpha: float = 0.45,
) -> None:
    """Rows = ROI labels, columns = timesteps (descending sampling order)."""
    labels = list(maps_by_roi)
    if not labels:
        raise ValueError("need at least one ROI series")
    n_cols = max(len(v) for v in maps_by_roi.values())
    fig, axes = plt.subplots(
        len(labels), n_cols, figsize=(1.4 * n_cols, 1.5 * len(labels)), squeeze=False
    )
    for r, label in enumerate(labels):
        for c, roi_map in enumerate(maps_by_roi[label]):
            ax = axes[r][c]
            if image is not None:
                ax.imshow(overlay_map_on_image(image, roi_map.values, alpha=alpha))
            else:
                ax.imshow(roi_map.values, cmap="inferno")
            if r == 0:
                ax.set_title(f"t={roi_map.t}", fontsize=7)
            if c == 0:
                ax.set_ylabel(label, fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
        for c in range(len(maps_by_roi[label]), n_cols):
            axes[r][c].axis("off")
    _save(fig, path)


def loss_curve_figure(losses: Sequence[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    _save(fig, path)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = np.clip((np.asarray(image, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def save_image_png(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(image_to_uint8(image)).save(path, format="PNG")


def load_image_png(path: str | Path) -> np.ndarray:
    """PNG -> (3, H, W) float32 in [-1, 1]."""
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return (arr.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)
