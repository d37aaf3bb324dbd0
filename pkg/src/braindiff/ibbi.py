"""Bi-directional attention interpretability over captured traces.

Brain-directed view: each timestep's attention is pooled into a parcel
contribution vector that weights every spatial query equally,

    contribution_j = (1 / (H * sum_l q_l)) * sum_l sum_h sum_i A[l,h][i, j],

which sums to 1 because every attention row does. Image-directed view:
for a parcel group R, per-layer query profiles

    m_R[i] = (1 / (H * |R|)) * sum_h sum_{j in R} A[l,h][i, j]

are reshaped to the layer grid, bilinearly upsampled to image resolution,
normalized to unit L1 mass, and averaged uniformly across layers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .atlas import ParcelAtlas
from .errors import DimensionError, ValidationError
from .trace import AttentionTrace

PARTITION_NAMES = ("top 20%", "20-40%", "40-60%", "60-80%", "bottom 20%")


def parcel_contribution(trace: AttentionTrace, t: int) -> np.ndarray:
    """Query-weighted share of attention mass per parcel at timestep t."""
    trace.require_complete_at(t)
    total = np.zeros(trace.num_parcels, dtype=np.float64)
    for layer in trace.layers:
        for head in range(trace.num_heads):
            total += trace.get(t, layer, head).sum(axis=0, dtype=np.float64)
    return total / (trace.num_heads * trace.total_queries)


@dataclass
class ContributionResult:
    timesteps: list[int]  # descending sampling order
    per_timestep: np.ndarray  # (n_timesteps, p)
    mean: np.ndarray  # (p,)
    partition: np.ndarray  # (p,) quintile index, 0 = top 20%


def contribution_series(trace: AttentionTrace) -> ContributionResult:
    """Per-timestep contributions, their uniform mean, and quintile ranks."""
    timesteps = trace.timesteps
    if not timesteps:
        raise ValidationError("trace contains no records")
    per_t = np.stack([parcel_contribution(trace, t) for t in timesteps])
    mean = per_t.mean(axis=0)
    partition = rank_and_partition(mean)
    return ContributionResult(timesteps=timesteps, per_timestep=per_t, mean=mean, partition=partition)


def roi_query_profile(trace: AttentionTrace, roi: Sequence[int], layer: int, t: int) -> np.ndarray:
    """Head- and ROI-averaged attention per spatial query at one layer."""
    roi = np.asarray(sorted(set(int(j) for j in roi)), dtype=np.int64)
    if roi.size == 0:
        raise ValidationError("ROI parcel index set must be nonempty")
    if roi.min() < 0 or roi.max() >= trace.num_parcels:
        raise ValidationError(f"ROI indices out of range [0, {trace.num_parcels})")
    if layer not in trace.layer_grids:
        raise ValidationError(f"unknown layer {layer}")
    profile = np.zeros(trace.queries_per_layer(layer), dtype=np.float64)
    for head in range(trace.num_heads):
        profile += trace.get(t, layer, head)[:, roi].sum(axis=1, dtype=np.float64)
    return profile / (trace.num_heads * roi.size)


def bilinear_resize(grid: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling with half-pixel centers (edge-clamped)."""
    in_h, in_w = grid.shape
    out_h, out_w = out_shape
    if out_h < in_h or out_w < in_w:
        raise DimensionError(f"output {out_shape} must be at least the input size {grid.shape}")

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = np.clip(src - lo, 0.0, 1.0)
        return lo, hi, frac

    y_lo, y_hi, fy = axis_coords(in_h, out_h)
    x_lo, x_hi, fx = axis_coords(in_w, out_w)
    top = grid[y_lo][:, x_lo] * (1 - fx)[None, :] + grid[y_lo][:, x_hi] * fx[None, :]
    bottom = grid[y_hi][:, x_lo] * (1 - fx)[None, :] + grid[y_hi][:, x_hi] * fx[None, :]
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


@dataclass
class ROIAttentionMap:
    t: int
    roi: tuple[int, ...]
    values: np.ndarray  # (H_img, W_img), nonnegative, sums to 1


def roi_attention_map(
    trace: AttentionTrace,
    roi: Sequence[int],
    t: int,
    image_size: tuple[int, int],
) -> ROIAttentionMap:
    """Where a parcel group directs attention in the image at timestep t.

    Each layer's query profile is reshaped to the layer grid, upsampled
    to image resolution, normalized to unit L1 mass (a zero-mass layer
    falls back to uniform; impossible post-softmax but guarded), and the
    layers are averaged uniformly.
    """
    trace.require_complete_at(t)
    out_h, out_w = image_size
    accum = np.zeros((out_h, out_w), dtype=np.float64)
    for layer in trace.layers:
        gh, gw = trace.layer_grids[layer]
        profile = roi_query_profile(trace, roi, layer, t).reshape(gh, gw)
        upsampled = bilinear_resize(profile, (out_h, out_w))
        mass = upsampled.sum()
        if mass <= 0.0:
            upsampled = np.full((out_h, out_w), 1.0 / (out_h * out_w))
        else:
            upsampled = upsampled / mass
        accum += upsampled
    return ROIAttentionMap(t=t, roi=tuple(sorted(set(int(j) for j in roi))), values=accum / trace.num_layers)


def rank_and_partition(mean_contribution: np.ndarray) -> np.ndarray:
    """Quintile label per parcel (0 = top 20% ... 4 = bottom 20%).

    Parcels sort by descending mean contribution, ties by ascending
    position index; the five partitions are contiguous with any remainder
    going to the earlier partitions.
    """
    values = np.asarray(mean_contribution, dtype=np.float64)
    p = values.shape[0]
    if p < 5:
        raise ValidationError(f"need at least 5 parcels to form quintiles, got {p}")
    order = np.lexsort((np.arange(p), -values))
    base, rem = divmod(p, 5)
    sizes = [base + (1 if i < rem else 0) for i in range(5)]
    labels = np.empty(p, dtype=np.int64)
    start = 0
    for quintile, size in enumerate(sizes):
        labels[order[start : start + size]] = quintile
        start += size
    return labels


def export_contribution_csv(result: ContributionResult, atlas: ParcelAtlas, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "parcel_id", "contribution"])
        for row, t in enumerate(result.timesteps):
            for i, parcel in enumerate(atlas.parcels):
                writer.writerow([t, parcel.id, f"{result.per_timestep[row, i]:.10e}"])


def export_partition_csv(result: ContributionResult, atlas: ParcelAtlas, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parcel_id", "hemisphere", "roi_label", "mean_contribution", "partition", "partition_name"])
        for i, parcel in enumerate(atlas.parcels):
            q = int(result.partition[i])
            writer.writerow(
                [
                    parcel.id,
                    parcel.hemisphere,
                    parcel.roi_label or "-",
                    f"{result.mean[i]:.10e}",
                    q,
                    PARTITION_NAMES[q],
                ]
            )


def save_map_grid(maps: dict[str, list[ROIAttentionMap]], path: str | Path) -> None:
    """Float32 grids for ROI maps across timesteps, keyed roi/timestep."""
    arrays = {}
    for label, series in maps.items():
        for m in series:
            arrays[f"map_{label}_t{m.t:04d}"] = m.values.astype(np.float32)
    np.savez_compressed(path, **arrays)
