"""Parcel atlas and per-stimulus brain samples.

A parcel is a group of cortical vertices treated as one conditioning unit.
The atlas carries per-parcel metadata (hemisphere, vertex count, SNR,
optional ROI label); responses are stored per stimulus as a padded
``p x v_max`` matrix with a validity mask marking real vertices.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, ValidationError

HEMISPHERES = ("left", "right")


@dataclass(frozen=True)
class Parcel:
    id: int
    hemisphere: str
    vertex_count: int
    snr: float
    roi_label: Optional[str] = None

    def __post_init__(self):
        if self.hemisphere not in HEMISPHERES:
            raise ValidationError(f"parcel {self.id}: hemisphere must be one of {HEMISPHERES}, got {self.hemisphere!r}")
        if self.vertex_count < 1:
            raise ValidationError(f"parcel {self.id}: vertex_count must be >= 1, got {self.vertex_count}")
        if not np.isfinite(self.snr) or self.snr < 0:
            raise ValidationError(f"parcel {self.id}: snr must be finite and >= 0, got {self.snr}")


@dataclass(frozen=True)
class ParcelAtlas:
    parcels: tuple[Parcel, ...]

    def __post_init__(self):
        object.__setattr__(self, "parcels", tuple(self.parcels))
        if not self.parcels:
            raise ValidationError("atlas must contain at least one parcel")
        ids = [p.id for p in self.parcels]
        if len(set(ids)) != len(ids):
            raise ValidationError("parcel ids must be unique")

    @property
    def size(self) -> int:
        return len(self.parcels)

    @property
    def v_max(self) -> int:
        return max(p.vertex_count for p in self.parcels)

    @property
    def parcel_ids(self) -> list[int]:
        return [p.id for p in self.parcels]

    @property
    def vertex_counts(self) -> np.ndarray:
        return np.array([p.vertex_count for p in self.parcels], dtype=np.int64)

    @property
    def total_valid_vertices(self) -> int:
        return int(self.vertex_counts.sum())

    def index_of(self, parcel_id: int) -> int:
        for i, p in enumerate(self.parcels):
            if p.id == parcel_id:
                return i
        raise ValidationError(f"unknown parcel id {parcel_id}")

    def hemisphere_parcels(self, hemisphere: str) -> list[Parcel]:
        return [p for p in self.parcels if p.hemisphere == hemisphere]

    def roi_labels(self) -> list[str]:
        """Distinct ROI labels present, in first-appearance order."""
        seen: list[str] = []
        for p in self.parcels:
            if p.roi_label is not None and p.roi_label not in seen:
                seen.append(p.roi_label)
        return seen

    def parcel_ids_for_label(self, label: str) -> list[int]:
        return [p.id for p in self.parcels if p.roi_label == label]

    def valid_mask(self) -> np.ndarray:
        """Boolean (p, v_max) mask, rows left-aligned per vertex_count."""
        mask = np.zeros((self.size, self.v_max), dtype=bool)
        for i, p in enumerate(self.parcels):
            mask[i, : p.vertex_count] = True
        return mask


@dataclass
class BrainSample:
    """One stimulus's padded parcel responses.

    ``responses`` is float32 (p, v_max), zero at padded positions;
    ``valid`` marks real vertices (left-aligned per parcel row).
    """

    stimulus_id: str
    responses: np.ndarray
    valid: np.ndarray
    repetitions_averaged: int = 1

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.responses.shape != self.valid.shape or self.responses.ndim != 2:
            raise DimensionError(
                f"responses {self.responses.shape} and valid {self.valid.shape} must be matching 2-D matrices"
            )
        if self.repetitions_averaged < 1:
            raise ValidationError("repetitions_averaged must be >= 1")
        if np.any(self.responses[~self.valid] != 0.0):
            raise ValidationError("padded (invalid) response entries must be zero")

    @property
    def num_parcels(self) -> int:
        return self.responses.shape[0]

    def flat_valid(self) -> np.ndarray:
        """Responses at valid positions, concatenated in parcel order."""
        return self.responses[self.valid]


def select_top_k_parcels(atlas: ParcelAtlas, k: int) -> ParcelAtlas:
    """Keep the k highest-SNR parcels per hemisphere (2k total).

    Ties break toward the lower parcel id. Output order: left hemisphere
    by descending SNR, then right.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    selected: list[Parcel] = []
    for hemi in HEMISPHERES:
        group = atlas.hemisphere_parcels(hemi)
        if len(group) < k:
            raise DimensionError(f"hemisphere {hemi!r} has {len(group)} parcels, need at least k={k}")
        group = sorted(group, key=lambda p: (-p.snr, p.id))
        selected.extend(group[:k])
    return ParcelAtlas(tuple(selected))


def pad_parcel_responses(
    raw: Sequence[np.ndarray],
    atlas: ParcelAtlas,
    stimulus_id: str = "",
    repetitions_averaged: int = 1,
) -> BrainSample:
    """Pad per-parcel vertex vectors to (p, v_max) with zeros past each count."""
    if len(raw) != atlas.size:
        raise DimensionError(f"got {len(raw)} response vectors for {atlas.size} parcels")
    v_max = atlas.v_max
    responses = np.zeros((atlas.size, v_max), dtype=np.float32)
    for i, (vec, parcel) in enumerate(zip(raw, atlas.parcels)):
        vec = np.asarray(vec, dtype=np.float32).ravel()
        if vec.shape[0] != parcel.vertex_count:
            raise DimensionError(
                f"parcel {parcel.id}: expected {parcel.vertex_count} vertices, got {vec.shape[0]}"
            )
        responses[i, : parcel.vertex_count] = vec
    return BrainSample(
        stimulus_id=stimulus_id,
        responses=responses,
        valid=atlas.valid_mask(),
        repetitions_averaged=repetitions_averaged,
    )


def unpad_responses(sample: BrainSample) -> list[np.ndarray]:
    """Inverse of padding: per-parcel vectors with the padded tail dropped."""
    return [sample.responses[i, sample.valid[i]] for i in range(sample.num_parcels)]


def average_repetitions(samples: Sequence[BrainSample]) -> BrainSample:
    """Element-wise mean of repeated measurements of one stimulus."""
    if not samples:
        raise ValidationError("need at least one sample to average")
    first = samples[0]
    if len(samples) == 1:
        return dataclasses.replace(first)
    ids = {s.stimulus_id for s in samples}
    if len(ids) != 1:
        raise ValidationError(f"cannot average across different stimuli: {sorted(ids)}")
    for s in samples[1:]:
        if s.responses.shape != first.responses.shape or not np.array_equal(s.valid, first.valid):
            raise DimensionError("all repetitions must share the same atlas shape and valid mask")
    # accumulate at float64 so the result is permutation-stable after the cast
    mean = np.mean([s.responses.astype(np.float64) for s in samples], axis=0).astype(np.float32)
    mean[~first.valid] = 0.0
    return BrainSample(
        stimulus_id=first.stimulus_id,
        responses=mean,
        valid=first.valid.copy(),
        repetitions_averaged=len(samples),
    )


def estimate_vertex_snr(measurements: np.ndarray) -> np.ndarray:
    """Per-vertex SNR from repeated measurements.

    ``measurements`` is (n_stimuli, n_repetitions, n_vertices). SNR is the
    variance over stimuli of the repetition mean, divided by the mean
    within-repetition residual variance. Vertices with zero residual
    variance get inf (or 0 when the signal variance is also zero).
    """
    measurements = np.asarray(measurements, dtype=np.float64)
    if measurements.ndim != 3:
        raise DimensionError("measurements must be (n_stimuli, n_repetitions, n_vertices)")
    n_stim, n_rep, _ = measurements.shape
    if n_stim < 2 or n_rep < 2:
        raise ValidationError("need >= 2 stimuli and >= 2 repetitions to estimate SNR")
    rep_mean = measurements.mean(axis=1)
    signal_var = rep_mean.var(axis=0, ddof=1)
    noise_var = measurements.var(axis=1, ddof=1).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = signal_var / noise_var
    snr[np.isnan(snr)] = 0.0
    return snr


def atlas_with_estimated_snr(atlas: ParcelAtlas, measurements: Iterable[np.ndarray]) -> ParcelAtlas:
    """Replace each parcel's SNR with the mean vertex-wise estimate.

    ``measurements`` yields one (n_stimuli, n_repetitions, vertex_count)
    array per parcel, in atlas order.
    """
    parcels = []
    measurements = list(measurements)
    if len(measurements) != atlas.size:
        raise DimensionError(f"got {len(measurements)} measurement blocks for {atlas.size} parcels")
    for parcel, block in zip(atlas.parcels, measurements):
        block = np.asarray(block, dtype=np.float64)
        if block.shape[2] != parcel.vertex_count:
            raise DimensionError(f"parcel {parcel.id}: measurement block has {block.shape[2]} vertices")
        snr = estimate_vertex_snr(block)
        finite = snr[np.isfinite(snr)]
        value = float(finite.mean()) if finite.size else 0.0
        parcels.append(dataclasses.replace(parcel, snr=value))
    return ParcelAtlas(tuple(parcels))


def subset_to_atlas(sample: BrainSample, atlas: ParcelAtlas, sub_atlas: ParcelAtlas) -> BrainSample:
    """Reindex a sample from ``atlas`` onto a selected sub-atlas.

    Rows are reordered to the sub-atlas parcel order and columns trimmed
    to its (possibly smaller) v_max; valid entries are left-aligned so no
    real vertex is lost.
    """
    if sample.responses.shape != (atlas.size, atlas.v_max):
        raise DimensionError(
            f"sample shape {sample.responses.shape} does not match source atlas ({atlas.size}, {atlas.v_max})"
        )
    rows = [atlas.index_of(p.id) for p in sub_atlas.parcels]
    v_max = sub_atlas.v_max
    responses = sample.responses[rows, :v_max].copy()
    valid = sub_atlas.valid_mask()
    responses[~valid] = 0.0
    return BrainSample(
        stimulus_id=sample.stimulus_id,
        responses=responses,
        valid=valid,
        repetitions_averaged=sample.repetitions_averaged,
    )


def stack_responses(samples: Sequence[BrainSample]) -> np.ndarray:
    """Stack padded response matrices into (n, p, v_max) float32."""
    if not samples:
        raise ValidationError("need at least one sample")
    shapes = {s.responses.shape for s in samples}
    if len(shapes) != 1:
        raise DimensionError(f"samples have inconsistent shapes: {sorted(shapes)}")
    return np.stack([s.responses for s in samples]).astype(np.float32)
