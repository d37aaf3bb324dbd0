"""Synthetic scenes and parcel responses with a known ground-truth encoding.

Scenes are procedurally rendered RGB images of one colored shape on a
tinted background, so shape class (semantic) and color/position/size
(low-level) attributes are separable. Responses are generated by
per-parcel linear maps of the scene feature vector plus Gaussian noise;
parcels outside ``informative_parcel_ids`` receive pure noise. Everything
is reproducible from the seed, with per-stimulus RNG streams derived from
(seed, stimulus index).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .atlas import BrainSample, Parcel, ParcelAtlas, pad_parcel_responses
from .errors import DimensionError, ValidationError

SHAPE_CLASSES = ("circle", "square", "triangle")

# Feature vector layout: [shape one-hot (3)] + [fill r,g,b] + [cx, cy, size]
# + [background r,g,b].
FEATURE_DIM = 12
HIGH_FEATURE_SLICE = slice(0, 3)
LOW_FEATURE_SLICE = slice(3, 12)

# ROI labels the synthetic atlas uses; low-level labels gate parcels onto
# color/position features, high-level labels onto the shape class.
LOW_LEVEL_LABELS = ("V1", "V2", "V3", "V4")
HIGH_LEVEL_LABELS = ("Face", "Body", "Scene", "Word")


@dataclass(frozen=True)
class SceneParams:
    shape: str
    color: tuple[float, float, float]
    center: tuple[float, float]
    size: float
    background: tuple[float, float, float]

    def __post_init__(self):
        if self.shape not in SHAPE_CLASSES:
            raise ValidationError(f"unknown shape class {self.shape!r}")


@dataclass(frozen=True)
class Scene:
    stimulus_id: str
    params: SceneParams
    image: np.ndarray  # float32 (3, H, W) in [-1, 1]


def scene_feature_vector(params: SceneParams) -> np.ndarray:
    onehot = np.zeros(3, dtype=np.float64)
    onehot[SHAPE_CLASSES.index(params.shape)] = 1.0
    return np.concatenate(
        [
            onehot,
            np.asarray(params.color, dtype=np.float64),
            np.asarray([params.center[0], params.center[1], params.size], dtype=np.float64),
            np.asarray(params.background, dtype=np.float64),
        ]
    )


def render_scene(params: SceneParams, resolution: int = 32) -> np.ndarray:
    """Rasterize a scene to float32 (3, res, res) in [-1, 1].

    Shapes get a one-pixel soft edge so images are not strictly binary.
    """
    coords = (np.arange(resolution) + 0.5) / resolution
    xx, yy = np.meshgrid(coords, coords)
    cx, cy = params.center
    r = params.size
    edge = 1.0 / resolution
    if params.shape == "circle":
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        inside = (r - dist) / edge
    elif params.shape == "square":
        dist = np.maximum(np.abs(xx - cx), np.abs(yy - cy))
        inside = (r - dist) / edge
    else:  # triangle: apex up, inscribed in the size box
        dy = (yy - (cy - r)) / (2 * r)  # 0 at apex row, 1 at base
        half_width = np.clip(dy, 0.0, 1.0) * r
        horiz = half_width - np.abs(xx - cx)
        vert = np.minimum(yy - (cy - r), (cy + r) - yy)
        inside = np.minimum(horiz, vert) / edge
    alpha = np.clip(inside, 0.0, 1.0)

    img = np.empty((3, resolution, resolution), dtype=np.float64)
    for c in range(3):
        img[c] = params.background[c] + alpha * (params.color[c] - params.background[c])
    return (img * 2.0 - 1.0).astype(np.float32)


def _draw_params(rng: np.random.Generator) -> SceneParams:
    shape = SHAPE_CLASSES[int(rng.integers(len(SHAPE_CLASSES)))]
    color = tuple(rng.uniform(0.35, 1.0, size=3).round(4))
    center = tuple(rng.uniform(0.3, 0.7, size=2).round(4))
    size = round(float(rng.uniform(0.14, 0.28)), 4)
    background = tuple(rng.uniform(0.02, 0.22, size=3).round(4))
    return SceneParams(shape=shape, color=color, center=center, size=size, background=background)


def generate_scenes(count: int, seed: int, resolution: int = 32, id_prefix: str = "scene") -> list[Scene]:
    if count < 1:
        raise ValidationError("count must be >= 1")
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, 11, i])
        params = _draw_params(rng)
        scenes.append(
            Scene(
                stimulus_id=f"{id_prefix}_{i:05d}",
                params=params,
                image=render_scene(params, resolution),
            )
        )
    return scenes


@dataclass
class SyntheticEncodingSpec:
    """Configuration of the ground-truth encoding.

    ``weights`` may pre-specify per-parcel (feature_dim, vertex_count)
    matrices; otherwise they are drawn from ``seed``. Non-informative
    parcels always carry zero signal weight.
    """

    image_feature_dim: int = FEATURE_DIM
    noise_std: float = 0.0
    informative_parcel_ids: frozenset[int] = field(default_factory=frozenset)
    seed: int = 0
    weights: Optional[dict[int, np.ndarray]] = None

    def __post_init__(self):
        if self.image_feature_dim != FEATURE_DIM:
            raise ValidationError(
                f"scene features have dimension {FEATURE_DIM}; got image_feature_dim={self.image_feature_dim}"
            )
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        self.informative_parcel_ids = frozenset(self.informative_parcel_ids)


@dataclass
class GroundTruth:
    """Drawn encoding weights, keyed by parcel id (zeros if non-informative)."""

    weights: dict[int, np.ndarray]
    informative_parcel_ids: frozenset[int]
    noise_std: float
    seed: int


def _feature_rows_for_label(label: Optional[str]) -> slice:
    if label in LOW_LEVEL_LABELS:
        return LOW_FEATURE_SLICE
    if label in HIGH_LEVEL_LABELS:
        return HIGH_FEATURE_SLICE
    return slice(0, FEATURE_DIM)


def draw_ground_truth(spec: SyntheticEncodingSpec, atlas: ParcelAtlas) -> GroundTruth:
    """Draw (or validate) per-parcel weight matrices.

    Labeled low-level parcels read only the color/position/background
    features, labeled high-level parcels only the shape one-hot; unlabeled
    informative parcels read the full vector.
    """
    unknown = spec.informative_parcel_ids - set(atlas.parcel_ids)
    if unknown:
        raise ValidationError(f"informative parcel ids not in atlas: {sorted(unknown)}")
    weights: dict[int, np.ndarray] = {}
    rng = np.random.default_rng([spec.seed, 7])
    for parcel in atlas.parcels:
        w = np.zeros((FEATURE_DIM, parcel.vertex_count), dtype=np.float64)
        if parcel.id in spec.informative_parcel_ids:
            if spec.weights is not None and parcel.id in spec.weights:
                given = np.asarray(spec.weights[parcel.id], dtype=np.float64)
                if given.shape != w.shape:
                    raise DimensionError(
                        f"parcel {parcel.id}: weight matrix must be {w.shape}, got {given.shape}"
                    )
                w = given.copy()
            else:
                rows = _feature_rows_for_label(parcel.roi_label)
                n_rows = rows.stop - rows.start
                w[rows] = rng.normal(0.0, 1.0 / np.sqrt(n_rows), size=(n_rows, parcel.vertex_count))
        weights[parcel.id] = w
    return GroundTruth(
        weights=weights,
        informative_parcel_ids=spec.informative_parcel_ids,
        noise_std=spec.noise_std,
        seed=spec.seed,
    )


def generate_synthetic_dataset(
    spec: SyntheticEncodingSpec,
    scenes: Sequence[Scene],
    atlas: ParcelAtlas,
) -> tuple[list[BrainSample], GroundTruth]:
    """Responses for each scene under the ground-truth encoding.

    Informative parcels: features @ W + N(0, noise_std^2); others pure
    N(0, noise_std^2). Per-stimulus noise streams come from
    (seed, stimulus index) so generation order does not matter.
    """
    if not scenes:
        raise ValidationError("scenes must be nonempty")
    truth = draw_ground_truth(spec, atlas)
    samples = []
    for idx, scene in enumerate(scenes):
        feats = scene_feature_vector(scene.params)
        rng = np.random.default_rng([spec.seed, 1009, idx])
        raw = []
        for parcel in atlas.parcels:
            signal = feats @ truth.weights[parcel.id]
            noise = rng.normal(0.0, spec.noise_std, size=parcel.vertex_count) if spec.noise_std > 0 else 0.0
            raw.append((signal + noise).astype(np.float32))
        samples.append(pad_parcel_responses(raw, atlas, stimulus_id=scene.stimulus_id))
    return samples, truth


def build_synthetic_atlas(
    n_low: int = 4,
    n_high: int = 4,
    n_noise: int = 8,
    vertex_range: tuple[int, int] = (6, 12),
    seed: int = 0,
) -> ParcelAtlas:
    """Labeled desk-scale atlas, split evenly across hemispheres.

    Informative parcels get descending SNR above every noise parcel so
    top-k selection keeps them. Counts must all be even.
    """
    for name, n in (("n_low", n_low), ("n_high", n_high), ("n_noise", n_noise)):
        if n % 2 != 0:
            raise ValidationError(f"{name} must be even to split across hemispheres, got {n}")
    rng = np.random.default_rng([seed, 3])
    parcels = []
    next_id = 0

    def add(label: Optional[str], hemisphere: str, snr: float):
        nonlocal next_id
        vc = int(rng.integers(vertex_range[0], vertex_range[1] + 1))
        parcels.append(Parcel(id=next_id, hemisphere=hemisphere, vertex_count=vc, snr=snr, roi_label=label))
        next_id += 1

    labels = [LOW_LEVEL_LABELS[i % len(LOW_LEVEL_LABELS)] for i in range(n_low)]
    labels += [HIGH_LEVEL_LABELS[i % len(HIGH_LEVEL_LABELS)] for i in range(n_high)]
    labels += [None] * n_noise
    per_hemi = len(labels) // 2
    snr_values = np.linspace(4.0, 1.0, per_hemi)
    for h, hemisphere in enumerate(("left", "right")):
        hemi_labels = labels[h::2]
        for j, label in enumerate(hemi_labels):
            add(label, hemisphere, float(snr_values[j]))
    return ParcelAtlas(tuple(parcels))


def informative_and_noise_ids(atlas: ParcelAtlas, truth: GroundTruth) -> tuple[list[int], list[int]]:
    informative = [p.id for p in atlas.parcels if p.id in truth.informative_parcel_ids]
    noise = [p.id for p in atlas.parcels if p.id not in truth.informative_parcel_ids]
    return informative, noise
