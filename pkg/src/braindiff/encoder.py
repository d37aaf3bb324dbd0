"""Image-to-brain-response encoder for ranking candidate reconstructions.

A fixed random-convolution feature bank feeds a ridge-regularized linear
read-out onto the flattened valid-vertex response vector. Candidates are
scored by the Pearson correlation between predicted and measured
responses; the feature bank is pluggable so a stronger backbone can be
dropped in behind the same interface.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .atlas import BrainSample, ParcelAtlas
from .errors import DimensionError, ValidationError


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; nan when either vector has zero variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"vectors must match: {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return float("nan")
    return float((da * db).sum() / denom)


@dataclass(frozen=True)
class EncoderConfig:
    n_filters: int = 40
    kernel: int = 5
    stride: int = 2
    pool_grid: int = 4
    penalty: float = 1.0
    seed: int = 0
    val_fraction: float = 0.2


class RandomConvFeatures:
    """Frozen random convolution bank with signed ReLU and grid pooling."""

    name = "random-conv"

    def __init__(self, config: EncoderConfig, image_shape: tuple[int, int, int]):
        self.config = config
        self.image_shape = image_shape
        c, _, _ = image_shape
        rng = np.random.default_rng([config.seed, 31])
        k = config.kernel
        self.filters = rng.normal(0.0, 1.0 / np.sqrt(c * k * k), size=(config.n_filters, c, k, k))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        n, c, h, w = images.shape
        if (c, h, w) != self.image_shape:
            raise DimensionError(f"expected images {self.image_shape}, got {(c, h, w)}")
        k, s = self.config.kernel, self.config.stride
        windows = np.lib.stride_tricks.sliding_window_view(images, (k, k), axis=(2, 3))
        windows = windows[:, :, ::s, ::s]  # (n, c, oh, ow, k, k)
        oh, ow = windows.shape[2], windows.shape[3]
        patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * k * k)
        responses = patches @ self.filters.reshape(self.config.n_filters, -1).T  # (n, oh*ow, F)
        responses = responses.reshape(n, oh, ow, self.config.n_filters)
        feats = np.concatenate([np.maximum(responses, 0.0), np.maximum(-responses, 0.0)], axis=-1)
        g = self.config.pool_grid
        ys = np.linspace(0, oh, g + 1).astype(int)
        xs = np.linspace(0, ow, g + 1).astype(int)
        pooled = np.empty((n, g, g, feats.shape[-1]))
        for i in range(g):
            for j in range(g):
                pooled[:, i, j] = feats[:, ys[i] : ys[i + 1], xs[j] : xs[j + 1]].mean(axis=(1, 2))
        return pooled.reshape(n, -1)


@dataclass
class EncoderModel:
    features: RandomConvFeatures
    readout: np.ndarray  # (D, V)
    feature_mean: np.ndarray  # (D,)
    target_mean: np.ndarray  # (V,)
    atlas_parcel_ids: list[int]
    config: EncoderConfig

    @property
    def output_dim(self) -> int:
        return self.readout.shape[1]

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Predicted flattened valid-vertex responses, (n, V)."""
        phi = self.features(images)
        return (phi - self.feature_mean) @ self.readout + self.target_mean

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path,
            filters=self.features.filters,
            readout=self.readout,
            feature_mean=self.feature_mean,
            target_mean=self.target_mean,
            atlas_parcel_ids=np.asarray(self.atlas_parcel_ids, dtype=np.int64),
            image_shape=np.asarray(self.features.image_shape, dtype=np.int64),
            config=np.array(
                [
                    self.config.n_filters,
                    self.config.kernel,
                    self.config.stride,
                    self.config.pool_grid,
                    self.config.seed,
                ],
                dtype=np.int64,
            ),
            penalty=np.array(self.config.penalty),
            val_fraction=np.array(self.config.val_fraction),
        )

    @classmethod
    def load(cls, path: str | Path) -> "EncoderModel":
        with np.load(path, allow_pickle=False) as data:
            cfg_ints = data["config"]
            config = EncoderConfig(
                n_filters=int(cfg_ints[0]),
                kernel=int(cfg_ints[1]),
                stride=int(cfg_ints[2]),
                pool_grid=int(cfg_ints[3]),
                seed=int(cfg_ints[4]),
                penalty=float(data["penalty"]),
                val_fraction=float(data["val_fraction"]),
            )
            features = RandomConvFeatures(config, tuple(int(v) for v in data["image_shape"]))
            features.filters = data["filters"]
            return cls(
                features=features,
                readout=data["readout"],
                feature_mean=data["feature_mean"],
                target_mean=data["target_mean"],
                atlas_parcel_ids=[int(i) for i in data["atlas_parcel_ids"]],
                config=config,
            )


@dataclass
class FitReport:
    train_correlation: float
    val_correlation: Optional[float]
    degenerate_vertices: int


def _ridge_solve(phi: np.ndarray, targets: np.ndarray, penalty: float) -> np.ndarray:
    n, d = phi.shape
    if d <= n:
        gram = phi.T @ phi + penalty * np.eye(d)
        return np.linalg.solve(gram, phi.T @ targets)
    # dual form when features outnumber samples
    gram = phi @ phi.T + penalty * np.eye(n)
    return phi.T @ np.linalg.solve(gram, targets)


def _mean_vertex_correlation(pred: np.ndarray, target: np.ndarray) -> tuple[float, int]:
    pv = pred - pred.mean(axis=0)
    tv = target - target.mean(axis=0)
    denom = np.sqrt((pv * pv).sum(axis=0) * (tv * tv).sum(axis=0))
    degenerate = int((denom == 0.0).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (pv * tv).sum(axis=0) / denom
    finite = corr[np.isfinite(corr)]
    return (float(finite.mean()) if finite.size else float("nan")), degenerate


def flatten_measurements(samples: Sequence[BrainSample]) -> np.ndarray:
    """Stack flattened valid-vertex vectors into (n, V)."""
    rows = [s.flat_valid() for s in samples]
    sizes = {r.shape[0] for r in rows}
    if len(sizes) != 1:
        raise DimensionError("samples disagree on valid vertex count")
    return np.stack(rows).astype(np.float64)


def fit_encoder(
    images: np.ndarray,
    samples: Sequence[BrainSample],
    atlas: ParcelAtlas,
    config: EncoderConfig = EncoderConfig(),
) -> tuple[EncoderModel, FitReport]:
    """Ridge read-out from image features to flattened valid vertices."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] != len(samples):
        raise DimensionError(f"{images.shape[0]} images but {len(samples)} samples")
    if len(samples) < 2:
        raise ValidationError("need at least 2 paired samples to fit the encoder")
    targets = flatten_measurements(samples)
    if targets.shape[1] != atlas.total_valid_vertices:
        raise DimensionError("measurement width disagrees with atlas valid vertex count")

    n = images.shape[0]
    n_val = int(round(n * config.val_fraction))
    rng = np.random.default_rng([config.seed, 97])
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size < 2:
        train_idx, val_idx = perm, perm[:0]

    features = RandomConvFeatures(config, tuple(images.shape[1:]))
    phi = features(images)
    phi_mean = phi[train_idx].mean(axis=0)
    y_mean = targets[train_idx].mean(axis=0)
    readout = _ridge_solve(phi[train_idx] - phi_mean, targets[train_idx] - y_mean, config.penalty)

    model = EncoderModel(
        features=features,
        readout=readout,
        feature_mean=phi_mean,
        target_mean=y_mean,
        atlas_parcel_ids=atlas.parcel_ids,
        config=config,
    )
    train_corr, degenerate = _mean_vertex_correlation(model.predict(images[train_idx]), targets[train_idx])
    if degenerate:
        warnings.warn(f"{degenerate} vertices have constant targets; correlation undefined there")
    val_corr = None
    if val_idx.size >= 2:
        val_corr, _ = _mean_vertex_correlation(model.predict(images[val_idx]), targets[val_idx])
    return model, FitReport(train_correlation=train_corr, val_correlation=val_corr, degenerate_vertices=degenerate)


@dataclass
class RankedCandidate:
    index: int
    score: float
    rank: int
    selected: bool


def rank_candidates(
    candidates: Sequence[np.ndarray],
    measured: BrainSample,
    model: EncoderModel,
) -> list[RankedCandidate]:
    """Order candidates by Pearson(predicted response, measurement).

    Zero-variance predictions or measurements score -inf and rank last;
    ties keep candidate-index order.
    """
    if not candidates:
        raise ValidationError("need at least one candidate")
    target = measured.flat_valid().astype(np.float64)
    preds = model.predict(np.stack(candidates))
    scores = []
    for i in range(preds.shape[0]):
        rho = pearson(preds[i], target)
        if np.isnan(rho):
            warnings.warn(f"candidate {i}: zero-variance prediction or measurement; ranked last")
            rho = float("-inf")
        scores.append(rho)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranked = [
        RankedCandidate(index=i, score=scores[i], rank=r, selected=(r == 0))
        for r, i in enumerate(order)
    ]
    return ranked


def select_best(candidates: Sequence[np.ndarray], measured: BrainSample, model: EncoderModel) -> int:
    """Index of the highest-scoring candidate."""
    ranked = rank_candidates(candidates, measured, model)
    return next(rc.index for rc in ranked if rc.selected)


def correlation_report(
    decoded: np.ndarray,
    stimuli: np.ndarray,
    measurements: Sequence[BrainSample],
    model: EncoderModel,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample Pearson of predicted activity vs measurement, for the
    decoded images and for the true stimuli."""
    if decoded.shape[0] != stimuli.shape[0] or decoded.shape[0] != len(measurements):
        raise DimensionError("decoded, stimuli and measurements must align")
    pred_decoded = model.predict(decoded)
    pred_stimuli = model.predict(stimuli)
    rho_decoded = np.array(
        [pearson(pred_decoded[i], measurements[i].flat_valid()) for i in range(len(measurements))]
    )
    rho_stimulus = np.array(
        [pearson(pred_stimuli[i], measurements[i].flat_valid()) for i in range(len(measurements))]
    )
    return rho_decoded, rho_stimulus
