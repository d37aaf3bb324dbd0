"""Image-quality metrics with pluggable feature extractors.

The report follows the usual low-level / high-level split: pixel
correlation, windowed SSIM, two-way identification accuracy under two
low-level and two high-level extractors, and correlation distance under
the high-level extractors. Desk-scale extractors (raw pixels, Gabor
energy, the encoder's random-conv bank, a small trained shape classifier)
stand in for large pretrained backbones; every report records which
extractor produced each column so values are never confused across
feature spaces.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy.signal import convolve2d
from sklearn.linear_model import LogisticRegression

from .encoder import EncoderModel, pearson
from .errors import DimensionError, ValidationError
from .synthetic import SHAPE_CLASSES, Scene

METRIC_COLUMNS = (
    "pixcorr",
    "ssim",
    "twc_low_a",
    "twc_low_b",
    "twc_high_a",
    "twc_high_b",
    "dist_a",
    "dist_b",
)


class FeatureExtractor(Protocol):
    name: str

    def __call__(self, images: np.ndarray) -> np.ndarray: ...


def pixcorr(recon: np.ndarray, truth: np.ndarray) -> float:
    """Pearson correlation over flattened pixels; 0 (with warning) if constant."""
    if recon.shape != truth.shape:
        raise DimensionError(f"image shapes differ: {recon.shape} vs {truth.shape}")
    rho = pearson(recon, truth)
    if np.isnan(rho):
        warnings.warn("pixcorr undefined for a constant image; reporting 0")
        return 0.0
    return rho


def _to_gray01(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> luma in [0, 1]."""
    img01 = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    return 0.299 * img01[0] + 0.587 * img01[1] + 0.114 * img01[2]


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(
    recon: np.ndarray,
    truth: np.ndarray,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Windowed SSIM on the grayscale conversion, data range 1.0.

    Images smaller than the window fall back to global statistics with a
    warning.
    """
    if recon.shape != truth.shape:
        raise DimensionError(f"image shapes differ: {recon.shape} vs {truth.shape}")
    x = _to_gray01(recon)
    y = _to_gray01(truth)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    if min(x.shape) < window_size:
        warnings.warn("image smaller than SSIM window; using global statistics")
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cov = ((x - mx) * (y - my)).mean()
        return float(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    w = _gaussian_window(window_size, sigma)
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    xx = convolve2d(x * x, w, mode="valid")
    yy = convolve2d(y * y, w, mode="valid")
    xy = convolve2d(x * y, w, mode="valid")
    var_x = xx - mu_x**2
    var_y = yy - mu_y**2
    cov = xy - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())


def _feature_correlation_matrix(recon_feats: np.ndarray, truth_feats: np.ndarray) -> np.ndarray:
    """corr[i, j] = Pearson(recon_i, truth_j); nan where variance is zero."""
    r = recon_feats - recon_feats.mean(axis=1, keepdims=True)
    t = truth_feats - truth_feats.mean(axis=1, keepdims=True)
    r_norm = np.sqrt((r * r).sum(axis=1))
    t_norm = np.sqrt((t * t).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (r @ t.T) / np.outer(r_norm, t_norm)
    return corr


def two_way_accuracy(
    recons: np.ndarray,
    truths: np.ndarray,
    extractor: FeatureExtractor,
    return_per_sample: bool = False,
):
    """Exhaustive two-way identification accuracy in feature space.

    Sample i wins against distractor j when its reconstruction's features
    correlate more with truth i than with truth j; ties (including
    undefined correlations) count one half.
    """
    n = recons.shape[0]
    if n < 2:
        raise ValidationError("two-way accuracy needs at least 2 samples")
    if truths.shape[0] != n:
        raise DimensionError("reconstructions and truths must align")
    corr = _feature_correlation_matrix(extractor(recons), extractor(truths))
    own = np.diag(corr)
    per_sample = np.empty(n, dtype=np.float64)
    for i in range(n):
        others = np.delete(corr[i], i)
        wins = np.zeros(n - 1)
        both = ~(np.isnan(own[i]) | np.isnan(others))
        wins[both] = (own[i] > others[both]).astype(np.float64) + 0.5 * (own[i] == others[both])
        wins[~both] = 0.5  # undefined comparisons are ties
        per_sample[i] = wins.mean()
    accuracy = float(per_sample.mean())
    return (accuracy, per_sample) if return_per_sample else accuracy


def feature_distance(
    recons: np.ndarray,
    truths: np.ndarray,
    extractor: FeatureExtractor,
    return_per_sample: bool = False,
):
    """Mean correlation distance 1 - rho between paired feature vectors."""
    if recons.shape[0] != truths.shape[0]:
        raise DimensionError("reconstructions and truths must align")
    rf, tf = extractor(recons), extractor(truths)
    per_sample = np.empty(recons.shape[0], dtype=np.float64)
    for i in range(recons.shape[0]):
        rho = pearson(rf[i], tf[i])
        if np.isnan(rho):
            warnings.warn(f"sample {i}: constant features, correlation distance undefined")
        per_sample[i] = 1.0 - rho
    return (float(per_sample.mean()), per_sample) if return_per_sample else float(per_sample.mean())


class PixelFeatures:
    name = "raw-pixels"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return images.reshape(images.shape[0], -1)


class GaborEnergyFeatures:
    """Quadrature Gabor energy pooled on a coarse grid of the gray image."""

    name = "gabor-energy"

    def __init__(self, orientations: int = 4, frequencies: tuple[float, ...] = (0.15, 0.3),
                 kernel: int = 9, pool_grid: int = 4):
        self.pool_grid = pool_grid
        ax = np.arange(kernel, dtype=np.float64) - (kernel - 1) / 2.0
        xx, yy = np.meshgrid(ax, ax)
        sigma = kernel / 4.0
        envelope = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
        self.banks = []
        for o in range(orientations):
            theta = np.pi * o / orientations
            u = xx * np.cos(theta) + yy * np.sin(theta)
            for freq in frequencies:
                even = envelope * np.cos(2 * np.pi * freq * u)
                odd = envelope * np.sin(2 * np.pi * freq * u)
                self.banks.append((even - even.mean(), odd))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        n = images.shape[0]
        g = self.pool_grid
        feats = []
        for i in range(n):
            gray = _to_gray01(images[i])
            maps = []
            for even, odd in self.banks:
                e = convolve2d(gray, even, mode="same")
                o = convolve2d(gray, odd, mode="same")
                maps.append(np.sqrt(e**2 + o**2))
            h, w = gray.shape
            ys = np.linspace(0, h, g + 1).astype(int)
            xs = np.linspace(0, w, g + 1).astype(int)
            pooled = [
                m[ys[a] : ys[a + 1], xs[b] : xs[b + 1]].mean()
                for m in maps
                for a in range(g)
                for b in range(g)
            ]
            feats.append(pooled)
        return np.asarray(feats, dtype=np.float64)


class EncoderBackboneFeatures:
    """The brain encoder's random-conv bank reused as a feature space."""

    name = "encoder-backbone"

    def __init__(self, model: EncoderModel):
        self._features = model.features

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return self._features(np.asarray(images, dtype=np.float64))


class ShapeClassifierFeatures:
    """Log-probabilities of a classifier trained on the synthetic shape classes."""

    name = "shape-classifier"

    def __init__(self, backbone: Callable[[np.ndarray], np.ndarray], classifier: LogisticRegression):
        self.backbone = backbone
        self.classifier = classifier

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return self.classifier.decision_function(self.backbone(np.asarray(images, dtype=np.float64)))


def fit_shape_classifier(
    scenes: Sequence[Scene],
    backbone: Callable[[np.ndarray], np.ndarray],
    seed: int = 0,
) -> ShapeClassifierFeatures:
    images = np.stack([s.image for s in scenes])
    labels = np.array([SHAPE_CLASSES.index(s.params.shape) for s in scenes])
    clf = LogisticRegression(max_iter=2000, C=1.0, random_state=seed)
    clf.fit(backbone(images), labels)
    return ShapeClassifierFeatures(backbone=backbone, classifier=clf)


@dataclass
class MetricReport:
    per_sample: dict[str, np.ndarray]
    aggregates: dict[str, float]
    extractor_ids: dict[str, str]
    n_samples: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample"] + list(METRIC_COLUMNS))
            for i in range(self.n_samples):
                writer.writerow([i] + [f"{self.per_sample[c][i]:.8e}" for c in METRIC_COLUMNS])
            writer.writerow(["aggregate"] + [f"{self.aggregates[c]:.8e}" for c in METRIC_COLUMNS])
            writer.writerow(["extractor"] + [self.extractor_ids.get(c, "-") for c in METRIC_COLUMNS])

    def render_table(self, label: str = "reconstruction") -> str:
        head = (
            f"{'Method':<18}"
            + "".join(f"{c:>12}" for c in ("PixCorr", "SSIM", "2WC-la", "2WC-lb"))
            + "".join(f"{c:>12}" for c in ("2WC-ha", "2WC-hb", "dist-a", "dist-b"))
        )
        rule = "-" * len(head)
        vals = [self.aggregates[c] for c in METRIC_COLUMNS]
        row = f"{label:<18}" + "".join(f"{v:>12.4f}" for v in vals)
        extractors = ", ".join(f"{k}={v}" for k, v in sorted(set(self.extractor_ids.items())))
        return "\n".join([head, rule, row, rule, f"extractors: {extractors}"])


def compute_report(
    recons: np.ndarray,
    truths: np.ndarray,
    low_extractors: tuple[FeatureExtractor, FeatureExtractor],
    high_extractors: tuple[FeatureExtractor, FeatureExtractor],
) -> MetricReport:
    """All eight metric columns for a matched reconstruction set."""
    n = recons.shape[0]
    per_sample: dict[str, np.ndarray] = {}
    per_sample["pixcorr"] = np.array([pixcorr(recons[i], truths[i]) for i in range(n)])
    per_sample["ssim"] = np.array([ssim(recons[i], truths[i]) for i in range(n)])
    ids = {"pixcorr": "pixels", "ssim": "grayscale"}
    for column, extractor in (
        ("twc_low_a", low_extractors[0]),
        ("twc_low_b", low_extractors[1]),
        ("twc_high_a", high_extractors[0]),
        ("twc_high_b", high_extractors[1]),
    ):
        _, per = two_way_accuracy(recons, truths, extractor, return_per_sample=True)
        per_sample[column] = per
        ids[column] = extractor.name
    for column, extractor in (("dist_a", high_extractors[0]), ("dist_b", high_extractors[1])):
        _, per = feature_distance(recons, truths, extractor, return_per_sample=True)
        per_sample[column] = per
        ids[column] = extractor.name
    aggregates = {c: float(per_sample[c].mean()) for c in METRIC_COLUMNS}
    return MetricReport(per_sample=per_sample, aggregates=aggregates, extractor_ids=ids, n_samples=n)
