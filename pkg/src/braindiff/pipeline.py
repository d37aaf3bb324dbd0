"""Experiment assembly shared by the CLI verbs and ablation harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .atlas import BrainSample, ParcelAtlas, select_top_k_parcels, subset_to_atlas
from .config import ExperimentConfig
from .encoder import EncoderModel, fit_encoder
from .errors import ConfigError
from .metrics import (
    EncoderBackboneFeatures,
    GaborEnergyFeatures,
    PixelFeatures,
    ShapeClassifierFeatures,
    fit_shape_classifier,
)
from .schedule import NoiseSchedule
from .seeds import stable_seed
from .storage import load_scenes, read_atlas_manifest, read_response_archive
from .synthetic import (
    GroundTruth,
    Scene,
    SyntheticEncodingSpec,
    build_synthetic_atlas,
    generate_scenes,
    generate_synthetic_dataset,
)
from .tokenizer import ParcelLinearMaps
from .unet import BrainUNet, DenoiserConfig


@dataclass
class DatasetBundle:
    atlas_full: ParcelAtlas
    atlas: ParcelAtlas  # after top-k selection
    train_scenes: list[Scene]
    test_scenes: list[Scene]
    train_samples: list[BrainSample]  # on the selected atlas
    test_samples: list[BrainSample]
    train_samples_full: list[BrainSample] = field(default_factory=list)
    test_samples_full: list[BrainSample] = field(default_factory=list)
    truth: Optional[GroundTruth] = None

    def train_images(self) -> np.ndarray:
        return np.stack([s.image for s in self.train_scenes])

    def test_images(self) -> np.ndarray:
        return np.stack([s.image for s in self.test_scenes])

    def train_responses(self) -> np.ndarray:
        return np.stack([s.responses for s in self.train_samples])

    def test_responses(self) -> np.ndarray:
        return np.stack([s.responses for s in self.test_samples])


def build_dataset(config: ExperimentConfig, base_dir: Optional[Path] = None) -> DatasetBundle:
    ds = config.dataset
    if ds.kind == "synthetic":
        atlas_full = build_synthetic_atlas(
            n_low=ds.atlas.n_low,
            n_high=ds.atlas.n_high,
            n_noise=ds.atlas.n_noise,
            vertex_range=(ds.atlas.vertex_min, ds.atlas.vertex_max),
            seed=ds.atlas.seed,
        )
        train_scenes = generate_scenes(
            ds.n_train, stable_seed(config.seed, "scenes", "train"), ds.resolution, id_prefix="train"
        )
        test_scenes = generate_scenes(
            ds.n_test, stable_seed(config.seed, "scenes", "test"), ds.resolution, id_prefix="test"
        )
        spec = SyntheticEncodingSpec(
            noise_std=ds.noise_std,
            informative_parcel_ids=frozenset(p.id for p in atlas_full.parcels if p.roi_label is not None),
            seed=stable_seed(config.seed, "encoding"),
        )
        all_samples, truth = generate_synthetic_dataset(spec, train_scenes + test_scenes, atlas_full)
        train_samples_full = all_samples[: len(train_scenes)]
        test_samples_full = all_samples[len(train_scenes) :]
    else:
        def resolve(value: str) -> Path:
            p = Path(value)
            return p if p.is_absolute() or base_dir is None else base_dir / p

        atlas_full = read_atlas_manifest(resolve(ds.atlas_path))
        train_scenes = load_scenes(resolve(ds.train_scenes))
        test_scenes = load_scenes(resolve(ds.test_scenes))
        train_samples_full = read_response_archive(resolve(ds.train_archive), atlas_full)
        test_samples_full = read_response_archive(resolve(ds.test_archive), atlas_full)
        truth = None
        if len(train_samples_full) != len(train_scenes) or len(test_samples_full) != len(test_scenes):
            raise ConfigError("archive record counts do not match scene counts")

    per_hemisphere = min(
        len(atlas_full.hemisphere_parcels("left")), len(atlas_full.hemisphere_parcels("right"))
    )
    if config.k > per_hemisphere:
        raise ConfigError(f"k: atlas provides only {per_hemisphere} parcels per hemisphere, need k <= that")
    atlas = select_top_k_parcels(atlas_full, config.k)
    train_samples = [subset_to_atlas(s, atlas_full, atlas) for s in train_samples_full]
    test_samples = [subset_to_atlas(s, atlas_full, atlas) for s in test_samples_full]
    return DatasetBundle(
        atlas_full=atlas_full,
        atlas=atlas,
        train_scenes=train_scenes,
        test_scenes=test_scenes,
        train_samples=train_samples,
        test_samples=test_samples,
        train_samples_full=train_samples_full,
        test_samples_full=test_samples_full,
        truth=truth,
    )


def build_model(
    config: ExperimentConfig, atlas: ParcelAtlas, shared_maps: bool = False
) -> tuple[BrainUNet, ParcelLinearMaps, NoiseSchedule]:
    torch.manual_seed(stable_seed(config.seed, "init"))
    denoiser_config = DenoiserConfig(
        in_channels=3,
        base_channels=config.model.base_channels,
        depth=config.model.depth,
        heads=config.model.heads,
        head_dim=config.model.head_dim,
        token_dim=config.model.token_dim,
        time_dim=config.model.time_dim,
    )
    model = BrainUNet(denoiser_config)
    maps = ParcelLinearMaps(
        num_parcels=atlas.size,
        v_max=atlas.v_max,
        token_dim=config.model.token_dim,
        shared=shared_maps,
        generator=torch.Generator().manual_seed(stable_seed(config.seed, "maps")),
    )
    sched = NoiseSchedule.linear(
        num_timesteps=config.schedule.timesteps,
        beta_start=config.schedule.beta_start,
        beta_end=config.schedule.beta_end,
        gamma=config.schedule.gamma,
    )
    return model, maps, sched


def fit_encoder_for(config: ExperimentConfig, bundle: DatasetBundle) -> EncoderModel:
    model, _ = fit_encoder(
        bundle.train_images(), bundle.train_samples, bundle.atlas, config.encoder
    )
    return model


def metric_extractors(config: ExperimentConfig, bundle: DatasetBundle, encoder_model: EncoderModel):
    """(low-level pair, high-level pair) used for the 8-column report."""
    backbone = EncoderBackboneFeatures(encoder_model)
    classifier = fit_shape_classifier(
        bundle.train_scenes, backbone, seed=stable_seed(config.seed, "classifier") % (2**31)
    )
    low = (PixelFeatures(), GaborEnergyFeatures())
    high = (backbone, classifier)
    return low, high


def roi_parcel_ids_by_level(atlas: ParcelAtlas) -> dict[str, list[int]]:
    """Parcel ids grouped into low-level / high-level ROI classes."""
    from .synthetic import HIGH_LEVEL_LABELS, LOW_LEVEL_LABELS

    low = [p.id for p in atlas.parcels if p.roi_label in LOW_LEVEL_LABELS]
    high = [p.id for p in atlas.parcels if p.roi_label in HIGH_LEVEL_LABELS]
    return {"low": low, "high": high}


@dataclass
class DecodeResult:
    selected_images: np.ndarray  # (n, C, H, W)
    selected_seeds: list[int]
    selected_scores: list[float]
    ranking_rows: list[tuple]  # (sample_id, candidate_seed, score, rank, selected)


def decode_samples(
    model: BrainUNet,
    maps: ParcelLinearMaps,
    sched: NoiseSchedule,
    samples: Sequence[BrainSample],
    encoder_model: EncoderModel,
    *,
    base_seed: int,
    steps: int,
    candidates: int,
    image_shape: tuple[int, int, int],
    mask_parcel_ids: Optional[Sequence[int]] = None,
    atlas: Optional[ParcelAtlas] = None,
    batch_size: int = 32,
) -> DecodeResult:
    """Candidate generation + encoder ranking for many samples, batched.

    Candidate seeds derive from (base_seed, stimulus_id, index), so
    candidate sets are nested across counts and stable across runs.
    """
    from .encoder import rank_candidates
    from .sampler import apply_parcel_mask, derive_candidate_seed, sample_batch, SampleConfig

    model.eval()
    with torch.no_grad():
        responses = torch.from_numpy(np.stack([s.responses for s in samples]).astype(np.float32))
        tokens = maps(responses)
        if mask_parcel_ids:
            if atlas is None:
                raise ConfigError("parcel masking requires the atlas")
            tokens = apply_parcel_mask(tokens, mask_parcel_ids, atlas)

    n = len(samples)
    seeds = [
        [derive_candidate_seed(stable_seed(base_seed, "decode", s.stimulus_id), i) for i in range(candidates)]
        for s in samples
    ]
    flat_tokens = tokens.repeat_interleave(candidates, dim=0)
    flat_seeds = [seed for per_sample in seeds for seed in per_sample]
    sample_config = SampleConfig(steps=steps, seed=0, candidates_per_sample=candidates)
    images = np.empty((n * candidates, *image_shape), dtype=np.float32)
    for start in range(0, n * candidates, batch_size):
        stop = min(start + batch_size, n * candidates)
        images[start:stop] = sample_batch(
            model, sched, flat_tokens[start:stop], flat_seeds[start:stop], sample_config, image_shape
        )

    selected_images = np.empty((n, *image_shape), dtype=np.float32)
    selected_seeds: list[int] = []
    selected_scores: list[float] = []
    rows: list[tuple] = []
    for i, brain_sample in enumerate(samples):
        block = images[i * candidates : (i + 1) * candidates]
        ranked = rank_candidates(list(block), brain_sample, encoder_model)
        for rc in ranked:
            rows.append(
                (brain_sample.stimulus_id, seeds[i][rc.index], f"{rc.score:.8e}", rc.rank, int(rc.selected))
            )
        best = next(rc for rc in ranked if rc.selected)
        selected_images[i] = block[best.index]
        selected_seeds.append(seeds[i][best.index])
        selected_scores.append(best.score)
    return DecodeResult(
        selected_images=selected_images,
        selected_seeds=selected_seeds,
        selected_scores=selected_scores,
        ranking_rows=rows,
    )
