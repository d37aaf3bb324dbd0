"""Shared fixtures: tiny atlases, random traces, and cached trained models.

Trained-model fixtures are expensive (minutes of CPU), so they are cached
under .test_cache/ keyed by their harness parameters; delete the cache to
force retraining.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from braindiff.atlas import Parcel, ParcelAtlas
from braindiff.schedule import NoiseSchedule
from braindiff.seeds import stable_seed
from braindiff.synthetic import (
    SyntheticEncodingSpec,
    build_synthetic_atlas,
    generate_scenes,
    generate_synthetic_dataset,
)
from braindiff.tokenizer import ParcelLinearMaps
from braindiff.trace import AttentionTrace
from braindiff.training import TrainConfig, load_checkpoint, save_checkpoint, train
from braindiff.unet import BrainUNet, DenoiserConfig

CACHE_DIR = Path(__file__).resolve().parent.parent / ".test_cache"

# Desk-scale harness shared by the acceptance experiments.
HARNESS = {
    "atlas": dict(n_low=4, n_high=4, n_noise=8, seed=1),
    "n_train": 128,
    "n_test": 100,
    "noise_std": 0.3,
    "scene_seed": 2,
    "encoding_seed": 3,
    "token_dim": 48,
    "denoiser": dict(base_channels=16, depth=2, heads=4, head_dim=8, token_dim=48, time_dim=64),
    "train_steps": 2000,
    "learning_rate": 1e-3,
    "timesteps": 1000,
}


def small_atlas() -> ParcelAtlas:
    return ParcelAtlas(
        (
            Parcel(id=0, hemisphere="left", vertex_count=3, snr=0.9, roi_label="V1"),
            Parcel(id=1, hemisphere="left", vertex_count=5, snr=0.5, roi_label="Face"),
            Parcel(id=2, hemisphere="left", vertex_count=2, snr=0.2),
            Parcel(id=3, hemisphere="right", vertex_count=4, snr=0.7, roi_label="V1"),
            Parcel(id=4, hemisphere="right", vertex_count=5, snr=0.1),
            Parcel(id=5, hemisphere="right", vertex_count=1, snr=0.4, roi_label="Scene"),
        )
    )


@pytest.fixture
def atlas6() -> ParcelAtlas:
    return small_atlas()


def random_trace(
    rng: np.random.Generator,
    num_parcels: int,
    num_heads: int,
    grids: dict[int, tuple[int, int]],
    timesteps: list[int],
) -> AttentionTrace:
    """Trace whose records are random row-stochastic matrices."""
    trace = AttentionTrace(num_parcels=num_parcels, num_heads=num_heads, layer_grids=grids)
    for t in timesteps:
        for layer, (gh, gw) in grids.items():
            for head in range(num_heads):
                raw = rng.gamma(1.0, 1.0, size=(gh * gw, num_parcels))
                trace.add(t, layer, head, raw / raw.sum(axis=1, keepdims=True))
    return trace


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def _harness_dataset():
    """Deterministic generalization dataset shared by the model fixtures."""
    h = HARNESS
    atlas = build_synthetic_atlas(**h["atlas"])
    scenes = generate_scenes(h["n_train"] + h["n_test"], seed=h["scene_seed"])
    spec = SyntheticEncodingSpec(
        noise_std=h["noise_std"],
        informative_parcel_ids=frozenset(p.id for p in atlas.parcels if p.roi_label is not None),
        seed=h["encoding_seed"],
    )
    samples, truth = generate_synthetic_dataset(spec, scenes, atlas)
    n_train = h["n_train"]
    return {
        "atlas": atlas,
        "truth": truth,
        "train_scenes": scenes[:n_train],
        "test_scenes": scenes[n_train:],
        "train_samples": samples[:n_train],
        "test_samples": samples[n_train:],
    }


@pytest.fixture(scope="session")
def harness_data():
    return _harness_dataset()


def _fingerprint(tag: str, extra: dict) -> str:
    payload = json.dumps({"harness": HARNESS, "tag": tag, **extra}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _train_cached(tag: str, data, *, token_dropout: bool, steps: int, n_items: int | None = None,
                  noiseless: bool = False):
    """Train (or load) a harness model; returns (model, maps, sched)."""
    h = HARNESS
    extra = {"token_dropout": token_dropout, "steps": steps, "n_items": n_items, "noiseless": noiseless}
    cache = CACHE_DIR / f"{tag}-{_fingerprint(tag, extra)}.npz"
    sched = NoiseSchedule.linear(h["timesteps"])
    if cache.exists():
        loaded = load_checkpoint(cache)
        return loaded.model, loaded.maps, loaded.sched

    atlas = data["atlas"]
    if noiseless:
        spec = SyntheticEncodingSpec(
            noise_std=0.0,
            informative_parcel_ids=frozenset(p.id for p in atlas.parcels if p.roi_label is not None),
            seed=h["encoding_seed"],
        )
        scenes = data["train_scenes"][:n_items]
        samples, _ = generate_synthetic_dataset(spec, scenes, atlas)
    else:
        scenes = data["train_scenes"][:n_items] if n_items else data["train_scenes"]
        samples = data["train_samples"][:n_items] if n_items else data["train_samples"]
    images = np.stack([s.image for s in scenes])
    responses = np.stack([s.responses for s in samples])

    torch.manual_seed(stable_seed("fixture", tag))
    maps = ParcelLinearMaps(
        atlas.size, atlas.v_max, token_dim=h["token_dim"],
        generator=torch.Generator().manual_seed(stable_seed("fixture-maps", tag)),
    )
    model = BrainUNet(DenoiserConfig(**h["denoiser"]))
    config = TrainConfig(
        epochs=10**6, batch_size=16, learning_rate=h["learning_rate"], seed=0,
        max_steps=steps, token_dropout=token_dropout,
    )
    CACHE_DIR.mkdir(exist_ok=True)
    train(model, maps, images, responses, config, sched, CACHE_DIR / f"work-{tag}")
    save_checkpoint(cache, model, maps, sched, config)
    return model, maps, sched


@pytest.fixture(scope="session")
def trained_td(harness_data):
    """Generalization model trained with token dropout."""
    return _train_cached("td", harness_data, token_dropout=True, steps=HARNESS["train_steps"])


@pytest.fixture(scope="session")
def trained_no_td(harness_data):
    """Twin of trained_td without token dropout (same budget and data)."""
    return _train_cached("no-td", harness_data, token_dropout=False, steps=HARNESS["train_steps"])


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained small denoiser + maps for structural/sampling tests."""
    torch.manual_seed(777)
    config = DenoiserConfig(base_channels=8, depth=2, heads=2, head_dim=4, token_dim=12, time_dim=16)
    model = BrainUNet(config)
    maps = ParcelLinearMaps(6, 5, token_dim=12, generator=torch.Generator().manual_seed(7))
    sched = NoiseSchedule.linear(200)
    return model, maps, sched
