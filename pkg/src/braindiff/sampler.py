"""Deterministic reverse diffusion with attention capture.

The update is the noise-free (eta = 0) variant, so a sample is a pure
function of (weights, tokens, seed, config) and candidate diversity comes
only from the initial noise. Candidate seeds are derived by hashing
(base seed, index), which keeps candidate sets nested across counts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .atlas import ParcelAtlas
from .errors import DimensionError, ValidationError
from .schedule import NoiseSchedule
from .trace import AttentionTrace
from .unet import BrainUNet


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    seed: int = 0
    candidates_per_sample: int = 8
    roi_mask: Optional[frozenset[int]] = None
    guidance_scale: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.candidates_per_sample < 1:
            raise ValidationError("candidates_per_sample must be >= 1")


def sampling_timesteps(num_train_timesteps: int, steps: int) -> np.ndarray:
    """Uniformly spaced decreasing timestep subset from T-1 down to 0."""
    if steps < 1 or steps > num_train_timesteps:
        raise ValidationError(f"steps must be in [1, {num_train_timesteps}], got {steps}")
    ts = np.round(np.linspace(num_train_timesteps - 1, 0, steps)).astype(np.int64)
    if np.any(np.diff(ts) >= 0):
        raise ValidationError("timestep subset is not strictly decreasing")
    return ts


def derive_candidate_seed(base_seed: int, index: int) -> int:
    """Stable decorrelated seed for candidate `index`."""
    digest = hashlib.sha256(f"{base_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def _ddim_update(x, eps, ab_t: float, ab_prev: float):
    x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    x0 = x0.clamp(-1.0, 1.0)
    if ab_prev >= 1.0:
        return x0
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps


def _predict(model, x, t_val, tokens, guidance_scale, capture):
    t = torch.full((x.shape[0],), int(t_val), dtype=torch.long)
    eps, fragment = model(x, t, tokens, capture=capture)
    if guidance_scale and guidance_scale != 0.0:
        # unconditional branch: every token dropped, same mechanism as dropout
        eps_uncond, _ = model(x, t, torch.zeros_like(tokens), capture=False)
        eps = eps_uncond + guidance_scale * (eps - eps_uncond)
    return eps, fragment


@torch.no_grad()
def sample(
    model: BrainUNet,
    sched: NoiseSchedule,
    tokens: torch.Tensor,
    config: SampleConfig,
    image_shape: tuple[int, int, int],
    capture: bool = True,
) -> tuple[np.ndarray, Optional[AttentionTrace]]:
    """Decode one sample's tokens into an image in [-1, 1].

    ``tokens`` is (p, f) or (1, p, f). With ``capture`` the full attention
    record over all steps, layers and heads is returned.
    """
    model.eval()
    if tokens.ndim == 2:
        tokens = tokens.unsqueeze(0)
    if tokens.ndim != 3 or tokens.shape[0] != 1:
        raise DimensionError(f"tokens must be (p, f) or (1, p, f), got {tuple(tokens.shape)}")
    num_parcels = tokens.shape[1]

    generator = torch.Generator().manual_seed(int(config.seed))
    x = torch.randn(1, *image_shape, generator=generator, dtype=tokens.dtype)

    ts = sampling_timesteps(sched.num_timesteps, config.steps)
    trace: Optional[AttentionTrace] = None
    for i, t_val in enumerate(ts):
        eps, fragment = _predict(model, x, t_val, tokens, config.guidance_scale, capture)
        if capture:
            if trace is None:
                trace = AttentionTrace(
                    num_parcels=num_parcels,
                    num_heads=model.config.heads,
                    layer_grids=fragment.layer_grids,
                )
            for layer, weights in fragment.weights.items():
                for head in range(model.config.heads):
                    trace.add(int(t_val), layer, head, weights[0, head].cpu().numpy())
        ab_t = float(sched.alpha_bar[t_val])
        ab_prev = float(sched.alpha_bar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        x = _ddim_update(x, eps, ab_t, ab_prev)
    image = x[0].cpu().numpy().astype(np.float32)
    return image, trace


@torch.no_grad()
def sample_batch(
    model: BrainUNet,
    sched: NoiseSchedule,
    tokens: torch.Tensor,
    seeds: Sequence[int],
    config: SampleConfig,
    image_shape: tuple[int, int, int],
) -> np.ndarray:
    """Batched decoding without capture; one seed per row of tokens."""
    model.eval()
    if tokens.ndim != 3 or tokens.shape[0] != len(seeds):
        raise DimensionError(f"tokens must be (n, p, f) with one seed per sample, got {tuple(tokens.shape)}")
    noise = [
        torch.randn(*image_shape, generator=torch.Generator().manual_seed(int(s)), dtype=tokens.dtype)
        for s in seeds
    ]
    x = torch.stack(noise)
    ts = sampling_timesteps(sched.num_timesteps, config.steps)
    for i, t_val in enumerate(ts):
        eps, _ = _predict(model, x, t_val, tokens, config.guidance_scale, capture=False)
        ab_t = float(sched.alpha_bar[t_val])
        ab_prev = float(sched.alpha_bar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        x = _ddim_update(x, eps, ab_t, ab_prev)
    return x.cpu().numpy().astype(np.float32)


@dataclass
class Candidate:
    image: np.ndarray
    trace: Optional[AttentionTrace]
    seed: int


def generate_candidates(
    model: BrainUNet,
    sched: NoiseSchedule,
    tokens: torch.Tensor,
    config: SampleConfig,
    image_shape: tuple[int, int, int],
    capture: bool = True,
) -> list[Candidate]:
    """Seed-indexed candidate reconstructions for one sample's tokens."""
    candidates = []
    for i in range(config.candidates_per_sample):
        seed = derive_candidate_seed(config.seed, i)
        cand_config = SampleConfig(
            steps=config.steps,
            seed=seed,
            candidates_per_sample=1,
            roi_mask=config.roi_mask,
            guidance_scale=config.guidance_scale,
        )
        image, trace = sample(model, sched, tokens, cand_config, image_shape, capture=capture)
        candidates.append(Candidate(image=image, trace=trace, seed=seed))
    return candidates


def apply_parcel_mask(tokens: torch.Tensor, parcel_ids: Sequence[int], atlas: ParcelAtlas) -> torch.Tensor:
    """Zero the tokens of the listed parcels (same mechanism as dropout)."""
    unknown = set(parcel_ids) - set(atlas.parcel_ids)
    if unknown:
        raise ValidationError(f"unknown parcel ids in mask: {sorted(unknown)}")
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.unsqueeze(0)
    if tokens.shape[1] != atlas.size:
        raise DimensionError(f"tokens have {tokens.shape[1]} parcels, atlas has {atlas.size}")
    mask = torch.ones(atlas.size, dtype=tokens.dtype)
    for pid in parcel_ids:
        mask[atlas.index_of(pid)] = 0.0
    masked = tokens * mask[None, :, None]
    return masked[0] if squeeze else masked


def sample_with_roi_mask(
    model: BrainUNet,
    sched: NoiseSchedule,
    tokens: torch.Tensor,
    roi_parcel_ids: Sequence[int],
    atlas: ParcelAtlas,
    config: SampleConfig,
    image_shape: tuple[int, int, int],
) -> np.ndarray:
    """Decode with the listed parcels' tokens zeroed before conditioning."""
    masked = apply_parcel_mask(tokens, roi_parcel_ids, atlas)
    image, _ = sample(model, sched, masked, config, image_shape, capture=False)
    return image
