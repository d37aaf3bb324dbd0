"""Compact U-Net denoiser conditioned on brain tokens via cross-attention.

Every resolution level (each down block, the middle, and each up block)
contains one cross-attention layer whose queries are the spatial tokens
and whose keys/values are linear projections of the brain tokens. The
attention weights can be captured for interpretability; capture is purely
observational and never changes the computation path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, TrainingDivergence, ValidationError
from .trace import AttentionTrace


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    base_channels: int = 64
    depth: int = 2
    heads: int = 4
    head_dim: int = 64
    token_dim: int = 768
    time_dim: int = 256
    groups: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if self.heads < 1 or self.head_dim < 1:
            raise ValidationError("heads and head_dim must be >= 1")

    @property
    def attention_width(self) -> int:
        return self.heads * self.head_dim

    @property
    def num_cross_attention_layers(self) -> int:
        return 2 * self.depth + 1

    def channels_at(self, level: int) -> int:
        return self.base_channels * (2 ** min(level, self.depth))


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValidationError("time embedding dim must be even")
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / (half - 1)
        )
        args = t[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(c_in, groups)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = _norm(c_out, groups)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class BrainCrossAttention(nn.Module):
    """Multi-head cross-attention from spatial queries to brain tokens.

    Keys/values project the token embeddings without bias, so all-zero
    (fully dropped) tokens give constant logits and uniform attention.
    Returns the post-softmax weights (B, heads, q, p) alongside the output.
    """

    def __init__(self, channels: int, token_dim: int, heads: int, head_dim: int, groups: int):
        super().__init__()
        width = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.norm = _norm(channels, groups)
        self.to_q = nn.Linear(channels, width)
        self.to_k = nn.Linear(token_dim, width, bias=False)
        self.to_v = nn.Linear(token_dim, width, bias=False)
        self.to_out = nn.Linear(width, channels)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, gh, gw = x.shape
        if tokens.ndim != 3 or tokens.shape[0] != b:
            raise DimensionError(f"tokens must be ({b}, p, f), got {tuple(tokens.shape)}")
        p = tokens.shape[1]
        if p == 0:
            raise ValidationError("cross-attention needs at least one conditioning token")
        q = gh * gw
        h = self.norm(x).reshape(b, c, q).transpose(1, 2)  # (b, q, c)

        def split(z: torch.Tensor) -> torch.Tensor:
            return z.reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)

        queries = split(self.to_q(h))  # (b, H, q, d)
        keys = split(self.to_k(tokens))  # (b, H, p, d)
        values = split(self.to_v(tokens))
        logits = queries @ keys.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(logits, dim=-1)  # (b, H, q, p)
        out = attn @ values  # (b, H, q, d)
        out = out.transpose(1, 2).reshape(b, q, self.heads * self.head_dim)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, gh, gw)
        return x + out, attn


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


@dataclass
class CaptureFragment:
    """Attention captured during one forward pass (one timestep)."""

    layer_grids: dict[int, tuple[int, int]]
    weights: dict[int, torch.Tensor]  # layer -> (B, heads, q, p)


class BrainUNet(nn.Module):
    """Noise predictor eps(x_t, t, tokens) with per-level cross-attention.

    Cross-attention layers are indexed in forward order: down levels
    0..depth-1, the middle, then up levels deepest-first.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.time_embed = nn.Sequential(
            SinusoidalTimeEmbedding(cfg.base_channels),
            nn.Linear(cfg.base_channels, cfg.time_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)

        def attn(channels: int) -> BrainCrossAttention:
            return BrainCrossAttention(channels, cfg.token_dim, cfg.heads, cfg.head_dim, cfg.groups)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        c_prev = cfg.base_channels
        self.level_channels = []
        for level in range(cfg.depth):
            c = cfg.channels_at(level)
            self.down_res.append(ResidualBlock(c_prev, c, cfg.time_dim, cfg.groups))
            self.down_attn.append(attn(c))
            self.downsamples.append(Downsample(c))
            self.level_channels.append(c)
            c_prev = c

        c_mid = cfg.channels_at(cfg.depth)
        self.mid_res1 = ResidualBlock(c_prev, c_mid, cfg.time_dim, cfg.groups)
        self.mid_attn = attn(c_mid)
        self.mid_res2 = ResidualBlock(c_mid, c_mid, cfg.time_dim, cfg.groups)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        c_prev = c_mid
        for level in reversed(range(cfg.depth)):
            c = cfg.channels_at(level)
            self.upsamples.append(Upsample(c_prev))
            self.up_res.append(ResidualBlock(c_prev + self.level_channels[level], c, cfg.time_dim, cfg.groups))
            self.up_attn.append(attn(c))
            c_prev = c

        self.norm_out = _norm(c_prev, cfg.groups)
        self.conv_out = nn.Conv2d(c_prev, cfg.in_channels, 3, padding=1)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        tokens: torch.Tensor,
        capture: bool = False,
    ) -> tuple[torch.Tensor, Optional[CaptureFragment]]:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected x (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        t_emb = self.time_embed(t.to(x.dtype))

        grids: dict[int, tuple[int, int]] = {}
        captured: dict[int, torch.Tensor] = {}
        layer_idx = 0

        def run_attn(module: BrainCrossAttention, h: torch.Tensor) -> torch.Tensor:
            nonlocal layer_idx
            h, attn_weights = module(h, tokens)
            grids[layer_idx] = (h.shape[2], h.shape[3])
            if capture:
                captured[layer_idx] = attn_weights.detach().clone()
            layer_idx += 1
            return h

        h = self.conv_in(x)
        skips = []
        for res, attn_mod, down in zip(self.down_res, self.down_attn, self.downsamples):
            h = res(h, t_emb)
            h = run_attn(attn_mod, h)
            skips.append(h)
            h = down(h)

        h = self.mid_res1(h, t_emb)
        h = run_attn(self.mid_attn, h)
        h = self.mid_res2(h, t_emb)

        for res, attn_mod, up in zip(self.up_res, self.up_attn, self.upsamples):
            h = up(h)
            h = res(torch.cat([h, skips.pop()], dim=1), t_emb)
            h = run_attn(attn_mod, h)

        eps = self.conv_out(torch.nn.functional.silu(self.norm_out(h)))
        if not torch.isfinite(eps).all():
            raise TrainingDivergence(self._diagnose_nonfinite(x, t, tokens))
        fragment = CaptureFragment(layer_grids=grids, weights=captured) if capture else None
        return eps, fragment

    def _diagnose_nonfinite(self, x, t, tokens) -> str:
        parts = []
        if not torch.isfinite(x).all():
            parts.append("input x_t")
        if not torch.isfinite(tokens).all():
            parts.append("conditioning tokens")
        for name, param in self.named_parameters():
            if not torch.isfinite(param).all():
                parts.append(f"parameter {name}")
                break
        where = ", ".join(parts) if parts else "internal activations"
        return f"non-finite denoiser output (first non-finite source: {where})"

    def cross_attention_parameters(self):
        for name, param in self.named_parameters():
            if "attn" in name:
                yield param


def denoise_step(
    model: BrainUNet,
    x_t: torch.Tensor,
    t: int | torch.Tensor,
    tokens: torch.Tensor,
    capture: bool = False,
) -> tuple[torch.Tensor, Optional[dict]]:
    """One noise prediction; optionally returns this timestep's attention.

    The returned fragment maps (layer, head) to a (q, p) numpy matrix and
    carries the layer grids; capture requires a single-sample batch.
    """
    if isinstance(t, int):
        t_tensor = torch.full((x_t.shape[0],), t, dtype=torch.long)
    else:
        t_tensor = t
    if capture and x_t.shape[0] != 1:
        raise ValidationError("attention capture expects a batch of one sample")
    with torch.no_grad():
        eps, fragment = model(x_t, t_tensor, tokens, capture=capture)
    if not capture:
        return eps, None
    matrices = {
        (layer, head): fragment.weights[layer][0, head].cpu().numpy()
        for layer in fragment.weights
        for head in range(model.config.heads)
    }
    return eps, {"grids": fragment.layer_grids, "matrices": matrices}


def new_trace_for_model(model: BrainUNet, num_parcels: int, grids: dict[int, tuple[int, int]]) -> AttentionTrace:
    return AttentionTrace(num_parcels=num_parcels, num_heads=model.config.heads, layer_grids=grids)
