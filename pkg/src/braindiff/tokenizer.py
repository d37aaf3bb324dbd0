"""Parcel-wise linear maps from padded vertex responses to brain tokens.

Each parcel owns a private (v_max, f) weight matrix and bias; encoding a
batch of samples yields token embeddings of shape (n, p, f). Training-time
token dropout draws a per-sample retention probability r ~ U(0, 1) and
keeps each parcel token independently with probability r; kept tokens are
not rescaled, so the model sees variable token counts by design.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .atlas import BrainSample, stack_responses
from .errors import DimensionError, ValidationError


@dataclass
class DropoutMask:
    mask: torch.Tensor  # (n, p, 1), entries in {0, 1}
    rates_drawn: torch.Tensor  # (n,), retention probability per sample


class ParcelLinearMaps(nn.Module):
    """One learned linear map per parcel (or a single shared map).

    ``shared=True`` collapses all parcels onto one weight matrix, the
    ablation variant for testing whether parcel-private maps matter.
    """

    def __init__(
        self,
        num_parcels: int,
        v_max: int,
        token_dim: int,
        shared: bool = False,
        bias: bool = True,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if num_parcels < 1 or v_max < 1 or token_dim < 1:
            raise ValidationError("num_parcels, v_max and token_dim must all be >= 1")
        self.num_parcels = num_parcels
        self.v_max = v_max
        self.token_dim = token_dim
        self.shared = shared
        n_mats = 1 if shared else num_parcels
        weight = torch.empty(n_mats, v_max, token_dim)
        # variance-preserving init: entries ~ N(0, 1/v_max)
        weight.normal_(0.0, 1.0 / np.sqrt(v_max), generator=generator)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(n_mats, token_dim)) if bias else None

    def forward(self, responses: torch.Tensor) -> torch.Tensor:
        """(n, p, v_max) responses -> (n, p, f) token embeddings."""
        if responses.ndim != 3 or responses.shape[1:] != (self.num_parcels, self.v_max):
            raise DimensionError(
                f"expected responses (n, {self.num_parcels}, {self.v_max}), got {tuple(responses.shape)}"
            )
        if self.shared:
            tokens = torch.einsum("npv,vf->npf", responses, self.weight[0])
        else:
            tokens = torch.einsum("npv,pvf->npf", responses, self.weight)
        if self.bias is not None:
            tokens = tokens + self.bias
        return tokens

    def encode_samples(self, batch: Sequence[BrainSample]) -> torch.Tensor:
        responses = torch.from_numpy(stack_responses(batch)).to(self.weight.dtype)
        return self(responses)


def encode(batch: Sequence[BrainSample], maps: ParcelLinearMaps) -> torch.Tensor:
    """Token embeddings (n, p, f) for a batch of brain samples."""
    return maps.encode_samples(batch)


def apply_token_dropout(
    tokens: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    rate: Optional[float] = None,
    training: bool = True,
) -> tuple[torch.Tensor, DropoutMask]:
    """Mask whole parcel tokens; identity (all-ones mask) at inference.

    ``rate`` forces the retention probability for every sample; otherwise
    each sample draws its own r ~ U(0, 1).
    """
    if tokens.ndim != 3:
        raise DimensionError(f"tokens must be (n, p, f), got {tuple(tokens.shape)}")
    n, p, _ = tokens.shape
    if not training:
        mask = torch.ones(n, p, 1, dtype=tokens.dtype, device=tokens.device)
        return tokens, DropoutMask(mask=mask, rates_drawn=torch.ones(n, dtype=tokens.dtype))
    if rate is not None:
        if not (0.0 <= rate <= 1.0):
            raise ValidationError(f"rate must be in [0, 1], got {rate}")
        rates = torch.full((n,), float(rate), dtype=tokens.dtype)
    else:
        rates = torch.rand(n, generator=generator, dtype=tokens.dtype)
    draws = torch.rand(n, p, generator=generator, dtype=tokens.dtype)
    mask = (draws < rates.unsqueeze(1)).to(tokens.dtype).unsqueeze(-1)
    return tokens * mask.to(tokens.device), DropoutMask(mask=mask, rates_drawn=rates)


def save_parcel_maps(maps: ParcelLinearMaps, parcel_ids: Sequence[int], path: str | Path) -> None:
    """Serialize as named float32 arrays keyed by parcel id."""
    if not maps.shared and len(parcel_ids) != maps.num_parcels:
        raise DimensionError(f"got {len(parcel_ids)} parcel ids for {maps.num_parcels} maps")
    arrays: dict[str, np.ndarray] = {"parcel_ids": np.asarray(parcel_ids, dtype=np.int64)}
    arrays["shared"] = np.array(1 if maps.shared else 0)
    weight = maps.weight.detach().cpu().numpy().astype(np.float32)
    bias = None if maps.bias is None else maps.bias.detach().cpu().numpy().astype(np.float32)
    if maps.shared:
        arrays["weight_shared"] = weight[0]
        if bias is not None:
            arrays["bias_shared"] = bias[0]
    else:
        for i, pid in enumerate(parcel_ids):
            arrays[f"weight_{pid}"] = weight[i]
            if bias is not None:
                arrays[f"bias_{pid}"] = bias[i]
    np.savez(path, **arrays)


def load_parcel_maps(path: str | Path) -> tuple[ParcelLinearMaps, list[int]]:
    with np.load(path, allow_pickle=False) as data:
        parcel_ids = [int(i) for i in data["parcel_ids"]]
        shared = bool(int(data["shared"]))
        if shared:
            weights = data["weight_shared"][None]
            biases = data["bias_shared"][None] if "bias_shared" in data.files else None
        else:
            weights = np.stack([data[f"weight_{pid}"] for pid in parcel_ids])
            biases = (
                np.stack([data[f"bias_{pid}"] for pid in parcel_ids])
                if f"bias_{parcel_ids[0]}" in data.files
                else None
            )
    n_mats, v_max, token_dim = weights.shape
    maps = ParcelLinearMaps(
        num_parcels=len(parcel_ids),
        v_max=v_max,
        token_dim=token_dim,
        shared=shared,
        bias=biases is not None,
    )
    with torch.no_grad():
        maps.weight.copy_(torch.from_numpy(weights))
        if biases is not None:
            maps.bias.copy_(torch.from_numpy(biases))
    return maps, parcel_ids
