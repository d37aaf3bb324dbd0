"""Captured cross-attention matrices from a sampling run.

A trace stores one post-softmax matrix of shape (q_layer, p) per
(timestep, layer, head). Layer grids record the spatial (height, width)
each layer's queries came from, so q_layer == height * width.

Dump format (npz): a JSON header under ``header_json`` with p, heads,
layer grids and timesteps, plus one float32 array per record keyed
``A_t{t:04d}_l{layer}_h{head}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError

_KEY_RE = re.compile(r"^A_t(\d+)_l(\d+)_h(\d+)$")


@dataclass
class AttentionTrace:
    num_parcels: int
    num_heads: int
    layer_grids: dict[int, tuple[int, int]]
    records: dict[tuple[int, int, int], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_parcels < 1 or self.num_heads < 1:
            raise ValidationError("num_parcels and num_heads must be >= 1")
        self.layer_grids = {int(l): (int(h), int(w)) for l, (h, w) in self.layer_grids.items()}

    @property
    def num_layers(self) -> int:
        return len(self.layer_grids)

    @property
    def layers(self) -> list[int]:
        return sorted(self.layer_grids)

    @property
    def timesteps(self) -> list[int]:
        """Recorded timesteps in descending (sampling) order."""
        return sorted({t for (t, _, _) in self.records}, reverse=True)

    def queries_per_layer(self, layer: int) -> int:
        gh, gw = self.layer_grids[layer]
        return gh * gw

    @property
    def total_queries(self) -> int:
        return sum(self.queries_per_layer(l) for l in self.layers)

    def add(self, t: int, layer: int, head: int, matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=np.float32)
        if layer not in self.layer_grids:
            raise ValidationError(f"unknown layer {layer}; grids registered for {self.layers}")
        expected = (self.queries_per_layer(layer), self.num_parcels)
        if matrix.shape != expected:
            raise DimensionError(f"record (t={t}, l={layer}, h={head}): expected {expected}, got {matrix.shape}")
        if not (0 <= head < self.num_heads):
            raise ValidationError(f"head {head} out of range for {self.num_heads} heads")
        self.records[(int(t), int(layer), int(head))] = matrix

    def get(self, t: int, layer: int, head: int) -> np.ndarray:
        key = (int(t), int(layer), int(head))
        if key not in self.records:
            raise ValidationError(f"trace has no record at (t={t}, layer={layer}, head={head})")
        return self.records[key]

    def is_complete_at(self, t: int) -> bool:
        return all((t, l, h) in self.records for l in self.layers for h in range(self.num_heads))

    def require_complete_at(self, t: int) -> None:
        missing = [
            (l, h)
            for l in self.layers
            for h in range(self.num_heads)
            if (t, l, h) not in self.records
        ]
        if missing:
            raise ValidationError(f"trace incomplete at t={t}: missing (layer, head) pairs {missing[:8]}")

    def validate_rows(self, tol: float = 1e-5) -> None:
        """Every stored row must be a probability vector over parcels."""
        for key, matrix in self.records.items():
            sums = matrix.sum(axis=1, dtype=np.float64)
            err = np.abs(sums - 1.0).max() if sums.size else 0.0
            if err > tol:
                raise ValidationError(f"record {key}: attention row sums off by {err:.2e} (> {tol:.0e})")
            if matrix.min() < 0.0:
                raise ValidationError(f"record {key}: negative attention weight")

    def save(self, path: str | Path) -> None:
        header = {
            "num_parcels": self.num_parcels,
            "num_heads": self.num_heads,
            "layer_grids": {str(l): list(g) for l, g in self.layer_grids.items()},
            "timesteps": self.timesteps,
        }
        arrays = {
            f"A_t{t:04d}_l{l}_h{h}": m.astype(np.float32) for (t, l, h), m in self.records.items()
        }
        np.savez_compressed(path, header_json=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "AttentionTrace":
        with np.load(path, allow_pickle=False) as data:
            if "header_json" not in data.files:
                raise ValidationError(f"{path}: not an attention dump (missing header)")
            header = json.loads(str(data["header_json"]))
            trace = cls(
                num_parcels=int(header["num_parcels"]),
                num_heads=int(header["num_heads"]),
                layer_grids={int(l): tuple(g) for l, g in header["layer_grids"].items()},
            )
            for key in data.files:
                m = _KEY_RE.match(key)
                if m:
                    t, l, h = (int(g) for g in m.groups())
                    trace.add(t, l, h, data[key])
        return trace
