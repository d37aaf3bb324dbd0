"""On-disk formats: atlas manifest, response archive, dataset bundle.

Manifest: whitespace-delimited text with header
``id hemisphere vertex_count snr roi_label`` ("-" marks no label).

Response archive: concatenated records, one per stimulus:
uint32 little-endian byte length of the UTF-8 stimulus id, the id bytes,
then p * v_max little-endian float32 values in row-major parcel order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .atlas import BrainSample, Parcel, ParcelAtlas
from .errors import ValidationError
from .synthetic import GroundTruth, Scene, SceneParams

_LEN = struct.Struct("<I")


def write_atlas_manifest(atlas: ParcelAtlas, path: str | Path) -> None:
    lines = ["id hemisphere vertex_count snr roi_label"]
    for p in atlas.parcels:
        label = p.roi_label if p.roi_label is not None else "-"
        lines.append(f"{p.id} {p.hemisphere} {p.vertex_count} {p.snr!r} {label}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_atlas_manifest(path: str | Path) -> ParcelAtlas:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].split() != ["id", "hemisphere", "vertex_count", "snr", "roi_label"]:
        raise ValidationError(f"{path}: missing or malformed atlas manifest header")
    parcels = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ValidationError(f"{path}:{lineno}: expected 5 columns, got {len(fields)}")
        pid, hemi, vc, snr, label = fields
        parcels.append(
            Parcel(
                id=int(pid),
                hemisphere=hemi,
                vertex_count=int(vc),
                snr=float(snr),
                roi_label=None if label == "-" else label,
            )
        )
    return ParcelAtlas(tuple(parcels))


def write_response_archive(samples: Sequence[BrainSample], path: str | Path) -> None:
    with open(path, "wb") as fh:
        for sample in samples:
            id_bytes = sample.stimulus_id.encode("utf-8")
            fh.write(_LEN.pack(len(id_bytes)))
            fh.write(id_bytes)
            fh.write(np.ascontiguousarray(sample.responses, dtype="<f4").tobytes())


def read_response_archive(path: str | Path, atlas: ParcelAtlas) -> list[BrainSample]:
    p, v_max = atlas.size, atlas.v_max
    record_floats = p * v_max
    valid = atlas.valid_mask()
    data = Path(path).read_bytes()
    samples = []
    offset = 0
    while offset < len(data):
        if offset + _LEN.size > len(data):
            raise ValidationError(f"{path}: truncated record header at byte {offset}")
        (id_len,) = _LEN.unpack_from(data, offset)
        offset += _LEN.size
        stimulus_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        end = offset + record_floats * 4
        if end > len(data):
            raise ValidationError(f"{path}: truncated response block for {stimulus_id!r}")
        responses = np.frombuffer(data[offset:end], dtype="<f4").reshape(p, v_max).copy()
        offset = end
        responses[~valid] = 0.0  # enforce zero padding regardless of archive contents
        samples.append(BrainSample(stimulus_id=stimulus_id, responses=responses, valid=valid.copy()))
    return samples


def save_scenes(scenes: Sequence[Scene], path: str | Path) -> None:
    images = np.stack([s.image for s in scenes]).astype(np.float32)
    ids = np.array([s.stimulus_id for s in scenes])
    params = json.dumps(
        [
            {
                "shape": s.params.shape,
                "color": list(s.params.color),
                "center": list(s.params.center),
                "size": s.params.size,
                "background": list(s.params.background),
            }
            for s in scenes
        ]
    )
    np.savez_compressed(path, images=images, stimulus_ids=ids, params_json=np.array(params))


def load_scenes(path: str | Path) -> list[Scene]:
    with np.load(path, allow_pickle=False) as data:
        images = data["images"]
        ids = data["stimulus_ids"]
        params = json.loads(str(data["params_json"]))
    scenes = []
    for i in range(images.shape[0]):
        d = params[i]
        scenes.append(
            Scene(
                stimulus_id=str(ids[i]),
                params=SceneParams(
                    shape=d["shape"],
                    color=tuple(d["color"]),
                    center=tuple(d["center"]),
                    size=d["size"],
                    background=tuple(d["background"]),
                ),
                image=images[i],
            )
        )
    return scenes


def save_ground_truth(truth: GroundTruth, path: str | Path) -> None:
    arrays = {f"w_{pid}": w.astype(np.float64) for pid, w in truth.weights.items()}
    arrays["informative_ids"] = np.array(sorted(truth.informative_parcel_ids), dtype=np.int64)
    arrays["noise_std"] = np.array(truth.noise_std)
    arrays["seed"] = np.array(truth.seed)
    np.savez_compressed(path, **arrays)


def load_ground_truth(path: str | Path) -> GroundTruth:
    with np.load(path, allow_pickle=False) as data:
        weights = {
            int(key[2:]): data[key] for key in data.files if key.startswith("w_")
        }
        return GroundTruth(
            weights=weights,
            informative_parcel_ids=frozenset(int(i) for i in data["informative_ids"]),
            noise_std=float(data["noise_std"]),
            seed=int(data["seed"]),
        )
