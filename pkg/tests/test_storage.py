import struct

import numpy as np
import pytest

from braindiff.atlas import pad_parcel_responses
from braindiff.errors import ValidationError
from braindiff.storage import (
    load_ground_truth,
    load_scenes,
    read_atlas_manifest,
    read_response_archive,
    save_ground_truth,
    save_scenes,
    write_atlas_manifest,
    write_response_archive,
)
from braindiff.synthetic import (
    SyntheticEncodingSpec,
    build_synthetic_atlas,
    generate_scenes,
    generate_synthetic_dataset,
)

from conftest import small_atlas


def test_manifest_roundtrip(tmp_path):
    atlas = small_atlas()
    path = tmp_path / "atlas.tsv"
    write_atlas_manifest(atlas, path)
    back = read_atlas_manifest(path)
    assert back == atlas


def test_manifest_bad_header(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("id hemi verts\n1 left 3\n")
    with pytest.raises(ValidationError):
        read_atlas_manifest(path)


def test_archive_roundtrip_bit_exact(tmp_path, rng):
    atlas = small_atlas()
    samples = []
    for i in range(3):
        raw = [rng.normal(size=p.vertex_count).astype(np.float32) for p in atlas.parcels]
        samples.append(pad_parcel_responses(raw, atlas, stimulus_id=f"stim_{i:03d}"))
    path = tmp_path / "responses.bin"
    write_response_archive(samples, path)
    back = read_response_archive(path, atlas)
    assert [s.stimulus_id for s in back] == [s.stimulus_id for s in samples]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.responses, b.responses)
        np.testing.assert_array_equal(a.valid, b.valid)


def test_archive_record_layout(tmp_path):
    """Byte-level check of the record format: u32 id length + id + floats."""
    atlas = small_atlas()
    p, v_max = atlas.size, atlas.v_max
    values = np.zeros((p, v_max), dtype="<f4")
    values[0, 0] = 1.5
    payload = struct.pack("<I", 4) + b"abcd" + values.tobytes()
    path = tmp_path / "hand.bin"
    path.write_bytes(payload)
    samples = read_response_archive(path, atlas)
    assert len(samples) == 1
    assert samples[0].stimulus_id == "abcd"
    assert samples[0].responses[0, 0] == 1.5


def test_archive_truncated_raises(tmp_path):
    atlas = small_atlas()
    path = tmp_path / "trunc.bin"
    path.write_bytes(struct.pack("<I", 4) + b"abcd" + b"\x00" * 7)
    with pytest.raises(ValidationError):
        read_response_archive(path, atlas)


def test_archive_zeroes_padding_on_read(tmp_path):
    atlas = small_atlas()
    values = np.full((atlas.size, atlas.v_max), 9.0, dtype="<f4")
    path = tmp_path / "pad.bin"
    path.write_bytes(struct.pack("<I", 1) + b"x" + values.tobytes())
    sample = read_response_archive(path, atlas)[0]
    assert np.all(sample.responses[~sample.valid] == 0.0)
    assert np.all(sample.responses[sample.valid] == 9.0)


def test_scenes_roundtrip(tmp_path):
    scenes = generate_scenes(4, seed=3)
    path = tmp_path / "scenes.npz"
    save_scenes(scenes, path)
    back = load_scenes(path)
    assert [s.stimulus_id for s in back] == [s.stimulus_id for s in scenes]
    for a, b in zip(scenes, back):
        np.testing.assert_array_equal(a.image, b.image)
        assert a.params.shape == b.params.shape
        assert a.params.size == pytest.approx(b.params.size)


def test_ground_truth_roundtrip(tmp_path):
    atlas = build_synthetic_atlas(n_low=2, n_high=2, n_noise=2, seed=1)
    spec = SyntheticEncodingSpec(
        noise_std=0.25,
        informative_parcel_ids=frozenset(p.id for p in atlas.parcels if p.roi_label),
        seed=5,
    )
    scenes = generate_scenes(2, seed=0)
    _, truth = generate_synthetic_dataset(spec, scenes, atlas)
    path = tmp_path / "truth.npz"
    save_ground_truth(truth, path)
    back = load_ground_truth(path)
    assert back.informative_parcel_ids == truth.informative_parcel_ids
    assert back.noise_std == truth.noise_std
    for pid, w in truth.weights.items():
        np.testing.assert_array_equal(back.weights[pid], w)
