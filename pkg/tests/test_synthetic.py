import numpy as np
import pytest

from braindiff.errors import ValidationError
from braindiff.synthetic import (
    FEATURE_DIM,
    HIGH_FEATURE_SLICE,
    LOW_FEATURE_SLICE,
    SceneParams,
    SyntheticEncodingSpec,
    build_synthetic_atlas,
    draw_ground_truth,
    generate_scenes,
    generate_synthetic_dataset,
    render_scene,
    scene_feature_vector,
)


@pytest.fixture
def atlas():
    return build_synthetic_atlas(n_low=2, n_high=2, n_noise=4, seed=0)


def informative_ids(atlas):
    return frozenset(p.id for p in atlas.parcels if p.roi_label is not None)


class TestScenes:
    def test_images_in_range_and_shape(self):
        scenes = generate_scenes(5, seed=0)
        for scene in scenes:
            assert scene.image.shape == (3, 32, 32)
            assert scene.image.min() >= -1.0 and scene.image.max() <= 1.0

    def test_deterministic(self):
        a = generate_scenes(4, seed=9)
        b = generate_scenes(4, seed=9)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)
            assert x.params == y.params

    def test_shape_classes_render_differently(self):
        base = dict(color=(1.0, 0.2, 0.2), center=(0.5, 0.5), size=0.25, background=(0.05, 0.05, 0.05))
        circle = render_scene(SceneParams(shape="circle", **base))
        square = render_scene(SceneParams(shape="square", **base))
        triangle = render_scene(SceneParams(shape="triangle", **base))
        assert np.abs(circle - square).max() > 0.1
        assert np.abs(circle - triangle).max() > 0.1

    def test_feature_vector_layout(self):
        params = SceneParams(shape="square", color=(0.5, 0.6, 0.7), center=(0.4, 0.6), size=0.2,
                             background=(0.1, 0.1, 0.1))
        feats = scene_feature_vector(params)
        assert feats.shape == (FEATURE_DIM,)
        np.testing.assert_array_equal(feats[HIGH_FEATURE_SLICE], [0, 1, 0])
        np.testing.assert_allclose(feats[LOW_FEATURE_SLICE][:3], [0.5, 0.6, 0.7])


class TestGroundTruth:
    def test_non_informative_zero_weight(self, atlas):
        spec = SyntheticEncodingSpec(noise_std=1.0, informative_parcel_ids=informative_ids(atlas), seed=0)
        truth = draw_ground_truth(spec, atlas)
        for parcel in atlas.parcels:
            w = truth.weights[parcel.id]
            if parcel.roi_label is None:
                assert not w.any()
            else:
                assert w.any()

    def test_label_gates_feature_blocks(self, atlas):
        spec = SyntheticEncodingSpec(informative_parcel_ids=informative_ids(atlas), seed=0)
        truth = draw_ground_truth(spec, atlas)
        for parcel in atlas.parcels:
            w = truth.weights[parcel.id]
            if parcel.roi_label in ("V1", "V2", "V3", "V4"):
                assert not w[HIGH_FEATURE_SLICE].any()
                assert w[LOW_FEATURE_SLICE].any()
            elif parcel.roi_label is not None:
                assert not w[LOW_FEATURE_SLICE].any()
                assert w[HIGH_FEATURE_SLICE].any()

    def test_unknown_informative_id_rejected(self, atlas):
        spec = SyntheticEncodingSpec(informative_parcel_ids=frozenset({9999}), seed=0)
        with pytest.raises(ValidationError):
            draw_ground_truth(spec, atlas)


class TestDatasetGeneration:
    def test_zero_noise_is_exact_linear_map(self, atlas):
        spec = SyntheticEncodingSpec(noise_std=0.0, informative_parcel_ids=informative_ids(atlas), seed=4)
        scenes = generate_scenes(3, seed=1)
        samples, truth = generate_synthetic_dataset(spec, scenes, atlas)
        for scene, sample in zip(scenes, samples):
            feats = scene_feature_vector(scene.params)
            for i, parcel in enumerate(atlas.parcels):
                expected = (feats @ truth.weights[parcel.id]).astype(np.float32)
                np.testing.assert_array_equal(sample.responses[i, : parcel.vertex_count], expected)

    def test_same_seed_bit_identical(self, atlas):
        spec = SyntheticEncodingSpec(noise_std=0.5, informative_parcel_ids=informative_ids(atlas), seed=11)
        scenes = generate_scenes(4, seed=2)
        first, _ = generate_synthetic_dataset(spec, scenes, atlas)
        second, _ = generate_synthetic_dataset(spec, scenes, atlas)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.responses, b.responses)

    def test_noise_variance_monte_carlo(self, atlas):
        # 10k samples; pure-noise parcel vertex variance must be within 5% of 1
        spec = SyntheticEncodingSpec(noise_std=1.0, informative_parcel_ids=informative_ids(atlas), seed=21)
        scenes = generate_scenes(10_000, seed=3)
        samples, truth = generate_synthetic_dataset(spec, scenes, atlas)
        noise_parcel = next(p for p in atlas.parcels if p.roi_label is None)
        idx = atlas.index_of(noise_parcel.id)
        values = np.stack([s.responses[idx, : noise_parcel.vertex_count] for s in samples])
        variances = values.var(axis=0)
        assert np.all(np.abs(variances - 1.0) < 0.05)

    def test_empty_scene_list_rejected(self, atlas):
        spec = SyntheticEncodingSpec(informative_parcel_ids=informative_ids(atlas), seed=0)
        with pytest.raises(ValidationError):
            generate_synthetic_dataset(spec, [], atlas)


class TestSyntheticAtlas:
    def test_label_counts(self):
        atlas = build_synthetic_atlas(n_low=4, n_high=2, n_noise=6, seed=5)
        low = [p for p in atlas.parcels if p.roi_label in ("V1", "V2", "V3", "V4")]
        high = [p for p in atlas.parcels if p.roi_label in ("Face", "Body", "Scene", "Word")]
        noise = [p for p in atlas.parcels if p.roi_label is None]
        assert (len(low), len(high), len(noise)) == (4, 2, 6)

    def test_hemispheres_balanced(self):
        atlas = build_synthetic_atlas(n_low=2, n_high=2, n_noise=4, seed=5)
        assert len(atlas.hemisphere_parcels("left")) == len(atlas.hemisphere_parcels("right"))

    def test_odd_counts_rejected(self):
        with pytest.raises(ValidationError):
            build_synthetic_atlas(n_low=3, n_high=2, n_noise=4)

    def test_informative_outrank_noise_in_snr(self):
        atlas = build_synthetic_atlas(n_low=2, n_high=2, n_noise=4, seed=6)
        informative_snr = min(p.snr for p in atlas.parcels if p.roi_label is not None)
        noise_snr = max(p.snr for p in atlas.parcels if p.roi_label is None)
        assert informative_snr > noise_snr
