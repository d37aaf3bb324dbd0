import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from braindiff.atlas import (
    BrainSample,
    Parcel,
    ParcelAtlas,
    average_repetitions,
    atlas_with_estimated_snr,
    estimate_vertex_snr,
    pad_parcel_responses,
    select_top_k_parcels,
    subset_to_atlas,
    unpad_responses,
)
from braindiff.errors import DimensionError, ValidationError


def make_atlas(snrs_left, snrs_right, vertex_count=3):
    parcels = []
    next_id = 0
    for hemi, snrs in (("left", snrs_left), ("right", snrs_right)):
        for snr in snrs:
            parcels.append(Parcel(id=next_id, hemisphere=hemi, vertex_count=vertex_count, snr=snr))
            next_id += 1
    return ParcelAtlas(tuple(parcels))


class TestSelectTopK:
    def test_max_per_hemisphere(self):
        atlas = make_atlas([0.5, 0.9], [0.1, 0.7])
        selected = select_top_k_parcels(atlas, 1)
        assert [p.snr for p in selected.parcels] == [0.9, 0.7]
        assert [p.hemisphere for p in selected.parcels] == ["left", "right"]

    def test_tie_break_lowest_ids(self):
        atlas = make_atlas([0.5] * 4, [0.5] * 4)
        selected = select_top_k_parcels(atlas, 2)
        assert [p.id for p in selected.parcels] == [0, 1, 4, 5]

    def test_identity_when_k_is_hemisphere_size(self):
        atlas = make_atlas([0.3, 0.1, 0.2], [0.9, 0.8, 0.7])
        selected = select_top_k_parcels(atlas, 3)
        assert {p.id for p in selected.parcels} == {p.id for p in atlas.parcels}

    def test_insufficient_parcels_raises(self):
        atlas = make_atlas([0.5, 0.9], [0.1])
        with pytest.raises(DimensionError):
            select_top_k_parcels(atlas, 2)

    @given(
        snrs_left=st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=8),
        snrs_right=st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=8),
        data=st.data(),
    )
    @settings(max_examples=50, deadline=None)
    def test_selection_invariant(self, snrs_left, snrs_right, data):
        atlas = make_atlas(snrs_left, snrs_right)
        k = data.draw(st.integers(1, min(len(snrs_left), len(snrs_right))))
        selected = select_top_k_parcels(atlas, k)
        assert selected.size == 2 * k
        kept = {p.id for p in selected.parcels}
        for hemi in ("left", "right"):
            included = [p for p in atlas.hemisphere_parcels(hemi) if p.id in kept]
            excluded = [p for p in atlas.hemisphere_parcels(hemi) if p.id not in kept]
            for out in excluded:
                for inc in included:
                    assert out.snr < inc.snr or (out.snr == inc.snr and out.id > inc.id)


class TestPadding:
    def test_pads_with_zeros(self):
        atlas = ParcelAtlas(
            (
                Parcel(id=0, hemisphere="left", vertex_count=3, snr=1.0),
                Parcel(id=1, hemisphere="right", vertex_count=5, snr=1.0),
            )
        )
        sample = pad_parcel_responses([np.array([1.0, 2.0, 3.0]), np.zeros(5)], atlas)
        assert sample.responses.shape == (2, 5)
        np.testing.assert_array_equal(sample.responses[0], [1, 2, 3, 0, 0])
        np.testing.assert_array_equal(sample.valid[0], [True, True, True, False, False])

    def test_full_length_rows_unchanged(self):
        atlas = make_atlas([1.0], [1.0], vertex_count=4)
        raw = [np.arange(4, dtype=np.float32), np.arange(4, 8, dtype=np.float32)]
        sample = pad_parcel_responses(raw, atlas)
        assert sample.valid.all()
        np.testing.assert_array_equal(sample.responses, np.stack(raw))

    def test_wrong_length_raises(self):
        atlas = make_atlas([1.0], [1.0], vertex_count=3)
        with pytest.raises(DimensionError):
            pad_parcel_responses([np.array([]), np.zeros(3)], atlas)

    @given(data=st.data())
    @settings(max_examples=30, deadline=None)
    def test_pad_unpad_roundtrip(self, data):
        counts = data.draw(st.lists(st.integers(1, 6), min_size=2, max_size=6))
        parcels = tuple(
            Parcel(id=i, hemisphere="left" if i % 2 else "right", vertex_count=c, snr=1.0)
            for i, c in enumerate(counts)
        )
        atlas = ParcelAtlas(parcels)
        raw = [
            np.asarray(data.draw(st.lists(st.floats(-5, 5, width=32), min_size=c, max_size=c)), dtype=np.float32)
            for c in counts
        ]
        sample = pad_parcel_responses(raw, atlas)
        recovered = unpad_responses(sample)
        for original, back in zip(raw, recovered):
            np.testing.assert_array_equal(original, back)


class TestAverageRepetitions:
    def _sample(self, values, stimulus_id="s"):
        responses = np.asarray(values, dtype=np.float32)
        return BrainSample(stimulus_id=stimulus_id, responses=responses, valid=np.ones_like(responses, bool))

    def test_single_sample_unchanged(self):
        sample = self._sample([[1.0, 2.0]])
        averaged = average_repetitions([sample])
        np.testing.assert_array_equal(averaged.responses, sample.responses)
        assert averaged.repetitions_averaged == 1

    def test_opposite_values_cancel(self):
        a = self._sample([[1.5, -2.0]])
        b = self._sample([[-1.5, 2.0]])
        averaged = average_repetitions([a, b])
        np.testing.assert_array_equal(averaged.responses, np.zeros((1, 2), dtype=np.float32))
        assert averaged.repetitions_averaged == 2

    def test_mean_of_three(self):
        samples = [self._sample([[float(v)]]) for v in (1, 2, 3)]
        averaged = average_repetitions(samples)
        assert averaged.responses[0, 0] == pytest.approx(2.0)
        assert averaged.repetitions_averaged == 3

    def test_mixed_stimulus_ids_raise(self):
        with pytest.raises(ValidationError):
            average_repetitions([self._sample([[1.0]], "a"), self._sample([[1.0]], "b")])

    def test_permutation_invariant(self, rng):
        samples = [self._sample(rng.normal(size=(3, 4)).astype(np.float32)) for _ in range(4)]
        forward = average_repetitions(samples)
        backward = average_repetitions(samples[::-1])
        np.testing.assert_array_equal(forward.responses, backward.responses)


class TestBrainSampleInvariants:
    def test_nonzero_padding_rejected(self):
        responses = np.array([[1.0, 2.0]], dtype=np.float32)
        valid = np.array([[True, False]])
        with pytest.raises(ValidationError):
            BrainSample(stimulus_id="s", responses=responses, valid=valid)


class TestSnrEstimation:
    def test_known_signal_to_noise(self, rng):
        n_stim, n_rep = 200, 10
        signal = rng.normal(0, 2.0, size=(n_stim, 1, 3))
        noise = rng.normal(0, 1.0, size=(n_stim, n_rep, 3))
        snr = estimate_vertex_snr(signal + noise)
        # signal var 4, noise var 1 -> mean estimate should be near 4 + 1/R
        assert np.all(snr > 2.5) and np.all(snr < 6.5)

    def test_atlas_update(self, atlas6, rng):
        blocks = [rng.normal(size=(10, 4, p.vertex_count)) for p in atlas6.parcels]
        updated = atlas_with_estimated_snr(atlas6, blocks)
        assert updated.size == atlas6.size
        assert all(p.snr >= 0 for p in updated.parcels)

    def test_requires_repetitions(self):
        with pytest.raises(ValidationError):
            estimate_vertex_snr(np.zeros((3, 1, 2)))


class TestSubset:
    def test_subset_preserves_valid_entries(self, atlas6):
        raw = [np.arange(p.vertex_count, dtype=np.float32) + p.id for p in atlas6.parcels]
        sample = pad_parcel_responses(raw, atlas6)
        sub = select_top_k_parcels(atlas6, 2)
        reduced = subset_to_atlas(sample, atlas6, sub)
        assert reduced.responses.shape == (sub.size, sub.v_max)
        for i, parcel in enumerate(sub.parcels):
            source = raw[atlas6.index_of(parcel.id)]
            np.testing.assert_array_equal(reduced.responses[i, : parcel.vertex_count], source)
