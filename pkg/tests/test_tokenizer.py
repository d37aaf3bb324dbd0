import numpy as np
import pytest
import torch

from braindiff.atlas import pad_parcel_responses
from braindiff.errors import DimensionError
from braindiff.tokenizer import (
    ParcelLinearMaps,
    apply_token_dropout,
    encode,
    load_parcel_maps,
    save_parcel_maps,
)

from conftest import small_atlas


def naive_encode(responses: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Per-sample, per-parcel loop oracle for the batched einsum."""
    n, p, v = responses.shape
    f = weight.shape[-1]
    out = np.zeros((n, p, f))
    for s in range(n):
        for i in range(p):
            out[s, i] = responses[s, i] @ weight[i] + bias[i]
    return out


class TestEncode:
    def test_zero_responses_zero_tokens(self):
        maps = ParcelLinearMaps(3, 4, token_dim=5)
        tokens = maps(torch.zeros(2, 3, 4))
        torch.testing.assert_close(tokens, torch.zeros(2, 3, 5))

    def test_identity_maps_return_padded_rows(self):
        maps = ParcelLinearMaps(2, 4, token_dim=4)
        with torch.no_grad():
            maps.weight.copy_(torch.eye(4).expand(2, 4, 4))
            maps.bias.zero_()
        responses = torch.randn(3, 2, 4)
        torch.testing.assert_close(maps(responses), responses)

    def test_matches_naive_loop_oracle(self, rng):
        maps = ParcelLinearMaps(5, 6, token_dim=7, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            maps.bias.normal_(generator=torch.Generator().manual_seed(4))
        responses = rng.normal(size=(4, 5, 6)).astype(np.float32)
        expected = naive_encode(
            responses.astype(np.float64),
            maps.weight.detach().numpy().astype(np.float64),
            maps.bias.detach().numpy().astype(np.float64),
        )
        actual = maps(torch.from_numpy(responses)).detach().numpy()
        np.testing.assert_allclose(actual, expected, atol=1e-5)

    def test_encode_samples_interface(self, rng):
        atlas = small_atlas()
        raw = [rng.normal(size=p.vertex_count).astype(np.float32) for p in atlas.parcels]
        sample = pad_parcel_responses(raw, atlas)
        maps = ParcelLinearMaps(atlas.size, atlas.v_max, token_dim=8)
        tokens = encode([sample, sample], maps)
        assert tokens.shape == (2, atlas.size, 8)
        torch.testing.assert_close(tokens[0], tokens[1])

    def test_shape_mismatch_raises(self):
        maps = ParcelLinearMaps(3, 4, token_dim=5)
        with pytest.raises(DimensionError):
            maps(torch.zeros(1, 3, 9))

    def test_linearity(self, rng):
        maps = ParcelLinearMaps(3, 4, token_dim=5, bias=False)
        x = torch.from_numpy(rng.normal(size=(2, 3, 4)).astype(np.float32))
        y = torch.from_numpy(rng.normal(size=(2, 3, 4)).astype(np.float32))
        combined = maps(2.0 * x + 3.0 * y)
        torch.testing.assert_close(combined, 2.0 * maps(x) + 3.0 * maps(y), rtol=1e-5, atol=1e-5)

    def test_padded_positions_inert(self, rng):
        """Invalid positions are zero by construction; garbage written there
        and re-masked to zero must not change the embeddings."""
        atlas = small_atlas()
        raw = [rng.normal(size=p.vertex_count).astype(np.float32) for p in atlas.parcels]
        sample = pad_parcel_responses(raw, atlas)
        maps = ParcelLinearMaps(atlas.size, atlas.v_max, token_dim=6)
        baseline = maps.encode_samples([sample])
        perturbed = sample.responses.copy()
        perturbed[~sample.valid] = 99.0
        perturbed[~sample.valid] = 0.0
        again = maps(torch.from_numpy(perturbed[None]))
        torch.testing.assert_close(baseline, again)

    def test_shared_map_variant(self, rng):
        maps = ParcelLinearMaps(4, 3, token_dim=5, shared=True)
        responses = torch.from_numpy(rng.normal(size=(2, 4, 3)).astype(np.float32))
        tokens = maps(responses)
        single = maps.weight[0]
        expected = responses.to(single.dtype) @ single + maps.bias[0]
        torch.testing.assert_close(tokens, expected)


class TestTokenDropout:
    def test_rate_one_keeps_all(self):
        tokens = torch.randn(3, 5, 4)
        dropped, mask = apply_token_dropout(tokens, rate=1.0)
        torch.testing.assert_close(dropped, tokens)
        assert mask.mask.min() == 1.0

    def test_rate_zero_drops_all(self):
        tokens = torch.randn(3, 5, 4)
        dropped, mask = apply_token_dropout(tokens, rate=0.0)
        torch.testing.assert_close(dropped, torch.zeros_like(tokens))
        assert mask.mask.max() == 0.0

    def test_inference_mode_identity(self):
        tokens = torch.randn(2, 4, 3)
        dropped, mask = apply_token_dropout(tokens, training=False)
        torch.testing.assert_close(dropped, tokens)
        assert mask.mask.min() == 1.0

    def test_forced_rate_monte_carlo(self):
        g = torch.Generator().manual_seed(123)
        tokens = torch.ones(100, 100, 1)  # 10,000 parcel tokens
        _, mask = apply_token_dropout(tokens, generator=g, rate=0.3)
        kept = float(mask.mask.mean())
        assert 0.28 <= kept <= 0.32

    def test_mask_constant_across_embedding_axis(self):
        g = torch.Generator().manual_seed(5)
        tokens = torch.randn(4, 6, 8)
        dropped, mask = apply_token_dropout(tokens, generator=g)
        assert mask.mask.shape == (4, 6, 1)
        zeroed = mask.mask[:, :, 0] == 0
        assert torch.all(dropped[zeroed] == 0.0)
        kept = mask.mask[:, :, 0] == 1
        torch.testing.assert_close(dropped[kept], tokens[kept])

    def test_per_sample_rates_drawn(self):
        g = torch.Generator().manual_seed(11)
        tokens = torch.ones(64, 50, 2)
        _, mask = apply_token_dropout(tokens, generator=g)
        rates = mask.rates_drawn
        assert rates.shape == (64,)
        assert rates.min() >= 0.0 and rates.max() <= 1.0
        assert rates.std() > 0.1  # genuinely per-sample, not one shared draw


class TestGradients:
    def test_mapper_gradient_matches_finite_differences(self, rng):
        torch.manual_seed(0)
        maps = ParcelLinearMaps(2, 3, token_dim=2).double()
        responses = torch.from_numpy(rng.normal(size=(2, 2, 3))).double()
        target = torch.from_numpy(rng.normal(size=(2, 2, 2))).double()

        def loss_fn():
            return ((maps(responses) - target) ** 2).sum()

        loss = loss_fn()
        loss.backward()
        analytic = maps.weight.grad.clone()
        eps = 1e-6
        for index in [(0, 0, 0), (1, 2, 1), (0, 1, 1)]:
            with torch.no_grad():
                maps.weight[index] += eps
                up = loss_fn().item()
                maps.weight[index] -= 2 * eps
                down = loss_fn().item()
                maps.weight[index] += eps
            numeric = (up - down) / (2 * eps)
            rel = abs(numeric - analytic[index].item()) / max(abs(numeric), 1e-12)
            assert rel < 1e-4


class TestSerialization:
    def test_roundtrip_by_parcel_id(self, tmp_path, rng):
        maps = ParcelLinearMaps(3, 4, token_dim=5, generator=torch.Generator().manual_seed(0))
        ids = [10, 20, 30]
        path = tmp_path / "maps.npz"
        save_parcel_maps(maps, ids, path)
        with np.load(path) as data:
            assert "weight_20" in data.files and "bias_20" in data.files
        loaded, loaded_ids = load_parcel_maps(path)
        assert loaded_ids == ids
        torch.testing.assert_close(loaded.weight, maps.weight)
        torch.testing.assert_close(loaded.bias, maps.bias)
