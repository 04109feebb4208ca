import numpy as np
import pytest

from stnforecast.core import ops
from stnforecast.core.errors import ConfigError, DimensionError
from stnforecast.core.gradcheck import grad_check
from stnforecast.core.tensor import Tensor
from stnforecast.models.fusion import (
    CrossAttention, FusionBlock, FusionConfig, LinearFusion, TransformerFusion, cross_attention, fusion_block,
    linear_fusion,
)


def f64(values):
    return Tensor(np.asarray(values, dtype=np.float64), dtype=np.float64)


def identity_attention(d, heads=1):
    attention = CrossAttention(d, heads, np.random.default_rng(0), np.float64)
    for proj in (attention.q, attention.k, attention.v, attention.out):
        proj.weight.data[...] = np.eye(d)
        proj.bias.data[...] = 0.0
    return attention


class TestCrossAttention:
    def test_single_key_returns_its_value(self, rng):
        attention = identity_attention(4)
        temporal = rng.normal(size=(1, 4))
        out = cross_attention(f64(rng.normal(size=(3, 4))), f64(temporal), attention)
        np.testing.assert_allclose(out.data, np.repeat(temporal, 3, axis=0), atol=1e-12)

    def test_identical_keys_average_the_values(self, rng):
        attention = identity_attention(4)
        attention.k.weight.data[...] = 0.0
        temporal = rng.normal(size=(5, 4))
        out = cross_attention(f64(rng.normal(size=(2, 4))), f64(temporal), attention)
        np.testing.assert_allclose(out.data, np.tile(temporal.mean(axis=0), (2, 1)), atol=1e-12)

    def test_hand_two_key_case(self):
        attention = identity_attention(2)
        out = cross_attention(f64([[1.0, 0.0]]), f64([[1.0, 0.0], [0.0, 1.0]]), attention)
        w = np.exp(1 / np.sqrt(2)) / (np.exp(1 / np.sqrt(2)) + 1)
        assert w == pytest.approx(0.6698, abs=1e-4)
        np.testing.assert_allclose(out.data[0], [w, 1 - w], atol=1e-12)

    def test_weight_rows_sum_to_one(self, rng):
        attention = CrossAttention(8, 4, rng, np.float64)
        probs = attention.weights(f64(rng.normal(size=(2, 3, 8))), f64(rng.normal(size=(2, 5, 8)))).data
        assert probs.shape == (2, 4, 3, 5)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)

    def test_output_in_convex_hull_of_values(self, rng):
        attention = identity_attention(4, heads=2)
        temporal = rng.normal(size=(6, 4))
        out = cross_attention(f64(rng.normal(size=(3, 4))), f64(temporal), attention).data
        assert (out <= temporal.max(axis=0) + 1e-12).all()
        assert (out >= temporal.min(axis=0) - 1e-12).all()

    def test_permuting_temporal_tokens(self, rng):
        attention = CrossAttention(8, 2, rng, np.float64)
        spatial, temporal = rng.normal(size=(3, 8)), rng.normal(size=(6, 8))
        a = cross_attention(f64(spatial), f64(temporal), attention).data
        b = cross_attention(f64(spatial), f64(temporal[rng.permutation(6)]), attention).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ConfigError):
            CrossAttention(6, 4, rng)
        with pytest.raises(ConfigError):
            FusionConfig(embed_dim=6, heads=4).check()

    def test_width_mismatch(self, rng):
        attention = CrossAttention(4, 2, rng)
        with pytest.raises(DimensionError):
            attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3))))

    def test_gradient(self, rng):
        attention = CrossAttention(4, 2, rng, np.float64)
        params = attention.parameters()
        params["spatial"] = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, dtype=np.float64)
        params["temporal"] = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True, dtype=np.float64)
        weights = f64(rng.normal(size=(2, 3, 4)))

        def fn(p):
            return ops.sum(ops.mul(attention(p["spatial"], p["temporal"]), weights))

        assert grad_check(fn, params) < 1e-4


class TestFusionBlock:
    def test_zero_sublayers_reduce_to_layer_norm(self, rng):
        block = FusionBlock(4, 2, 8, rng, np.float64)
        for name, tensor in block.named_parameters():
            if name.startswith(("attention", "feedforward")):
                tensor.data[...] = 0.0
        spatial = rng.normal(size=(3, 4))
        out = fusion_block(f64(spatial), f64(rng.normal(size=(5, 4))), block).data
        centered = spatial - spatial.mean(axis=-1, keepdims=True)
        expected = centered / np.sqrt(spatial.var(axis=-1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(out, expected, atol=1e-4)

    def test_one_block_is_the_two_sublayers(self, rng):
        fusion = TransformerFusion(FusionConfig(embed_dim=4, heads=2, blocks=1, feedforward_dim=8), rng, np.float64)
        block = fusion.blocks[0]
        spatial, temporal = f64(rng.normal(size=(3, 4))), f64(rng.normal(size=(5, 4)))
        x = block.norm1(ops.add(spatial, block.attention(spatial, temporal)))
        manual = block.norm2(ops.add(x, block.feedforward(x)))
        np.testing.assert_array_equal(fusion(spatial, temporal).data, manual.data)

    def test_without_feedforward(self, rng):
        block = FusionBlock(4, 2, 0, rng)
        assert block.feedforward is None
        assert not any(name.startswith("feedforward") for name, _ in block.named_parameters())

    def test_gradient(self, rng):
        fusion = TransformerFusion(FusionConfig(embed_dim=4, heads=2, blocks=2, feedforward_dim=8), rng, np.float64)
        spatial, temporal = f64(rng.normal(size=(1, 3, 4))), f64(rng.normal(size=(1, 3, 4)))
        weights = f64(rng.normal(size=(1, 3, 4)))
        assert grad_check(lambda p: ops.sum(ops.mul(fusion(spatial, temporal), weights)), fusion.parameters()) < 1e-4


class TestLinearFusion:
    def test_zero_weights_give_bias(self, rng):
        fusion = LinearFusion(3, 2, 4, rng, np.float64)
        fusion.affine.weight.data[...] = 0.0
        fusion.affine.bias.data[...] = [1.0, -2.0, 3.0, 0.5]
        out = linear_fusion(f64(rng.normal(size=3)), f64(rng.normal(size=2)), fusion)
        np.testing.assert_array_equal(out.data, [1.0, -2.0, 3.0, 0.5])

    def test_selects_spatial_half(self, rng):
        fusion = LinearFusion(3, 2, 3, rng, np.float64)
        fusion.affine.weight.data[...] = np.vstack([np.eye(3), np.zeros((2, 3))])
        spatial = rng.normal(size=3)
        np.testing.assert_array_equal(linear_fusion(f64(spatial), f64(rng.normal(size=2)), fusion).data, spatial)

    def test_hand_affine(self, rng):
        fusion = LinearFusion(3, 2, 4, rng, np.float64)
        fusion.affine.bias.data[...] = rng.normal(size=4)
        s, t = rng.normal(size=3), rng.normal(size=2)
        expected = np.concatenate([s, t]) @ fusion.affine.weight.data + fusion.affine.bias.data
        np.testing.assert_allclose(linear_fusion(f64(s), f64(t), fusion).data, expected, atol=1e-12)

    def test_width_mismatch(self, rng):
        fusion = LinearFusion(3, 2, 4, rng)
        with pytest.raises(DimensionError):
            fusion(Tensor(np.zeros(2)), Tensor(np.zeros(2)))
