import numpy as np
import pytest

from stnforecast.core import ops
from stnforecast.core.errors import ConfigError, DimensionError, InputError
from stnforecast.core.gradcheck import grad_check
from stnforecast.core.tensor import Tape, Tensor, backward
from stnforecast.models.config import PRESETS, ModelConfig, Variant, preset
from stnforecast.models.layers import Conv3dBlock, Linear
from stnforecast.models.stn import (
    build_model, count_macs, count_params, forward, loss_l2, spatial_branch_forward,
)

from tests.test_tensor_ops import naive_conv3d

ALL_VARIANTS = list(Variant)


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


class TestBuildModel:
    def test_same_seed_same_parameters(self, tiny_config):
        a = build_model(tiny_config(), seed=5).parameters()
        b = build_model(tiny_config(), seed=5).parameters()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_different_seed_differs(self, tiny_config):
        a = build_model(tiny_config(), seed=1).parameters()
        b = build_model(tiny_config(), seed=2).parameters()
        assert any(not np.array_equal(a[k].data, b[k].data) for k in a if k.endswith("weight"))

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_every_variant_builds_and_predicts(self, variant, tiny_config, rng):
        model = build_model(tiny_config(variant))
        out = forward(model.eval(), rng.normal(size=(3, 5, 5)))
        assert out.shape == (1,)
        assert np.isfinite(out.data).all()

    def test_flat_lstm_has_no_conv_or_fusion(self, tiny_config):
        names = build_model(tiny_config(Variant.LSTM_FLAT)).parameters().keys()
        assert not any("spatial" in n or "fusion" in n or "kernels" in n for n in names)

    def test_variants_share_temporal_branches(self, tiny_config):
        def temporal(variant):
            return count_params(build_model(tiny_config(variant)).stages[0].temporal)

        assert temporal(Variant.STN) == temporal(Variant.STN_TF)
        assert temporal(Variant.STN_SLSTM) == temporal(Variant.STN_SLSTM_TF)

    def test_stacked_stages(self, tiny_config):
        model = build_model(tiny_config(b=2))
        assert len(model.stages) == 2
        names = model.parameters().keys()
        assert "stage1.spatial_in.weight" in names and "stage1.temporal_in.weight" in names

    def test_preset_resolves(self):
        config = preset("table2-best")
        assert (config.h, config.b, config.a, config.l, config.f) == (64, 2, 4, 2, 8)
        build_model(config)

    def test_preset_parameter_count_is_in_calibration_band(self):
        params = count_params(build_model(preset("table2-best")))
        assert 100_000 <= params <= 250_000

    @pytest.mark.parametrize("name", list(PRESETS))
    def test_all_presets_are_valid(self, name):
        preset(name).check()

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("table9")

    def test_divisibility_is_checked(self):
        with pytest.raises(ConfigError, match="a=3"):
            build_model(ModelConfig(h=8, a=3, variant=Variant.STN_SLSTM))
        with pytest.raises(ConfigError, match="f=3"):
            build_model(ModelConfig(h=8, f=3, variant=Variant.STN_TF))


class TestForward:
    def test_zero_head_predicts_zero(self, tiny_config, rng):
        model = build_model(tiny_config())
        model.head.out.weight.data[...] = 0.0
        model.head.out.bias.data[...] = 0.0
        np.testing.assert_array_equal(forward(model, rng.normal(size=(4, 3, 5, 5))).data, 0.0)

    def test_horizon_width(self, tiny_config, rng):
        model = build_model(tiny_config(tau=3)).eval()
        assert forward(model, rng.normal(size=(2, 3, 5, 5))).shape == (2, 3)

    def test_inference_is_deterministic(self, tiny_config, rng):
        model = build_model(tiny_config()).eval()
        window = rng.normal(size=(3, 5, 5))
        np.testing.assert_array_equal(forward(model, window).data, forward(model, window).data)

    def test_nan_input_names_index(self, tiny_config):
        window = np.zeros((3, 5, 5))
        window[1, 2, 3] = np.nan
        with pytest.raises(InputError, match=r"\(1, 2, 3\)"):
            forward(build_model(tiny_config()), window)

    def test_wrong_window_shape(self, tiny_config):
        with pytest.raises(DimensionError):
            forward(build_model(tiny_config()), np.zeros((4, 5, 5)))

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_full_gradient_check(self, variant, tiny_config, rng):
        model = build_model(tiny_config(variant), seed=3, dtype=np.float64)
        window = rng.normal(size=(2, 3, 5, 5))
        targets = rng.normal(size=(2, 1))

        def fn(p):
            return loss_l2(forward(model, window), targets)

        assert grad_check(fn, model.parameters(), coords_per_tensor=3) < 1e-3


class TestSpatialBranch:
    def test_zero_input_gives_zero_features(self):
        model = build_model(ModelConfig(h=16, r=5, n=6, variant=Variant.STN))
        branch = model.stages[0].spatial
        out = spatial_branch_forward(Tensor(np.zeros((1, 6, 11, 11))), branch)
        assert out.shape == (6, 16)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_single_stage_against_naive_conv(self, rng):
        block = Conv3dBlock(1, 2, rng, dtype=np.float64).eval()
        block.bias.data[...] = rng.normal(size=2)
        x = rng.normal(size=(1, 1, 4, 5, 5))
        out = block(Tensor(x, dtype=np.float64)).data[0]
        conv = naive_conv3d(x[0], block.kernels.data, block.bias.data, (1, 1, 1))
        np.testing.assert_allclose(out, gelu(conv / np.sqrt(1 + 1e-5)), atol=1e-10)


class TestLoss:
    def test_equal_is_zero(self):
        p = Tensor([[1.0, 2.0]])
        assert loss_l2(p, Tensor([[1.0, 2.0]])).item() == 0.0

    def test_hand_value(self):
        assert loss_l2(Tensor([[1.0], [2.0]]), Tensor([[0.0], [0.0]])).item() == pytest.approx(2.5)

    def test_gradient(self, rng):
        p = Tensor(rng.normal(size=(3, 2)), requires_grad=True, dtype=np.float64)
        t = rng.normal(size=(3, 2))
        with Tape() as tape:
            loss = loss_l2(p, Tensor(t, dtype=np.float64))
        backward(tape, loss)
        np.testing.assert_allclose(p.grad, 2 * (p.data - t) / 6, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss_l2(Tensor(np.zeros((2, 1))), Tensor(np.zeros((1, 2))))


class TestAccounting:
    def test_affine(self, rng):
        layer = Linear(10, 5, rng)
        assert count_params(layer) == 55
        assert count_macs(layer) == 50

    def test_conv3d_closed_form(self, rng):
        assert Conv3dBlock(1, 2, rng).macs((1, 6, 11, 11)) == 2 * 6 * 11 * 11 * 1 * 27

    def test_running_statistics_are_not_parameters(self, tiny_config):
        model = build_model(tiny_config(Variant.STN))
        assert count_params(model) == sum(t.size for t in model.parameters().values())
        assert all("running" not in name for name in model.parameters())

    def test_model_macs_use_default_window(self, tiny_config):
        model = build_model(tiny_config())
        assert count_macs(model) == count_macs(model, (3, 5, 5)) > 0

    def test_attention_fusion_costs_more_than_linear(self, tiny_config):
        assert count_macs(build_model(tiny_config(Variant.STN_TF))) > count_macs(build_model(tiny_config(Variant.STN)))

    def test_table2_best_breakdown(self):
        """At h=64 the shared Conv3D branch dominates both pairs; the recurrent branches differ by ~6.8M."""
        spatial = 6 * 11 * 11 * 27 * (1 * 16 + 16 * 32 + 32 * 64)
        convlstm = 6 * 11 * 11 * 4 * 16 * 9 * (1 + 16)
        slstm = 6 * 4 * ((121 * 64 + 4 * 16 * 16) + (64 * 64 + 4 * 16 * 16))
        second_stage_and_head = 2 * 6 * 64 * 64 + 6 * 128 * 64 + 64 * 64 + 64
        stn = count_macs(build_model(preset("table2-best", variant=Variant.STN)))
        stn_slstm = count_macs(build_model(preset("table2-best", variant=Variant.STN_SLSTM)))
        assert stn == spatial + convlstm + 6 * (64 + 16) * 64 + second_stage_and_head == 57_736_928
        assert stn_slstm == spatial + slstm + 6 * 128 * 64 + second_stage_and_head == 50_979_680

    def test_starved_spatial_branch_reaches_recurrent_cost_band(self):
        small = dict(conv_channels=[1, 1, 1], convlstm_channels=1)
        stn = count_macs(build_model(preset("table2-best", variant=Variant.STN, **small)))
        stn_slstm = count_macs(build_model(preset("table2-best", variant=Variant.STN_SLSTM, **small)))
        assert (stn, stn_slstm) == (214_310, 519_542)
        assert 2 <= stn_slstm / stn <= 8
