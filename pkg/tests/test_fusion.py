"""Projector tests: shapes at published sizes, hand oracles, init statistics."""

import math

import numpy as np
import pytest
from scipy.special import erf

from tokenfusion import flops, fusion, pipeline
from tokenfusion import tensor as T
from tokenfusion.errors import ConfigError, ShapeMismatchError
from tokenfusion.fusion import (
    FeatureStack,
    FusionConfig,
    init_params,
    layer_shapes,
    select_block_indices,
)


def gelu64(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def tiny_config(**overrides):
    base = dict(
        encoder_depth=4, num_blocks=2, height=4, width=4, encoder_width=4,
        kernel=2, fused_tokens=1, llm_width=6, mbtf_hidden=8, stf_hidden=12,
    )
    base.update(overrides)
    return FusionConfig(**base)


class TestBlockSelection:
    def test_published_schedule(self):
        assert select_block_indices(24, 8) == [3, 6, 9, 12, 15, 18, 21, 24]

    def test_single_block_is_last(self):
        assert select_block_indices(24, 1) == [24]

    def test_even_spacing_rule(self):
        assert select_block_indices(12, 4) == [3, 6, 9, 12]

    def test_non_divisible_depth(self):
        with pytest.raises(ConfigError, match="divisible"):
            select_block_indices(24, 7)


class TestFusionConfig:
    def test_defaults_match_published_structure(self):
        cfg = FusionConfig()
        assert (cfg.encoder_depth, cfg.num_blocks) == (24, 8)
        assert (cfg.height, cfg.width, cfg.encoder_width) == (24, 24, 1024)
        assert (cfg.kernel, cfg.fused_tokens, cfg.llm_width) == (2, 1, 4096)
        assert cfg.mbtf_hidden == 4096 and cfg.stf_hidden == 16384

    def test_lossless_width_identity(self):
        # kernel 2 on 1024-wide features: fused width equals the LLM width.
        cfg = FusionConfig()
        assert cfg.fused_width == 4 * 1024 == cfg.llm_width

    def test_hidden_width_derivation_scales_with_kernel(self):
        cfg = fusion.replace_config(FusionConfig(), kernel=4)
        assert cfg.stf_hidden == 4 * 16 * 1024

    @pytest.mark.parametrize(
        "overrides, pattern",
        [
            (dict(num_blocks=3), "divisible"),  # 3 does not divide depth 4
            (dict(num_blocks=30), "exceeds"),
            (dict(kernel=5), "divide"),  # 5 does not divide height 4
            (dict(fused_tokens=9, kernel=2), "exceeds"),  # 9 > k^2 = 4
            (dict(encoder_width=5, kernel=2, fused_tokens=3), "divide"),  # 3 | 20 fails
        ],
    )
    def test_invariant_violations(self, overrides, pattern):
        with pytest.raises(ConfigError, match=pattern):
            tiny_config(**overrides)

    def test_unknown_config_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            fusion.config_from_mapping({"kernel": 2, "bogus": 1})


class TestInitParams:
    def test_same_seed_bit_identical(self):
        cfg = tiny_config(seed=7)
        a, b = init_params(cfg), init_params(cfg)
        for (name, la), (_, lb) in zip(a.items(), b.items()):
            assert la.weight.data.tobytes() == lb.weight.data.tobytes(), name
            assert la.bias.data.tobytes() == lb.bias.data.tobytes(), name

    def test_different_seed_differs(self):
        a = init_params(tiny_config(seed=0))
        b = init_params(tiny_config(seed=1))
        assert a["mbtf.conv1"].weight.data.tobytes() != b["mbtf.conv1"].weight.data.tobytes()

    def test_weights_within_fan_in_bound_and_biases_zero(self):
        cfg = tiny_config()
        params = init_params(cfg)
        for name, k, cin, cout in layer_shapes(cfg, "stf"):
            layer = params[name]
            bound = math.sqrt(1.0 / (k * k * cin))
            assert np.all(np.abs(layer.weight.data) < bound), name
            assert np.all(layer.bias.data == 0.0), name

    def test_empirical_weight_mean_near_zero(self):
        # uniform(-b, b): sigma = b / sqrt(3); mean of n draws ~ N(0, sigma^2/n)
        cfg = tiny_config(encoder_width=64, mbtf_hidden=128, stf_hidden=128,
                          llm_width=64)
        params = init_params(cfg)
        for name, k, cin, cout in layer_shapes(cfg, "stf"):
            w = params[name].weight.data
            bound = math.sqrt(1.0 / (k * k * cin))
            sigma = bound / math.sqrt(3.0)
            assert abs(float(w.mean())) < 3.0 * sigma / math.sqrt(w.size), name


@pytest.fixture(scope="module")
def default_run():
    """One full-size forward shared by the published-shape tests."""
    cfg = FusionConfig()
    params = init_params(cfg)
    stack = pipeline.gen_features(0, cfg)
    fused = fusion.mbtf_forward(stack, params, cfg)
    seq = fusion.stf_forward(fused, params, cfg)
    return cfg, params, stack, fused, seq


class TestPublishedShapes:
    def test_mbtf_output_shape(self, default_run):
        _, _, _, fused, _ = default_run
        assert fused.shape == (24, 24, 1024)

    def test_stf_token_shape(self, default_run):
        _, _, _, _, seq = default_run
        assert (seq.length, seq.width) == (144, 4096)
        assert np.all(np.isfinite(seq.data))

    def test_hidden_layer_widths(self, default_run):
        cfg, params, _, _, _ = default_run
        assert params["mbtf.conv1"].weight.shape == (1, 1, 8192, 4096)
        assert params["stf.conv1"].weight.shape == (2, 2, 1024, 4096)
        assert params["stf.conv2"].weight.shape == (1, 1, 4096, 16384)
        assert params["stf.conv3"].weight.shape == (1, 1, 16384, 4096)

    def test_default_param_count_closed_form(self, default_run):
        cfg, params, _, _, _ = default_run
        # independent arithmetic: sum of (k^2*Cin + 1) * Cout over the 5 layers
        expected = (
            (1 * 8192 + 1) * 4096
            + (1 * 4096 + 1) * 1024
            + (4 * 1024 + 1) * 4096
            + (1 * 4096 + 1) * 16384
            + (1 * 16384 + 1) * 4096
        )
        assert expected == 188_773_376
        assert params.param_count() == expected
        assert flops.projector_param_count(cfg) == expected

    def test_quarter_token_budget(self, default_run):
        cfg, _, _, _, seq = default_run
        assert seq.length / (cfg.height * cfg.width) == 0.25


class TestMbtf:
    def test_zero_params_give_zero_output(self):
        cfg = tiny_config()
        params = init_params(cfg)
        for _, layer in params.items():
            layer.weight.data[:] = 0.0
        stack = pipeline.gen_features(3, cfg)
        out = fusion.mbtf_forward(stack, params, cfg)
        assert np.all(out.data == 0.0)

    def test_hand_computed_oracle(self):
        # M=2 maps of 2x2x1; conv1 weights [1, 2] bias 0.5; conv2 weight 3
        # bias -1. Expected values computed by scalar hand evaluation of
        # gelu(3 * gelu(a + 2b + 0.5) - 1) at 30-digit precision.
        cfg = FusionConfig(
            encoder_depth=2, num_blocks=2, height=2, width=2, encoder_width=1,
            kernel=1, fused_tokens=1, llm_width=1, mbtf_hidden=1, stf_hidden=1,
        )
        params = init_params(cfg)
        params["mbtf.conv1"].weight.data[:] = np.array([1.0, 2.0]).reshape(1, 1, 2, 1)
        params["mbtf.conv1"].bias.data[:] = 0.5
        params["mbtf.conv2"].weight.data[:] = 3.0
        params["mbtf.conv2"].bias.data[:] = -1.0
        maps = np.stack([
            np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)[..., None],
            np.array([[0.5, -1.0], [2.0, 0.0]], dtype=np.float32)[..., None],
        ])
        stack = FeatureStack(maps=maps, block_indices=[1, 2])
        out = fusion.mbtf_forward(stack, params, cfg)
        expected = np.array(
            [[6.45342751, 0.01914860381], [21.5, 12.49995413]], dtype=np.float64
        )[..., None]
        np.testing.assert_allclose(out.data, expected, rtol=1e-5, atol=1e-7)

    def test_wrong_map_count(self):
        cfg = tiny_config()
        stack = pipeline.gen_features(0, tiny_config(num_blocks=4, encoder_depth=4))
        with pytest.raises(ShapeMismatchError, match="maps"):
            fusion.mbtf_forward(stack, init_params(cfg), cfg)


class TestStf:
    def test_identity_path_without_nonlinearity(self):
        # 1x1 identity convs everywhere and GeLU bypassed: each token equals
        # the input position's channel vector.
        cfg = FusionConfig(
            encoder_depth=1, num_blocks=1, height=3, width=3, encoder_width=5,
            kernel=1, fused_tokens=1, llm_width=5, mbtf_hidden=5, stf_hidden=5,
        )
        params = init_params(cfg)
        eye = np.eye(5, dtype=np.float32).reshape(1, 1, 5, 5)
        for name in ("stf.conv1", "stf.conv2", "stf.conv3"):
            params[name].weight.data[:] = eye
            params[name].bias.data[:] = 0.0
        x = np.random.default_rng(5).standard_normal((3, 3, 5)).astype(np.float32)
        seq = fusion.stf_forward(T.Tensor(x), params, cfg, act=T.identity)
        np.testing.assert_allclose(seq.data, x.reshape(9, 5), atol=1e-6)

    def test_window_enumeration_oracle(self):
        # straight-line float64 re-implementation applied window by window
        cfg = FusionConfig(
            encoder_depth=1, num_blocks=1, height=4, width=4, encoder_width=2,
            kernel=2, fused_tokens=1, llm_width=3, mbtf_hidden=2, stf_hidden=5,
            seed=0,
        )
        params = init_params(cfg)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 4, 2)).astype(np.float32)

        w1 = params["stf.conv1"].weight.data.astype(np.float64)
        b1 = params["stf.conv1"].bias.data.astype(np.float64)
        w2 = params["stf.conv2"].weight.data.astype(np.float64)[0, 0]
        b2 = params["stf.conv2"].bias.data.astype(np.float64)
        w3 = params["stf.conv3"].weight.data.astype(np.float64)[0, 0]
        b3 = params["stf.conv3"].bias.data.astype(np.float64)

        expected = []
        for wy in range(2):
            for wx in range(2):
                patch = x[2 * wy : 2 * wy + 2, 2 * wx : 2 * wx + 2, :].astype(np.float64)
                z1 = np.einsum("ijc,ijco->o", patch, w1) + b1
                a1 = gelu64(z1)
                a2 = gelu64(a1 @ w2 + b2)
                a3 = gelu64(a2 @ w3 + b3)
                expected.append(a3)
        expected = np.stack(expected)

        seq = fusion.stf_forward(T.Tensor(x), params, cfg)
        np.testing.assert_allclose(seq.data, expected, rtol=1e-5, atol=1e-6)

    def test_locality_of_disjoint_windows(self):
        cfg = tiny_config(fused_tokens=2)
        params = init_params(cfg)
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 4, 4)).astype(np.float32)
        base = fusion.stf_forward(T.Tensor(x), params, cfg).data
        modified = x.copy()
        modified[0:2, 0:2, :] += 1.0  # window (0, 0) only
        out = fusion.stf_forward(T.Tensor(modified), params, cfg).data
        e = cfg.fused_tokens
        assert not np.array_equal(out[:e], base[:e])
        np.testing.assert_array_equal(out[e:], base[e:])

    def test_token_count_and_width_invariant(self):
        for k, e in [(1, 1), (2, 1), (2, 2), (4, 4)]:
            cfg = tiny_config(height=8, width=8, kernel=k, fused_tokens=e)
            params = init_params(cfg)
            x = np.random.default_rng(k * 10 + e).standard_normal((8, 8, 4)).astype(np.float32)
            seq = fusion.stf_forward(T.Tensor(x), params, cfg)
            assert seq.length == (8 // k) * (8 // k) * e
            assert seq.width == cfg.llm_width


class TestComposedProjector:
    def test_degenerate_config_is_per_position_mlp(self):
        cfg = FusionConfig(
            encoder_depth=24, num_blocks=1, height=24, width=24, encoder_width=8,
            kernel=1, fused_tokens=1, llm_width=8, mbtf_hidden=8, stf_hidden=8,
        )
        params = init_params(cfg)
        stack = pipeline.gen_features(1, cfg)
        seq = fusion.projector_forward(stack, params, cfg)
        assert (seq.length, seq.width) == (576, 8)

    def test_bit_identical_given_same_inputs(self):
        cfg = tiny_config()
        params = init_params(cfg)
        stack = pipeline.gen_features(4, cfg)
        a = fusion.projector_forward(stack, params, cfg)
        b = fusion.projector_forward(stack, params, cfg)
        assert a.data.tobytes() == b.data.tobytes()
        assert a.source == "stf"


class TestBaselines:
    def test_avgpool_published_shape(self):
        cfg = FusionConfig()
        params = init_params(cfg, "avgpool")
        stack = pipeline.gen_features(2, cfg)
        seq = fusion.avgpool_projector(stack, params, cfg)
        assert (seq.length, seq.width) == (144, 4096)
        assert seq.source == "avgpool"

    def test_tokenconcat_published_shape(self):
        cfg = FusionConfig()
        params = init_params(cfg, "tokenconcat")
        stack = pipeline.gen_features(2, cfg)
        seq = fusion.tokenconcat_projector(stack, params, cfg)
        assert (seq.length, seq.width) == (144, 4096)

    def test_avgpool_constant_map_gives_identical_tokens(self):
        cfg = tiny_config()
        params = init_params(cfg, "avgpool")
        maps = np.full((2, 4, 4, 4), 0.75, dtype=np.float32)
        stack = FeatureStack(maps=maps, block_indices=[2, 4])
        seq = fusion.avgpool_projector(stack, params, cfg)
        np.testing.assert_array_equal(seq.data, np.tile(seq.data[0], (seq.length, 1)))

    def test_avgpool_identity_mlp_exposes_pooled_values(self):
        # identity MLP with GeLU bypassed: tokens are exactly the pooled map,
        # which must match the four-value-mean oracle.
        cfg = tiny_config(llm_width=4, mbtf_hidden=4, stf_hidden=4)
        params = init_params(cfg, "avgpool")
        eye = np.eye(4, dtype=np.float32).reshape(1, 1, 4, 4)
        for name in ("avgpool.conv1", "avgpool.conv2"):
            params[name].weight.data[:] = eye
            params[name].bias.data[:] = 0.0
        rng = np.random.default_rng(12)
        maps = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        stack = FeatureStack(maps=maps, block_indices=[2, 4])
        seq = fusion.avgpool_projector(stack, params, cfg, act=T.identity)
        pooled = np.zeros((2, 2, 4))
        for y in range(2):
            for x in range(2):
                for c in range(4):
                    window = maps[-1, 2 * y : 2 * y + 2, 2 * x : 2 * x + 2, c]
                    pooled[y, x, c] = float(window.astype(np.float64).sum()) / 4.0
        np.testing.assert_allclose(seq.data, pooled.reshape(4, 4), atol=1e-6)

    def test_tokenconcat_rearrangement_matches_one_hot_conv(self):
        cfg = tiny_config()
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 4, 4)).astype(np.float32)
        w = np.zeros((2, 2, 4, 16), dtype=np.float32)
        for i in range(2):
            for j in range(2):
                for c in range(4):
                    w[i, j, c, (i * 2 + j) * 4 + c] = 1.0
        via_conv = T.conv2d(
            T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(16, dtype=np.float32)), stride=2
        )
        np.testing.assert_allclose(
            T.space_to_depth(T.Tensor(x), 2).data, via_conv.data, atol=1e-6
        )

    def test_tokenconcat_preserves_value_multiset_before_mlp(self):
        x = np.random.default_rng(14).standard_normal((4, 4, 3)).astype(np.float32)
        out = T.space_to_depth(T.Tensor(x), 2)
        assert sorted(out.data.ravel().tolist()) == sorted(x.ravel().tolist())
