import numpy as np
import pytest

from guided_deblur.analysis_net import (
    AnalysisConfig,
    build_analysis,
    estimate_kernel,
    kernel_l1,
    normalize_kernel_head,
)
from guided_deblur.errors import ShapeError
from guided_deblur.tensor import Tensor, relu
from guided_deblur.xcorr import correlation_map, cross_correlate, pair_count


def small_config(**overrides) -> AnalysisConfig:
    values = dict(
        levels=2,
        feat_channels=4,
        reduced_channels=3,
        feat_kernel=3,
        convs_per_level=1,
        integrate_kernel=3,
        head_channels=[4, 1],
        m=9,
    )
    values.update(overrides)
    return AnalysisConfig(**values)


def expected_parameter_count(cfg: AnalysisConfig) -> int:
    f, r, k = cfg.feat_channels, cfg.reduced_channels, cfg.feat_kernel
    p = pair_count(r, cfg.pair_mode)
    total = 0
    for level in range(cfg.levels):
        for c in range(cfg.convs_per_level):
            fan = 1 if level == 0 and c == 0 else f
            total += fan * f * k * k + f
        total += f * r + r
        total += p * r + r
    for _ in range(cfg.levels - 1):
        total += r * r * cfg.integrate_kernel**2 + r
        total += 2 * r * r + r
    in_channels = r
    for channels in cfg.head_channels:
        total += in_channels * channels * cfg.head_kernel**2 + channels
        in_channels = channels
    return total


class TestConfig:
    def test_even_m(self):
        with pytest.raises(ValueError):
            small_config(m=8)

    def test_head_must_end_with_one(self):
        with pytest.raises(ValueError):
            small_config(head_channels=[4, 2])


class TestBuild:
    def test_toy_parameter_count(self):
        cfg = AnalysisConfig(levels=2, feat_channels=8, reduced_channels=4, m=17)
        net = build_analysis(cfg, np.random.default_rng(0))
        assert net.parameter_count() == expected_parameter_count(cfg)

    def test_same_seed_same_parameters(self):
        a = build_analysis(small_config(), np.random.default_rng(7))
        b = build_analysis(small_config(), np.random.default_rng(7))
        for name, tensor in a.named_parameters():
            assert np.array_equal(tensor.data, b.params[name].data)

    def test_paper_config_shapes(self):
        net = build_analysis(AnalysisConfig(), np.random.default_rng(0))
        shapes = dict(net.trace_shapes(512, 512))
        assert shapes["level0.xcorr"] == (1, 528, 85, 85)
        assert shapes["level1.xcorr"] == (1, 528, 43, 43)
        assert shapes["level2.xcorr"] == (1, 528, 21, 21)
        assert shapes["kernel"] == (1, 1, 85, 85)


class TestEstimateKernel:
    def test_admissible(self, rng):
        net = build_analysis(small_config(), rng)
        k = estimate_kernel(net, rng.standard_normal((2, 1, 16, 16)).astype(np.float32))
        assert k.shape == (2, 1, 9, 9)
        assert (k.data >= 0).all()
        np.testing.assert_allclose(k.data.sum(axis=(1, 2, 3)), 1.0, atol=1e-5)

    def test_not_constant(self, rng):
        net = build_analysis(small_config(), rng, dtype=np.float64)
        a = estimate_kernel(net, rng.standard_normal((1, 1, 16, 16))).data
        b = estimate_kernel(net, rng.standard_normal((1, 1, 16, 16))).data
        assert not np.array_equal(a, b)

    def test_indivisible_input(self, rng):
        net = build_analysis(small_config(), rng)
        with pytest.raises(ShapeError):
            estimate_kernel(net, np.zeros((1, 1, 15, 16), dtype=np.float32))

    def test_rejects_rgb(self, rng):
        net = build_analysis(small_config(), rng)
        with pytest.raises(ShapeError):
            estimate_kernel(net, np.zeros((1, 3, 16, 16), dtype=np.float32))


class TestNormalizeHead:
    def test_constant_gives_uniform(self):
        k, flags = normalize_kernel_head(Tensor(np.full((1, 1, 5, 5), 3.0)))
        np.testing.assert_allclose(k.data, np.full((1, 1, 5, 5), 1 / 25), atol=1e-9)
        assert not flags.any()

    def test_clamp_and_renormalize(self):
        k, _ = normalize_kernel_head(Tensor(np.array([[[[-1.0, 2.0, 2.0]]]])))
        np.testing.assert_allclose(k.data[0, 0, 0], [0.0, 0.5, 0.5], atol=1e-8)

    def test_degenerate_falls_back_to_delta(self):
        k, flags = normalize_kernel_head(Tensor(-np.ones((2, 1, 3, 3))))
        assert flags.tolist() == [True, True]
        expected = np.zeros((3, 3))
        expected[1, 1] = 1.0
        np.testing.assert_array_equal(k.data[0, 0], expected)


def test_kernel_l1_against_delta():
    a = np.zeros((3, 3))
    a[1, 2] = 1.0
    assert kernel_l1(a) == pytest.approx(2.0)
    assert kernel_l1(a, a) == 0.0


class TestCorrelationStage:
    def test_delta_image_peaks_at_zero_shift(self, rng):
        net = build_analysis(small_config(), rng, dtype=np.float64)
        y = np.zeros((1, 1, 16, 16))
        y[0, 0, 8, 8] = 1.0
        reduced = relu(net.conv("level0.reduce", relu(net.conv("level0.feat0", Tensor(y)))))
        spec = net.correlation_spec(0)
        corr = cross_correlate(reduced, spec).data
        r = spec.radius
        for i in range(spec.channels):
            auto = correlation_map(corr, i, i, spec)[0]
            assert auto[r, r] == auto.max()

    def test_delta_features_auto_correlate_only_at_zero_shift(self, rng):
        net = build_analysis(small_config(), rng, dtype=np.float64)
        spec = net.correlation_spec(0)
        features = np.zeros((1, spec.channels, 16, 16))
        features[:, :, 8, 8] = 1.0
        corr = cross_correlate(Tensor(features), spec).data
        expected = np.zeros((spec.extent, spec.extent))
        expected[spec.radius, spec.radius] = 1.0 / 256
        for i in range(spec.channels):
            np.testing.assert_allclose(correlation_map(corr, i, i, spec)[0], expected, atol=1e-12)

    def test_kernel_ignores_translation_of_content(self, rng):
        net = build_analysis(small_config(), rng, dtype=np.float64)
        patch = rng.standard_normal((8, 8))
        y = np.zeros((1, 1, 48, 48))
        moved = np.zeros_like(y)
        y[0, 0, 16:24, 16:24] = patch
        # maxpool2 の格子に合わせて偶数だけずらす
        moved[0, 0, 18:26, 20:28] = patch
        other = np.zeros_like(y)
        other[0, 0, 16:24, 16:24] = rng.standard_normal((8, 8))
        k = estimate_kernel(net, y).data
        np.testing.assert_allclose(estimate_kernel(net, moved).data, k, atol=1e-8)
        assert not np.allclose(estimate_kernel(net, other).data, k, atol=1e-8)
