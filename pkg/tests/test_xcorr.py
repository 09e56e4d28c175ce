import numpy as np
import pytest

from guided_deblur.errors import ConfigError, ShapeError, UsageError
from guided_deblur.tensor import Tensor
from guided_deblur.xcorr import (
    CorrelationSpec,
    correlation_map,
    cross_correlate,
    level_radius,
    pair_count,
    pair_index,
    pair_list,
)


def brute_force(f, i, j, s, t):
    """Σ f_i(h−s, w−t)·f_j(h, w) / (H·W)"""
    h, w = f.shape[1:]
    total = 0.0
    for y in range(h):
        for x in range(w):
            if 0 <= y - s < h and 0 <= x - t < w:
                total += f[i, y - s, x - t] * f[j, y, x]
    return total / (h * w)


class TestPairIndex:
    def test_first_pair(self):
        assert pair_index(0, 0, 32) == 0

    def test_count_for_32_channels(self):
        assert pair_count(32) == 528
        assert pair_count(32, "ordered_offdiagonal") == 992
        assert CorrelationSpec(radius=1, channels=32).pair_count == 528

    def test_known_positions(self):
        assert pair_index(0, 31, 32) == 31
        assert pair_index(1, 1, 32) == 32
        assert pair_index(31, 31, 32) == 527

    @pytest.mark.parametrize("mode", ["unordered_with_diagonal", "ordered_offdiagonal"])
    def test_bijection_for_8_channels(self, mode):
        pairs = pair_list(8, mode)
        indices = [pair_index(i, j, 8, mode) for i, j in pairs]
        assert sorted(indices) == list(range(pair_count(8, mode)))

    def test_ordered_mode(self):
        assert [pair_index(i, j, 3, "ordered_offdiagonal") for i, j in pair_list(3, "ordered_offdiagonal")] == list(range(6))
        assert pair_list(3, "ordered_offdiagonal") == ((0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1))

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            pair_index(0, 4, 4)
        with pytest.raises(UsageError):
            pair_index(2, 1, 4)
        with pytest.raises(UsageError):
            pair_index(1, 1, 4, "ordered_offdiagonal")

    def test_level_radius_halves(self):
        assert [level_radius(85, level) for level in range(3)] == [42, 21, 10]
        assert [level_radius(17, level) for level in range(3)] == [8, 4, 2]


class TestCrossCorrelate:
    def test_zero_features(self):
        spec = CorrelationSpec(radius=2, channels=3)
        out = cross_correlate(Tensor(np.zeros((1, 3, 6, 6))), spec)
        assert out.shape == (1, 6, 5, 5)
        assert not out.data.any()

    def test_delta_image(self):
        f = np.zeros((1, 1, 7, 7))
        f[0, 0, 3, 3] = 1.0
        out = cross_correlate(Tensor(f), CorrelationSpec(radius=3, channels=1)).data[0, 0]
        expected = np.zeros((7, 7))
        expected[3, 3] = 1.0 / 49
        np.testing.assert_array_equal(out, expected)

    @pytest.mark.parametrize("mode", ["unordered_with_diagonal", "ordered_offdiagonal"])
    def test_matches_direct_summation(self, rng, mode):
        f = rng.standard_normal((1, 3, 5, 6))
        spec = CorrelationSpec(radius=2, channels=3, pair_mode=mode)
        out = cross_correlate(Tensor(f), spec).data
        for i, j in pair_list(3, mode):
            cmap = correlation_map(out, i, j, spec)[0]
            for s in range(-2, 3):
                for t in range(-2, 3):
                    assert cmap[s + 2, t + 2] == pytest.approx(brute_force(f[0], i, j, s, t), abs=1e-12)

    def test_mirrored_pairs_match_oracle(self, rng):
        f = rng.standard_normal((1, 2, 5, 5))
        spec = CorrelationSpec(radius=2, channels=2)
        out = cross_correlate(Tensor(f), spec).data
        cmap = correlation_map(out, 1, 0, spec)[0]
        for s in range(-2, 3):
            for t in range(-2, 3):
                assert cmap[s + 2, t + 2] == pytest.approx(brute_force(f[0], 1, 0, s, t), abs=1e-12)

    def test_symmetry_is_bit_exact(self, rng):
        f = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
        spec = CorrelationSpec(radius=3, channels=2, pair_mode="ordered_offdiagonal")
        out = cross_correlate(Tensor(f), spec).data
        c01 = correlation_map(out, 0, 1, spec)
        c10 = correlation_map(out, 1, 0, spec)
        assert np.array_equal(c01, c10[:, ::-1, ::-1])

    def test_autocorrelation_is_centrally_symmetric(self, rng):
        f = rng.standard_normal((1, 1, 6, 6))
        out = cross_correlate(Tensor(f), CorrelationSpec(radius=2, channels=1)).data[0, 0]
        assert np.array_equal(out, out[::-1, ::-1])

    def test_shift_keeps_zero_lag_energy(self):
        f = np.zeros((1, 1, 9, 9))
        f[0, 0, 3:5, 3:6] = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
        shifted = np.roll(f, (1, -1), axis=(2, 3))
        spec = CorrelationSpec(radius=1, channels=1)
        a = cross_correlate(Tensor(f), spec).data[0, 0, 1, 1]
        b = cross_correlate(Tensor(shifted), spec).data[0, 0, 1, 1]
        assert a == pytest.approx(b, abs=1e-12)

    def test_radius_too_large(self):
        with pytest.raises(ConfigError):
            cross_correlate(Tensor(np.ones((1, 1, 4, 4))), CorrelationSpec(radius=4, channels=1))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            cross_correlate(Tensor(np.ones((1, 2, 4, 4))), CorrelationSpec(radius=1, channels=3))
