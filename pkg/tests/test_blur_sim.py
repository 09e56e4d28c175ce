import numpy as np
import pytest

from guided_deblur.blur_sim import (
    BlurKernel,
    TrajectoryConfig,
    apply_blur,
    crop_kernel,
    decode_kernel,
    encode_kernel,
    kernel_for,
    kernel_support_size,
    rasterize_kernel,
    read_kernel,
    sample_kernel,
    sample_trajectory,
    size_class,
    write_kernel,
)
from guided_deblur.errors import DecodeError


def naive_blur(channel, kernel):
    h, w = channel.shape
    m = kernel.shape[0]
    c = m // 2
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for u in range(m):
                for v in range(m):
                    sy, sx = y - (u - c), x - (v - c)
                    if 0 <= sy < h and 0 <= sx < w:
                        out[y, x] += channel[sy, sx] * kernel[u, v]
    return out


def scan_support(grid, mass=0.99):
    c = grid.shape[0] // 2
    total = grid.astype(np.float64).sum()
    sizes = [2 * half + 1 for half in range(c + 1) if grid[c - half : c + half + 1, c - half : c + half + 1].sum() >= mass * total - 1e-12]
    return min(sizes)


class TestBlurKernel:
    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            BlurKernel(m=3, grid=np.full((3, 3), 0.2))

    def test_rejects_even_size(self):
        with pytest.raises(ValueError):
            BlurKernel(m=2, grid=np.full((2, 2), 0.25))

    def test_uniform(self):
        k = BlurKernel.uniform(5, 3)
        assert k.grid[2, 2] == pytest.approx(1 / 9)
        assert k.grid[0, 0] == 0.0


class TestTrajectory:
    def test_zero_speed_is_a_point(self):
        path = sample_trajectory(np.random.default_rng(3), TrajectoryConfig(max_speed=0.0, m=17))
        assert not path.any()

    def test_seeded(self):
        cfg = TrajectoryConfig(m=17)
        a = sample_trajectory(np.random.default_rng(5), cfg)
        b = sample_trajectory(np.random.default_rng(5), cfg)
        assert np.array_equal(a, b)

    def test_centered(self, rng):
        path = sample_trajectory(rng, TrajectoryConfig())
        np.testing.assert_allclose(path.mean(axis=0), 0.0, atol=1e-9)

    def test_extent_grows_with_speed(self):
        means = []
        for speed in (1.0, 4.0, 10.0):
            cfg = TrajectoryConfig(max_speed=speed)
            extents = [np.ptp(sample_trajectory(np.random.default_rng(seed), cfg), axis=0).max() for seed in range(200)]
            means.append(np.mean(extents))
        assert means[0] < means[1] < means[2]


class TestRasterize:
    def test_point_without_psf_is_delta(self):
        assert rasterize_kernel(np.zeros((1, 2)), 9, 0.0).is_delta()

    def test_point_with_psf_matches_gaussian(self):
        k = rasterize_kernel(np.zeros((1, 2)), 9, 1.0).grid
        offsets = np.arange(-3, 4)
        gauss = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2) / 2.0)
        expected = np.zeros((9, 9))
        expected[1:8, 1:8] = gauss / gauss.sum()
        np.testing.assert_allclose(k, expected, atol=1e-6)

    def test_admissible_for_random_paths(self, rng):
        cfg = TrajectoryConfig(m=17, max_speed=6.0)
        for _ in range(20):
            k = sample_kernel(rng, cfg)
            assert k.grid.min() >= 0
            assert float(k.grid.sum(dtype=np.float64)) == pytest.approx(1.0, abs=1e-5)

    def test_path_is_scaled_to_fit(self):
        path = np.array([[-40.0, 0.0], [40.0, 0.0]])
        k = rasterize_kernel(path, 9, 0.0).grid
        assert k[4, 0] == pytest.approx(0.5)
        assert k[4, 8] == pytest.approx(0.5)

    def test_even_size(self):
        with pytest.raises(ValueError):
            rasterize_kernel(np.zeros((1, 2)), 8, 0.0)

    def test_seed_determinism(self):
        cfg = TrajectoryConfig(m=17)
        assert np.array_equal(kernel_for(cfg, 3, 11).grid, kernel_for(cfg, 3, 11).grid)
        assert not np.array_equal(kernel_for(cfg, 3, 11).grid, kernel_for(cfg, 3, 12).grid)


class TestApplyBlur:
    def test_delta_without_noise(self, rng):
        image = rng.uniform(size=(3, 8, 8))
        assert np.array_equal(apply_blur(image, BlurKernel.delta(5), noise_sigma=0.0), image)

    def test_uniform_on_ramp(self):
        ramp = np.tile(np.linspace(0.0, 1.0, 7), (7, 1))
        image = np.stack([ramp, ramp.T, ramp * 0.5])
        k = BlurKernel.uniform(3)
        out = apply_blur(image, k, noise_sigma=0.0)
        for c in range(3):
            np.testing.assert_allclose(out[c], naive_blur(image[c], k.grid.astype(np.float64)), atol=1e-6)

    def test_asymmetric_kernel_is_convolution(self, rng):
        grid = np.zeros((3, 3))
        grid[0, 0], grid[1, 1] = 0.25, 0.75
        image = rng.uniform(size=(1, 5, 5))
        out = apply_blur(image, BlurKernel(m=3, grid=grid), noise_sigma=0.0)
        np.testing.assert_allclose(out[0], naive_blur(image[0], grid.astype(np.float32).astype(np.float64)), atol=1e-6)

    def test_constant_interior_preserved(self):
        image = np.full((3, 12, 12), 0.4)
        out = apply_blur(image, BlurKernel.uniform(5), noise_sigma=0.0)
        np.testing.assert_allclose(out[:, 2:-2, 2:-2], 0.4, atol=1e-6)

    def test_noise_statistics_and_no_clipping(self):
        image = np.zeros((3, 64, 64))
        out = apply_blur(image, BlurKernel.delta(3), rng=np.random.default_rng(0))
        assert out.min() < 0
        assert np.std(out) == pytest.approx(0.02, rel=0.05)

    def test_noise_requires_rng(self):
        with pytest.raises(ValueError):
            apply_blur(np.zeros((3, 4, 4)), BlurKernel.delta(3), noise_sigma=0.02)


class TestSupport:
    def test_delta(self):
        assert kernel_support_size(BlurKernel.delta(17)) == 1

    def test_uniform_31_in_85(self):
        assert kernel_support_size(BlurKernel.uniform(85, 31)) == 31

    def test_matches_scan(self, rng):
        cfg = TrajectoryConfig(m=17, max_speed=5.0)
        for _ in range(20):
            k = sample_kernel(rng, cfg)
            assert kernel_support_size(k) == scan_support(k.grid)

    @pytest.mark.parametrize("support, expected", [(1, 0), (31, 0), (33, 1), (61, 1), (63, 2), (85, 2)])
    def test_size_class(self, support, expected):
        assert size_class(support, [31, 61, 85]) == expected

    def test_crop(self):
        cropped = crop_kernel(BlurKernel.uniform(9, 3), 5)
        np.testing.assert_allclose(cropped.grid, BlurKernel.uniform(5, 3).grid, atol=1e-7)


class TestKernelFile:
    def test_layout(self):
        data = encode_kernel(BlurKernel.delta(3))
        assert data[:4] == b"BKRN"
        assert data[4:8] == (3).to_bytes(4, "little")
        assert len(data) == 8 + 4 * 9

    def test_file_round_trip(self, tmp_path, rng):
        k = sample_kernel(rng, TrajectoryConfig(m=17))
        write_kernel(tmp_path / "k.bkrn", k)
        assert np.array_equal(read_kernel(tmp_path / "k.bkrn").grid, k.grid)

    def test_bad_magic(self):
        with pytest.raises(DecodeError):
            decode_kernel(b"XXXX" + bytes(40))

    def test_truncated(self):
        with pytest.raises(DecodeError):
            decode_kernel(encode_kernel(BlurKernel.delta(3))[:-4])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DecodeError):
            read_kernel(tmp_path / "absent.bkrn")
