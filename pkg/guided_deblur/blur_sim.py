"""
手ブレのシミュレーション

  - sample_trajectory: 2 次のランダムウォークで制御点を作り、3 次スプラインで補間した軌跡
  - rasterize_kernel: 軌跡を m×m グリッドに双線形で打点し、ガウス PSF をかけて総和 1 に正規化
  - apply_blur: B = I∗k + η（ゼロ境界の same 畳み込み、ノイズ後のクリップはしない）

カーネルは BKRN 形式（4 バイトのマジック、u32 の m、m·m 個の f32、すべてリトルエンディアン）で保存できる。
"""

import logging
import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.interpolate import CubicSpline
from scipy.signal import convolve

from .errors import ConfigError, DecodeError, ShapeError, shape_str

logger = logging.getLogger(__name__)

BKRN_MAGIC = b"BKRN"
DEFAULT_NOISE_SIGMA = 0.02
# この面積以下のカーネルは直接畳み込み、それより大きいものは FFT
DIRECT_CONV_LIMIT = 31 * 31
KERNEL_STREAM_TAG = 1


class BlurKernel(BaseModel):
    """m×m の非負グリッド（総和 1）"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    m: int = Field(description="グリッドの一辺（奇数）", ge=1)
    grid: np.ndarray = Field(description="m×m の float32 配列")

    @field_validator("grid", mode="before")
    @classmethod
    def _as_float32(cls, value):
        return np.ascontiguousarray(value, dtype=np.float32)

    def model_post_init(self, __context):
        if self.m % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.m}")
        if self.grid.shape != (self.m, self.m):
            raise ShapeError("BlurKernel", f"{self.m}×{self.m}", shape_str(self.grid.shape))
        if not np.all(np.isfinite(self.grid)) or self.grid.min() < 0:
            raise ConfigError("kernel entries must be finite and non-negative")
        total = float(self.grid.sum(dtype=np.float64))
        if abs(total - 1.0) > 1e-5:
            raise ConfigError(f"kernel must sum to 1, got {total:.8f}")

    @classmethod
    def delta(cls, m: int) -> "BlurKernel":
        grid = np.zeros((m, m), dtype=np.float32)
        grid[m // 2, m // 2] = 1
        return cls(m=m, grid=grid)

    @classmethod
    def uniform(cls, m: int, support: int | None = None) -> "BlurKernel":
        """中央の support×support が一様なカーネル"""
        support = m if support is None else support
        if support % 2 == 0 or support > m:
            raise ConfigError(f"uniform support must be odd and ≤ {m}, got {support}")
        grid = np.zeros((m, m), dtype=np.float64)
        lo = (m - support) // 2
        grid[lo : lo + support, lo : lo + support] = 1.0 / (support * support)
        return cls(m=m, grid=grid)

    def is_delta(self) -> bool:
        c = self.m // 2
        return bool(self.grid[c, c] == 1.0 and np.count_nonzero(self.grid) == 1)


class TrajectoryConfig(BaseModel):
    """軌跡とカーネル生成の設定（既定値は m=85 の論文規模）"""

    num_control_points: int = Field(default=8, ge=2, description="制御点の数")
    max_speed: float = Field(default=12.0, ge=0, description="1 ステップあたりの最大速度（画素）")
    max_accel: float = Field(default=6.0, ge=0, description="加速度の標準偏差（画素/ステップ²）")
    samples_per_segment: int = Field(default=32, ge=1, description="スプライン 1 区間あたりのサンプル数")
    psf_sigma_range: list[float] = Field(default_factory=lambda: [0.3, 1.0], description="センサ PSF の σ の範囲 [low, high]")
    m: int = Field(default=85, ge=1, description="カーネルの一辺（奇数）")
    exposure_jitter: float = Field(default=0.9, ge=0, lt=1, description="露光時間の揺らぎ（先頭から切り捨てる割合の上限）")

    def model_post_init(self, __context):
        if self.m % 2 == 0:
            raise ConfigError(f"trajectory.m must be odd, got {self.m}")
        if len(self.psf_sigma_range) != 2:
            raise ConfigError(f"trajectory.psf_sigma_range needs [low, high], got {self.psf_sigma_range}")
        low, high = self.psf_sigma_range
        if low < 0 or high < low:
            raise ConfigError(f"trajectory.psf_sigma_range must be ordered and non-negative, got {self.psf_sigma_range}")


def sample_trajectory(rng: np.random.Generator, config: TrajectoryConfig) -> np.ndarray:
    """
    カメラの動きを模した P×2 の軌跡（x, y）を返す

    速度は max_speed でクリップ、加速度は標準偏差 max_accel のガウス。
    制御点を 3 次スプラインで補間し、露光の揺らぎで先頭を切り捨ててから重心を原点に合わせる。
    """
    n = config.num_control_points
    accel = rng.normal(0.0, 1.0, size=(n - 1, 2)) * config.max_accel
    jitter = rng.uniform(0.0, config.exposure_jitter) if config.exposure_jitter > 0 else 0.0

    points = np.zeros((n, 2), dtype=np.float64)
    velocity = np.zeros(2, dtype=np.float64)
    for step in range(1, n):
        velocity = velocity + accel[step - 1]
        speed = float(np.hypot(velocity[0], velocity[1]))
        if speed > config.max_speed:
            velocity = velocity * (config.max_speed / speed) if speed > 0 else velocity
        points[step] = points[step - 1] + velocity

    spline = CubicSpline(np.arange(n, dtype=np.float64), points, axis=0)
    count = (n - 1) * config.samples_per_segment + 1
    path = spline(np.linspace(0.0, n - 1, count))

    keep = max(1, int(round(count * (1.0 - jitter))))
    path = path[count - keep :]
    return path - path.mean(axis=0)


def gaussian_psf(sigma: float) -> np.ndarray:
    """3σ で打ち切った等方ガウス（総和 1）"""
    radius = int(np.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    profile = np.exp(-(offsets**2) / (2 * sigma * sigma))
    psf = np.outer(profile, profile)
    return psf / psf.sum()


def rasterize_kernel(path: np.ndarray, m: int, psf_sigma: float) -> BlurKernel:
    """軌跡を m×m のカーネルに打点する（はみ出す場合は縮小してグリッドに収める）"""
    if m < 1 or m % 2 == 0:
        raise ConfigError(f"rasterize_kernel: m must be odd, got {m}")
    path = np.asarray(path, dtype=np.float64).reshape(-1, 2)
    center = (m - 1) / 2
    margin = int(np.ceil(3 * psf_sigma)) if psf_sigma > 0 else 0
    available = max(center - margin, 0.0)
    reach = float(np.abs(path).max()) if path.size else 0.0
    if reach > available:
        path = path * (available / reach) if reach > 0 else path

    grid = np.zeros((m, m), dtype=np.float64)
    xs = np.clip(path[:, 0] + center, 0, m - 1)
    ys = np.clip(path[:, 1] + center, 0, m - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, m - 1)
    y1 = np.minimum(y0 + 1, m - 1)
    weight = 1.0 / len(path)
    np.add.at(grid, (y0, x0), weight * (1 - fx) * (1 - fy))
    np.add.at(grid, (y0, x1), weight * fx * (1 - fy))
    np.add.at(grid, (y1, x0), weight * (1 - fx) * fy)
    np.add.at(grid, (y1, x1), weight * fx * fy)

    if psf_sigma > 0:
        grid = convolve(grid, gaussian_psf(psf_sigma), mode="same", method="direct")
    grid = np.maximum(grid, 0)
    total = grid.sum()
    if total <= 0:
        return BlurKernel.delta(m)
    return BlurKernel(m=m, grid=grid / total)


def sample_kernel(rng: np.random.Generator, config: TrajectoryConfig) -> BlurKernel:
    """軌跡と PSF の σ をサンプルしてカーネルを 1 つ作る"""
    path = sample_trajectory(rng, config)
    low, high = config.psf_sigma_range
    sigma = float(rng.uniform(low, high)) if high > low else float(low)
    return rasterize_kernel(path, config.m, sigma)


def kernel_rng(seed: int, index: int, stream: int = 0, attempt: int = 0) -> np.random.Generator:
    """カーネル用の乱数列（画像側の乱数列とは KERNEL_STREAM_TAG で分離）"""
    return np.random.default_rng([seed, stream, index, KERNEL_STREAM_TAG, attempt])


def kernel_for(config: TrajectoryConfig, seed: int, index: int, stream: int = 0, attempt: int = 0) -> BlurKernel:
    """(seed, stream, index, attempt) から決定的にカーネルを生成する"""
    return sample_kernel(kernel_rng(seed, index, stream, attempt), config)


def apply_blur(
    image: np.ndarray,
    kernel: BlurKernel,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """3×H×W の画像にカーネルを畳み込み、標準偏差 noise_sigma のガウスノイズを加える"""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError("apply_blur", "image C×H×W", shape_str(image.shape))
    grid = kernel.grid.astype(image.dtype if image.dtype == np.float64 else np.float32)
    method = "direct" if kernel.m * kernel.m <= DIRECT_CONV_LIMIT or np.count_nonzero(grid) == 1 else "fft"
    blurred = np.stack([convolve(channel, grid, mode="same", method=method) for channel in image])
    if noise_sigma > 0:
        if rng is None:
            raise ConfigError("apply_blur: noise_sigma > 0 requires a seeded rng")
        blurred = blurred + rng.normal(0.0, noise_sigma, size=blurred.shape)
    return blurred.astype(image.dtype if image.dtype in (np.float32, np.float64) else np.float32)


def kernel_support_size(kernel: Union[BlurKernel, np.ndarray], mass: float = 0.99) -> int:
    """中心に置いた奇数幅の窓のうち、全質量の mass 以上を含む最小の幅"""
    grid = kernel.grid if isinstance(kernel, BlurKernel) else np.asarray(kernel)
    grid = grid.astype(np.float64)
    m = grid.shape[0]
    c = m // 2
    total = grid.sum()
    target = mass * total
    for half in range(c + 1):
        window = grid[c - half : c + half + 1, c - half : c + half + 1].sum()
        if window >= target - 1e-12:
            return 2 * half + 1
    return m


def size_class(support: int, bounds: Sequence[int]) -> int:
    """サポート幅を [0,b0], (b0,b1], (b1,b2] のクラス番号に写す"""
    for idx, bound in enumerate(bounds):
        if support <= bound:
            return idx
    return len(bounds) - 1


def crop_kernel(kernel: BlurKernel, m: int) -> BlurKernel:
    """中央 m×m を切り出して総和 1 に戻す"""
    if m % 2 == 0 or m > kernel.m:
        raise ConfigError(f"crop_kernel: target size must be odd and ≤ {kernel.m}, got {m}")
    if m == kernel.m:
        return kernel
    lo = (kernel.m - m) // 2
    grid = kernel.grid[lo : lo + m, lo : lo + m].astype(np.float64)
    total = grid.sum()
    if total <= 0:
        return BlurKernel.delta(m)
    return BlurKernel(m=m, grid=grid / total)


def encode_kernel(kernel: BlurKernel) -> bytes:
    return BKRN_MAGIC + struct.pack("<I", kernel.m) + kernel.grid.astype("<f4").tobytes()


def decode_kernel(data: bytes, path: str | None = None) -> BlurKernel:
    if len(data) < 8 or data[:4] != BKRN_MAGIC:
        raise DecodeError("not a BKRN kernel file (bad magic)", path)
    (m,) = struct.unpack("<I", data[4:8])
    expected = 8 + 4 * m * m
    if len(data) != expected:
        raise DecodeError(f"BKRN size mismatch: m={m} needs {expected} bytes, got {len(data)}", path)
    grid = np.frombuffer(data, dtype="<f4", offset=8).reshape(m, m).astype(np.float32)
    try:
        return BlurKernel(m=m, grid=grid)
    except (ConfigError, ShapeError, ValueError) as e:
        raise DecodeError(f"invalid kernel: {e}", path) from e


def write_kernel(path: Union[str, Path], kernel: BlurKernel) -> None:
    Path(path).write_bytes(encode_kernel(kernel))


def read_kernel(path: Union[str, Path]) -> BlurKernel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DecodeError(f"cannot read kernel: {e}", str(path)) from e
    return decode_kernel(data, str(path))
