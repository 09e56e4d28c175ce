"""
画像入出力と学習サンプルの生成

学習サンプルは都度生成する（鮮明画像 I、カーネル k、ボケ画像 B の三つ組）。
乱数はすべて (seed, stream, index) から導出するので、同じ入力なら同じサンプルになる。
バッチ生成はスレッドで先読みし、asyncio.Queue 経由で学習ループに渡す。
"""

import asyncio
import io
import logging
from contextlib import suppress
from pathlib import Path
from typing import AsyncIterator, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field

from .blur_sim import (
    DEFAULT_NOISE_SIGMA,
    BlurKernel,
    TrajectoryConfig,
    apply_blur,
    crop_kernel,
    kernel_for,
    kernel_support_size,
    read_kernel,
    sample_kernel,
    size_class,
    write_kernel,
)
from .errors import ConfigError, DecodeError, ShapeError, shape_str
from .kernel_cache import KernelBank

logger = logging.getLogger(__name__)

# BT.601
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
STD_FLOOR = 1e-6
# 8 ビットのモードだけを受け付ける（16 ビットは I;16 / I として開かれる）
ACCEPTED_MODES = {"L", "LA", "P", "RGB", "RGBA"}
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# シグネチャ 8 バイト + チャンク長 4 + "IHDR" 4 + 幅 4 + 高さ 4 の直後
IHDR_BIT_DEPTH_OFFSET = 24
IMAGE_STREAM_TAG = 0
MAX_CLASS_ATTEMPTS = 500
MANIFEST_NAME = "manifest.txt"

STREAMS = {"train": 0, "val": 1, "test": 2}


class DataConfig(BaseModel):
    """データ生成の設定"""

    crop_size: int = Field(default=512, ge=2, description="学習用クロップの一辺 S")
    noise_sigma: float = Field(default=DEFAULT_NOISE_SIGMA, ge=0, description="加法ガウスノイズの標準偏差")
    image_dir: Optional[str] = Field(default=None, description="鮮明画像（PNG）のディレクトリ。未指定なら手続き生成")
    kernel_cache: Optional[str] = Field(default=None, description="カーネルバンク（sqlite）のパス")
    class_bounds: list[int] = Field(default_factory=lambda: [31, 61, 85], description="サイズクラスの上限 [b0, b1, b2]")
    support_mass: float = Field(default=0.99, gt=0, le=1, description="サポート幅を測る質量の割合")
    prefetch: int = Field(default=2, ge=1, description="先読みするバッチ数")

    def model_post_init(self, __context):
        bounds = self.class_bounds
        if len(bounds) != 3 or any(b < 1 or b % 2 == 0 for b in bounds):
            raise ConfigError(f"data.class_bounds needs three odd sizes, got {bounds}")
        if not bounds[0] < bounds[1] < bounds[2]:
            raise ConfigError(f"data.class_bounds must be increasing, got {bounds}")


class TrainingSample(BaseModel):
    """(I, k, B) の三つ組と解析ネットワーク用の正規化済み輝度"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sharp: np.ndarray
    kernel: BlurKernel
    blurred: np.ndarray
    y_norm: np.ndarray
    y_stats: tuple[float, float]
    size_class: int
    support: int


class Batch(BaseModel):
    """N 個のサンプルを積み重ねたもの"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sharp: np.ndarray
    blurred: np.ndarray
    y_norm: np.ndarray
    kernels: np.ndarray
    size_class: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "Batch":
        return cls(
            sharp=np.stack([s.sharp for s in samples]),
            blurred=np.stack([s.blurred for s in samples]),
            y_norm=np.stack([s.y_norm for s in samples]),
            kernels=np.stack([s.kernel.grid[None] for s in samples]),
            size_class=np.array([s.size_class for s in samples], dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.sharp.shape[0]


def png_bit_depth(data: bytes) -> Optional[int]:
    """IHDR のビット深度（PNG でなければ None）"""
    if not data.startswith(PNG_SIGNATURE) or len(data) <= IHDR_BIT_DEPTH_OFFSET or data[12:16] != b"IHDR":
        return None
    return data[IHDR_BIT_DEPTH_OFFSET]


def decode_image(data: bytes, path: Optional[str] = None) -> np.ndarray:
    """8 ビット PNG を 3×H×W の float32（[0,1]）にする"""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError) as e:
        raise DecodeError(f"cannot decode image: {e}", path) from e
    if img.format != "PNG":
        raise DecodeError(f"unsupported format {img.format}; only 8-bit PNG is accepted", path)
    bit_depth = png_bit_depth(data)
    if bit_depth != 8:
        raise DecodeError(f"unsupported PNG bit depth {bit_depth}; only 8-bit PNG is accepted", path)
    if img.mode not in ACCEPTED_MODES:
        raise DecodeError(f"unsupported PNG mode {img.mode} (16-bit and float images are not accepted)", path)
    rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def encode_image(image: np.ndarray) -> bytes:
    """3×H×W の画像を [0,1] にクリップし、四捨五入して 8 ビット PNG にする"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError("encode_image", "image 3×H×W", shape_str(image.shape))
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(quantized.transpose(1, 2, 0))).save(buffer, format="PNG")
    return buffer.getvalue()


def read_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DecodeError(f"cannot read image: {e}", str(path)) from e
    return decode_image(data, str(path))


def write_image(path: Union[str, Path], image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_image(image))


def rgb_to_y(image: np.ndarray) -> np.ndarray:
    """RGB（3×H×W）から輝度 Y（1×H×W）"""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError("rgb_to_y", "image 3×H×W", shape_str(image.shape))
    r, g, b = image.astype(np.float64)
    y = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    return y[None].astype(image.dtype if image.dtype == np.float64 else np.float32)


def normalize_y(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    """平均 0・分散 1 に正規化する（std の下限 1e-6）"""
    y = np.asarray(y)
    values = y.astype(np.float64)
    if values.size < 2:
        raise ShapeError("normalize_y", "at least 2 pixels", shape_str(y.shape))
    mean = float(values.mean())
    std = float(values.std())
    normalized = (values - mean) / max(std, STD_FLOOR)
    return normalized.astype(y.dtype if y.dtype == np.float64 else np.float32), mean, std


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """左上の位置を一様に選んで size×size を切り出す"""
    _, h, w = image.shape
    if h < size or w < size:
        raise ShapeError("random_crop", f"image at least {size}×{size}", f"{h}×{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return np.ascontiguousarray(image[:, top : top + size, left : left + size])


def procedural_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """矩形・円・グラデーション・細かいテクスチャを重ねた鮮明画像（3×S×S）"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
    slope = rng.uniform(-0.3, 0.3, size=(3, 2, 1, 1))
    image = base + slope[:, 0] * xx + slope[:, 1] * yy

    for _ in range(int(rng.integers(4, 10))):
        color = rng.uniform(0.0, 1.0, size=(3, 1, 1))
        x0, x1 = np.sort(rng.uniform(0, 1, size=2))
        y0, y1 = np.sort(rng.uniform(0, 1, size=2))
        if rng.uniform() < 0.5:
            mask = (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
        else:
            cx, cy = rng.uniform(0, 1, size=2)
            radius = rng.uniform(0.05, 0.3)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
        image = np.where(mask[None], color, image)

    freq = rng.uniform(8, 24, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = np.sin(2 * np.pi * freq[0] * xx + phase[0]) * np.sin(2 * np.pi * freq[1] * yy + phase[1])
    image = image + rng.uniform(0.02, 0.08) * texture[None]
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def make_sample(
    rng: np.random.Generator,
    sharp_image: np.ndarray,
    traj_config: TrajectoryConfig,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    crop_size: Optional[int] = None,
    class_bounds: Sequence[int] = (31, 61, 85),
    kernel: Optional[BlurKernel] = None,
    label: Optional[int] = None,
    support_mass: float = 0.99,
) -> TrainingSample:
    """
    学習サンプルを 1 つ作る

    クロップ → カーネル（未指定ならサンプル）→ ブラー + ノイズ → 輝度の正規化。
    label を与えるとサイズクラスをその値に固定する（クラス別カーネルを切り出した場合）。
    """
    sharp = random_crop(sharp_image, crop_size, rng) if crop_size else np.asarray(sharp_image, dtype=np.float32)
    if kernel is None:
        kernel = sample_kernel(rng, traj_config)
    blurred = apply_blur(sharp, kernel, noise_sigma, rng)
    y_norm, mean, std = normalize_y(rgb_to_y(blurred))
    support = kernel_support_size(kernel, support_mass)
    return TrainingSample(
        sharp=sharp,
        kernel=kernel,
        blurred=blurred,
        y_norm=y_norm,
        y_stats=(mean, std),
        size_class=size_class(support, class_bounds) if label is None else int(label),
        support=support,
    )


def list_images(directory: Union[str, Path]) -> list[Path]:
    """PNG の一覧（manifest.txt があれば生成済みデータセットの sharp/ を使う）"""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"image directory not found: {directory}")
    if (directory / MANIFEST_NAME).exists():
        return [entry.sharp for entry in load_dataset(directory)]
    return sorted(p for p in directory.rglob("*.png") if p.is_file())


def load_images(directory: Union[str, Path], min_size: int) -> list[np.ndarray]:
    images = []
    paths = list_images(directory)
    for path in paths:
        image = read_image(path)
        if min(image.shape[1:]) < min_size:
            logger.warning(f"skipping {path}: smaller than the {min_size}-pixel crop")
            continue
        images.append(image)
    if not images:
        raise ConfigError(f"no usable PNG images (≥ {min_size} pixels) in {directory}")
    logger.info(f"Loaded {len(images)}/{len(paths)} images from {directory}")
    return images


class SampleSource:
    """
    (seed, stream, index) → TrainingSample の決定的な生成器

    size_class を指定するとそのクラスのカーネルだけを棄却法で選び、
    クラスの上限サイズに中央クロップする。
    """

    def __init__(
        self,
        data: DataConfig,
        trajectory: TrajectoryConfig,
        seed: int,
        size_class: Optional[int] = None,
        images: Optional[list[np.ndarray]] = None,
        bank: Optional[KernelBank] = None,
    ):
        if size_class is not None and size_class not in (0, 1, 2):
            raise ConfigError(f"size_class must be 0, 1 or 2, got {size_class}")
        self.data = data
        self.trajectory = trajectory
        self.seed = int(seed)
        self.size_class = size_class
        self.images = images
        self.bank = bank

    @classmethod
    def from_config(cls, config, seed: Optional[int] = None, image_dir: Optional[str] = None) -> "SampleSource":
        """RunConfig からソースを組み立てる（image_dir は data.image_dir を上書き）"""
        directory = image_dir or config.data.image_dir
        images = load_images(directory, config.data.crop_size) if directory else None
        bank = KernelBank(config.data.kernel_cache) if config.data.kernel_cache else None
        return cls(
            config.data,
            config.trajectory,
            config.train.seed if seed is None else seed,
            size_class=config.train.size_class,
            images=images,
            bank=bank,
        )

    @property
    def kernel_m(self) -> int:
        if self.size_class is None:
            return self.trajectory.m
        return self.data.class_bounds[self.size_class]

    def _kernel(self, stream: int, index: int, attempt: int) -> BlurKernel:
        if self.bank is not None:
            return self.bank.get_or_create(self.trajectory, self.seed, index, stream, attempt)
        return kernel_for(self.trajectory, self.seed, index, stream, attempt)

    def _class_kernel(self, stream: int, index: int) -> BlurKernel:
        for attempt in range(MAX_CLASS_ATTEMPTS):
            kernel = self._kernel(stream, index, attempt)
            support = kernel_support_size(kernel, self.data.support_mass)
            if size_class(support, self.data.class_bounds) == self.size_class:
                return crop_kernel(kernel, self.kernel_m)
        raise ConfigError(
            f"no kernel of size class {self.size_class} after {MAX_CLASS_ATTEMPTS} draws; "
            "check trajectory settings against data.class_bounds"
        )

    def sample(self, index: int, stream: Union[str, int] = "train") -> TrainingSample:
        salt = STREAMS[stream] if isinstance(stream, str) else int(stream)
        rng = np.random.default_rng([self.seed, salt, int(index), IMAGE_STREAM_TAG])
        size = self.data.crop_size
        if self.images:
            sharp_image = self.images[int(rng.integers(len(self.images)))]
        else:
            sharp_image = procedural_image(rng, size)
        if self.size_class is None:
            kernel, label = self._kernel(salt, index, 0), None
        else:
            kernel, label = self._class_kernel(salt, index), self.size_class
        return make_sample(
            rng,
            sharp_image,
            self.trajectory,
            self.data.noise_sigma,
            crop_size=size,
            class_bounds=self.data.class_bounds,
            kernel=kernel,
            label=label,
            support_mass=self.data.support_mass,
        )

    def batch(self, stream: Union[str, int], batch_index: int, batch_size: int) -> Batch:
        start = batch_index * batch_size
        return Batch.from_samples([self.sample(start + offset, stream) for offset in range(batch_size)])

    def close(self) -> None:
        if self.bank is not None:
            self.bank.close()


async def stream_batches(
    source: SampleSource,
    stream: Union[str, int],
    start: int,
    count: int,
    batch_size: int,
    prefetch: int = 2,
) -> AsyncIterator[Batch]:
    """バッチ start から count 個をスレッドで先読みしながら順に返す"""
    queue: asyncio.Queue = asyncio.Queue(maxsize=max(1, prefetch))

    async def producer():
        try:
            for batch_index in range(start, start + count):
                batch = await asyncio.to_thread(source.batch, stream, batch_index, batch_size)
                await queue.put(batch)
        except Exception as e:
            await queue.put(e)
            return
        await queue.put(None)

    task = asyncio.create_task(producer())
    try:
        while True:
            item = await queue.get()
            if item is None:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        task.cancel()
        with suppress(asyncio.CancelledError):
            await task


class DatasetEntry(BaseModel):
    blurred: Path
    sharp: Path
    kernel: Path


def write_dataset(out_dir: Union[str, Path], source: SampleSource, count: int, stream: Union[str, int] = "test") -> Path:
    """
    ペア画像・カーネル・マニフェストを書き出す

    out_dir/blurred/NNNNN.png, sharp/NNNNN.png, kernels/NNNNN.bkrn と、
    blurred 画像の相対パスを 1 行ずつ並べた manifest.txt。
    """
    out_dir = Path(out_dir)
    for sub in ("blurred", "sharp", "kernels"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for index in range(count):
        sample = source.sample(index, stream)
        name = f"{index:05d}"
        write_image(out_dir / "blurred" / f"{name}.png", sample.blurred)
        write_image(out_dir / "sharp" / f"{name}.png", sample.sharp)
        write_kernel(out_dir / "kernels" / f"{name}.bkrn", sample.kernel)
        lines.append(f"blurred/{name}.png")
    (out_dir / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote {count} samples to {out_dir}")
    return out_dir / MANIFEST_NAME


def load_dataset(directory: Union[str, Path]) -> list[DatasetEntry]:
    """manifest.txt を読み、対応する sharp / kernels のパスを返す"""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise ConfigError(f"dataset manifest not found: {manifest}")
    entries = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        rel = line.strip()
        if not rel:
            continue
        stem = Path(rel).stem
        entry = DatasetEntry(
            blurred=directory / rel,
            sharp=directory / "sharp" / f"{stem}.png",
            kernel=directory / "kernels" / f"{stem}.bkrn",
        )
        for path in (entry.blurred, entry.sharp):
            if not path.exists():
                raise ConfigError(f"dataset file missing: {path}")
        entries.append(entry)
    return entries


def read_pair(entry: DatasetEntry) -> tuple[np.ndarray, np.ndarray, Optional[BlurKernel]]:
    kernel = read_kernel(entry.kernel) if entry.kernel.exists() else None
    return read_image(entry.blurred), read_image(entry.sharp), kernel
