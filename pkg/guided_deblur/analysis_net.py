"""
解析ネットワーク（ブラーカーネル推定）

輝度チャネル y を受け取り、3 段階の処理で m×m のカーネルを推定する。
  1. 各スケールで 7×7 畳み込みの特徴抽出（スケール間は ×2 プーリング）
  2. 1×1 でチャネルを削減し、スケールごとに相互相関レイヤーを適用
  3. 粗いスケールから順に ×2 アップサンプリング + 5×5 畳み込みで統合し、
     3×3 畳み込みのヘッドで 1 チャネルのカーネルマップに落とす
最後に負値を切り捨てて総和 1 に正規化する。

使用例:
    >>> net = build_analysis(AnalysisConfig(levels=2, feat_channels=8, reduced_channels=4, m=17), rng)
    >>> k = estimate_kernel(net, Tensor(y_norm))   # N×1×17×17
"""

import logging
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from .errors import ConfigError, ShapeError, shape_str
from .layers import LayerSpec, Network
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    center_fit,
    concat_channels,
    maxpool2,
    relu,
    track,
    upsample2,
)
from .xcorr import CorrelationSpec, PairMode, cross_correlate, level_radius, pair_count

logger = logging.getLogger(__name__)

KERNEL_EPS = 1e-8


class AnalysisConfig(BaseModel):
    """解析ネットワークの構成（既定値は論文規模）"""

    levels: int = Field(default=3, ge=1, description="スケール数")
    feat_channels: int = Field(default=64, ge=1, description="特徴抽出の畳み込みフィルタ数 F")
    reduced_channels: int = Field(default=32, ge=1, description="相関前に 1×1 で削減したチャネル数 R")
    feat_kernel: int = Field(default=7, ge=1, description="特徴抽出フィルタの一辺")
    convs_per_level: int = Field(default=3, ge=1, description="スケールごとの特徴抽出畳み込みの数")
    integrate_kernel: int = Field(default=5, ge=1, description="粗→細統合の畳み込みの一辺")
    head_channels: list[int] = Field(default_factory=lambda: [24, 16, 8, 1], description="ヘッドの各層のチャネル数")
    head_kernel: int = Field(default=3, ge=1, description="ヘッドの畳み込みの一辺")
    m: int = Field(default=85, ge=1, description="推定するカーネルの一辺（奇数）")
    pair_mode: PairMode = Field(default="unordered_with_diagonal", description="相関ペアの数え方")

    def model_post_init(self, __context):
        if self.m % 2 == 0:
            raise ConfigError(f"analysis.m must be odd, got {self.m}")
        for key in ("feat_kernel", "integrate_kernel", "head_kernel"):
            if getattr(self, key) % 2 == 0:
                raise ConfigError(f"analysis.{key} must be odd, got {getattr(self, key)}")
        if not self.head_channels or any(c < 1 for c in self.head_channels):
            raise ConfigError(f"analysis.head_channels must be positive, got {self.head_channels}")
        if self.head_channels[-1] != 1:
            raise ConfigError(f"analysis.head_channels must end with 1, got {self.head_channels}")
        if self.pair_mode == "ordered_offdiagonal" and self.reduced_channels < 2:
            raise ConfigError("analysis.reduced_channels must be ≥ 2 for ordered_offdiagonal pairs")

    @property
    def pair_count(self) -> int:
        return pair_count(self.reduced_channels, self.pair_mode)


def trunk_specs(prefix: str, config: AnalysisConfig) -> list[LayerSpec]:
    """1 スケール分の特徴抽出 → 削減 → 相関後の 1×1 の層"""
    specs = []
    for c in range(config.convs_per_level):
        in_channels = 1 if prefix == "level0" and c == 0 else config.feat_channels
        specs.append(
            LayerSpec(
                name=f"{prefix}.feat{c}",
                kind="conv",
                in_channels=in_channels,
                out_channels=config.feat_channels,
                kernel=config.feat_kernel,
            )
        )
    specs.append(
        LayerSpec(name=f"{prefix}.reduce", kind="conv", in_channels=config.feat_channels, out_channels=config.reduced_channels)
    )
    specs.append(
        LayerSpec(name=f"{prefix}.mix", kind="conv", in_channels=config.pair_count, out_channels=config.reduced_channels)
    )
    return specs


def normalize_kernel_head(raw: Tensor, eps: float = KERNEL_EPS) -> tuple[Tensor, np.ndarray]:
    """
    生のカーネルマップを許容カーネルに正規化する

    k = max(raw, 0) / (Σ max(raw, 0) + eps)。正の質量が eps 未満の画像は
    中心デルタに置き換え、flags[n] を True にする（その画像には勾配を流さない）。
    """
    if raw.ndim != 4 or raw.shape[1] != 1:
        raise ShapeError("normalize_kernel_head", "N×1×m×m", shape_str(raw.shape))
    n, _, h, w = raw.shape
    data = raw.data
    positive = np.maximum(data, 0)
    mass = positive.sum(axis=(1, 2, 3), keepdims=True)
    flags = mass.reshape(n) < eps
    denom = mass + eps
    out = positive / denom
    if flags.any():
        delta = np.zeros((1, h, w), dtype=data.dtype)
        delta[0, h // 2, w // 2] = 1
        out[flags] = delta
        logger.warning(f"kernel head degenerate for {int(flags.sum())}/{n} images; using centered delta")
    out = out.astype(data.dtype, copy=False)
    mask = data > 0

    def _backward(g: np.ndarray):
        weighted = (g * positive).sum(axis=(1, 2, 3), keepdims=True)
        grad = (g / denom - weighted / (denom * denom)) * mask
        grad[flags] = 0
        return (grad.astype(data.dtype, copy=False),)

    return track("normalize_kernel_head", out, (raw,), _backward), flags


class AnalysisNet(Network):
    """ブラーカーネル推定ネットワーク"""

    prefix = "analysis."

    def __init__(self, config: AnalysisConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.config = config
        super().__init__(rng, dtype)

    def layer_specs(self) -> list[LayerSpec]:
        cfg = self.config
        specs = []
        for level in range(cfg.levels):
            specs.extend(trunk_specs(f"level{level}", cfg))
        for level in range(cfg.levels - 2, -1, -1):
            specs.append(
                LayerSpec(
                    name=f"integrate{level}.up",
                    kind="conv",
                    in_channels=cfg.reduced_channels,
                    out_channels=cfg.reduced_channels,
                    kernel=cfg.integrate_kernel,
                )
            )
            specs.append(
                LayerSpec(
                    name=f"integrate{level}.fuse",
                    kind="conv",
                    in_channels=2 * cfg.reduced_channels,
                    out_channels=cfg.reduced_channels,
                )
            )
        in_channels = cfg.reduced_channels
        for idx, channels in enumerate(cfg.head_channels):
            specs.append(
                LayerSpec(
                    name=f"head.conv{idx}",
                    kind="conv",
                    in_channels=in_channels,
                    out_channels=channels,
                    kernel=cfg.head_kernel,
                )
            )
            in_channels = channels
        return specs

    def correlation_spec(self, level: int) -> CorrelationSpec:
        return CorrelationSpec(
            radius=level_radius(self.config.m, level),
            channels=self.config.reduced_channels,
            pair_mode=self.config.pair_mode,
        )

    def _check_input(self, height: int, width: int) -> None:
        cfg = self.config
        factor = 2 ** (cfg.levels - 1)
        if height % factor or width % factor:
            raise ShapeError(
                "estimate_kernel",
                f"H and W divisible by {factor}",
                f"{height}×{width}",
                f"{cfg.levels} levels",
            )
        coarsest = min(height, width) // factor
        radius = level_radius(cfg.m, cfg.levels - 1)
        if radius >= coarsest:
            raise ConfigError(
                f"estimate_kernel: correlation radius {radius} at level {cfg.levels - 1} "
                f"does not fit a {coarsest}-pixel map; use a larger input or a smaller m"
            )

    def forward_raw(self, y: Tensor) -> Tensor:
        """正規化前の N×1×m×m マップ"""
        cfg = self.config
        if y.ndim != 4 or y.shape[1] != 1:
            raise ShapeError("estimate_kernel", "luminance input N×1×H×W", shape_str(y.shape))
        self._check_input(y.shape[2], y.shape[3])

        feats = y
        level_maps = []
        for level in range(cfg.levels):
            if level > 0:
                feats = maxpool2(feats)
            for c in range(cfg.convs_per_level):
                feats = relu(self.conv(f"level{level}.feat{c}", feats))
            reduced = relu(self.conv(f"level{level}.reduce", feats))
            corr = cross_correlate(reduced, self.correlation_spec(level))
            level_maps.append(relu(self.conv(f"level{level}.mix", corr)))

        z = level_maps[-1]
        for level in range(cfg.levels - 2, -1, -1):
            extent = level_maps[level].shape[2]
            up = center_fit(upsample2(z), extent)
            up = relu(self.conv(f"integrate{level}.up", up))
            z = relu(self.conv(f"integrate{level}.fuse", concat_channels(up, level_maps[level])))

        last = len(cfg.head_channels) - 1
        for idx in range(len(cfg.head_channels)):
            z = self.conv(f"head.conv{idx}", z)
            if idx < last:
                z = relu(z)
        return center_fit(z, cfg.m)

    def trace_shapes(self, height: int, width: int) -> list[tuple[str, tuple[int, ...]]]:
        cfg = self.config
        self._check_input(height, width)
        f, r = cfg.feat_channels, cfg.reduced_channels
        shapes = []
        extents = []
        for level in range(cfg.levels):
            h, w = height >> level, width >> level
            for c in range(cfg.convs_per_level):
                shapes.append((f"level{level}.feat{c}", (1, f, h, w)))
            shapes.append((f"level{level}.reduce", (1, r, h, w)))
            spec = self.correlation_spec(level)
            shapes.append((f"level{level}.xcorr", (1, spec.pair_count, spec.extent, spec.extent)))
            shapes.append((f"level{level}.mix", (1, r, spec.extent, spec.extent)))
            extents.append(spec.extent)
        for level in range(cfg.levels - 2, -1, -1):
            d = extents[level]
            shapes.append((f"integrate{level}.up", (1, r, d, d)))
            shapes.append((f"integrate{level}.fuse", (1, r, d, d)))
        for idx, channels in enumerate(cfg.head_channels):
            shapes.append((f"head.conv{idx}", (1, channels, extents[0], extents[0])))
        shapes.append(("kernel", (1, 1, cfg.m, cfg.m)))
        return shapes


def build_analysis(config: AnalysisConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> AnalysisNet:
    """config と乱数生成器から解析ネットワークを構築する（同じシードなら同じパラメータ）"""
    if not isinstance(config, AnalysisConfig):
        raise ConfigError(f"build_analysis: expected AnalysisConfig, got {type(config).__name__}")
    return AnalysisNet(config, rng, dtype)


def estimate_kernel(
    net: AnalysisNet,
    y: Union[Tensor, np.ndarray],
    return_flags: bool = False,
) -> Union[Tensor, tuple[Tensor, np.ndarray]]:
    """正規化済み輝度 N×1×H×W からカーネル N×1×m×m（非負・総和 1）を推定する"""
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=net.dtype))
    kernel, flags = normalize_kernel_head(net.forward_raw(y))
    if return_flags:
        return kernel, flags
    return kernel


def kernel_l1(a: np.ndarray, b: Optional[np.ndarray] = None) -> float:
    """二つのカーネルの L1 距離（b 省略時は中心デルタとの距離）"""
    a = np.asarray(a, dtype=np.float64).reshape(a.shape[-2], a.shape[-1])
    if b is None:
        b = np.zeros_like(a)
        b[a.shape[0] // 2, a.shape[1] // 2] = 1
    return float(np.abs(a - np.asarray(b, dtype=np.float64).reshape(a.shape)).sum())
