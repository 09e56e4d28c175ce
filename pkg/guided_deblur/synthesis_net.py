"""
合成ネットワーク（カーネル誘導 U-Net）

ボケ画像（RGB）とカーネル k から鮮明画像を復元する U-Net。
エンコーダ・デコーダの各ブロックの入口の畳み込み出力 r は、
ブロック専用の誘導ユニットが k から作る乗数 m(k)・バイアス b(k) で

    r ← r·(1 + m(k)) + b(k)

と変調される（チャネルごとの定数、空間全体に一様）。
誘導ユニットの最終層はゼロ初期化なので、構築直後は誘導なしの U-Net と同一。
"""

import logging
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from .errors import ConfigError, ShapeError, shape_str
from .layers import LayerSpec, Network
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    add,
    concat_channels,
    flatten,
    maxpool2,
    modulate,
    relu,
    split_columns,
    upsample2,
)

logger = logging.getLogger(__name__)

GuidanceMode = Literal["none", "additive", "multiplicative", "both"]
GUIDANCE_MODES: tuple[str, ...] = ("none", "additive", "multiplicative", "both")


class SynthesisConfig(BaseModel):
    """合成ネットワークの構成（既定値は論文規模）"""

    depth: int = Field(default=4, ge=1, description="プーリング段数（エンコーダは depth+1 レベル）")
    channels: int = Field(default=128, ge=1, description="全層共通のチャネル数 C")
    guide_hidden: int = Field(default=128, ge=1, description="誘導ユニットの中間次元")
    convs_per_block: int = Field(default=3, ge=1, description="変調後の 3×3 畳み込みの数")
    m: int = Field(default=85, ge=1, description="カーネルの一辺（奇数）")
    guidance_mode: GuidanceMode = Field(default="both", description="変調の種類（アブレーション軸）")
    global_residual: bool = Field(default=True, description="出力にボケ画像を足し込む")
    zero_init_output: bool = Field(default=True, description="出力ヘッドの重みをゼロで初期化する")

    def model_post_init(self, __context):
        if self.m % 2 == 0:
            raise ConfigError(f"synthesis.m must be odd, got {self.m}")


def encoder_sites(depth: int) -> list[str]:
    return [f"enc{level}" for level in range(depth + 1)]


def decoder_sites(depth: int) -> list[str]:
    return [f"dec{level}" for level in range(depth - 1, -1, -1)]


def guided_modulation(
    r: Tensor,
    m_vec: Optional[Tensor],
    b_vec: Optional[Tensor],
    mode: GuidanceMode,
) -> Tensor:
    """
    式 r·(1+m)+b のアブレーション付き版

    both → r·(1+m)+b, additive → r+b, multiplicative → r·(1+m), none → r
    """
    if mode == "none":
        return r
    if mode == "both":
        return modulate(r, m_vec, b_vec)
    if mode == "additive":
        return modulate(r, None, b_vec)
    if mode == "multiplicative":
        return modulate(r, m_vec, None)
    raise ConfigError(f"unknown guidance mode {mode!r}; expected one of {GUIDANCE_MODES}")


class SynthesisNet(Network):
    """カーネル誘導 U-Net"""

    prefix = "synthesis."

    def __init__(self, config: SynthesisConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.config = config
        super().__init__(rng, dtype)

    @property
    def sites(self) -> list[str]:
        """変調を受ける畳み込みの位置（誘導ユニットと 1 対 1）"""
        return encoder_sites(self.config.depth) + decoder_sites(self.config.depth)

    def layer_specs(self) -> list[LayerSpec]:
        cfg = self.config
        c = cfg.channels
        specs = []

        def block(site: str) -> None:
            for idx in range(cfg.convs_per_block):
                specs.append(LayerSpec(name=f"{site}.conv{idx}", kind="conv", in_channels=c, out_channels=c, kernel=3))

        for level in range(cfg.depth + 1):
            site = f"enc{level}"
            specs.append(
                LayerSpec(name=f"{site}.entry", kind="conv", in_channels=3 if level == 0 else c, out_channels=c, kernel=3)
            )
            block(site)
        for level in range(cfg.depth - 1, -1, -1):
            site = f"dec{level}"
            specs.append(LayerSpec(name=f"{site}.up", kind="conv", in_channels=c, out_channels=c, kernel=5))
            specs.append(LayerSpec(name=f"{site}.skip", kind="conv", in_channels=c, out_channels=c, kernel=3))
            specs.append(LayerSpec(name=f"{site}.fuse", kind="conv", in_channels=2 * c, out_channels=c, kernel=1))
            block(site)
        specs.append(
            LayerSpec(name="head", kind="conv", in_channels=c, out_channels=3, kernel=3, zero_init=cfg.zero_init_output)
        )

        m2 = cfg.m * cfg.m
        for site in self.sites:
            specs.append(LayerSpec(name=f"guide.{site}.fc1", kind="linear", in_channels=m2, out_channels=cfg.guide_hidden))
            specs.append(
                LayerSpec(name=f"guide.{site}.fc2", kind="linear", in_channels=cfg.guide_hidden, out_channels=cfg.guide_hidden)
            )
            specs.append(
                LayerSpec(
                    name=f"guide.{site}.fc3",
                    kind="linear",
                    in_channels=cfg.guide_hidden,
                    out_channels=2 * cfg.channels,
                    zero_init=True,
                )
            )
        return specs

    def guiding_unit_forward(self, site: str, k: Tensor) -> tuple[Tensor, Tensor]:
        """平坦化したカーネル N×m² から (m_vec, b_vec)（それぞれ N×C）を作る"""
        m2 = self.config.m * self.config.m
        if k.ndim != 2 or k.shape[1] != m2:
            raise ShapeError("guiding_unit_forward", f"flattened kernel N×{m2}", shape_str(k.shape))
        h = relu(self.dense(f"guide.{site}.fc1", k))
        h = relu(self.dense(f"guide.{site}.fc2", h))
        out = self.dense(f"guide.{site}.fc3", h)
        return split_columns(out, self.config.channels)

    def _modulated(self, site: str, r: Tensor, k_flat: Optional[Tensor], mode: GuidanceMode) -> Tensor:
        if mode == "none":
            return r
        m_vec, b_vec = self.guiding_unit_forward(site, k_flat)
        return guided_modulation(r, m_vec, b_vec, mode)

    def _block(self, site: str, x: Tensor) -> Tensor:
        for idx in range(self.config.convs_per_block):
            x = relu(self.conv(f"{site}.conv{idx}", x))
        return x

    def _check_input(self, height: int, width: int) -> None:
        factor = 2 ** self.config.depth
        if height % factor or width % factor:
            raise ShapeError("synthesize", f"H and W divisible by {factor}", f"{height}×{width}", f"depth {self.config.depth}")

    def forward(self, blurry: Tensor, k: Optional[Tensor], mode: Optional[GuidanceMode] = None) -> Tensor:
        cfg = self.config
        mode = mode or cfg.guidance_mode
        if blurry.ndim != 4 or blurry.shape[1] != 3:
            raise ShapeError("synthesize", "RGB input N×3×H×W", shape_str(blurry.shape))
        self._check_input(blurry.shape[2], blurry.shape[3])

        k_flat = None
        if mode != "none":
            expected = (blurry.shape[0], 1, cfg.m, cfg.m)
            if k is None or k.shape != expected:
                raise ShapeError("synthesize", f"kernel {shape_str(expected)}", "none" if k is None else shape_str(k.shape))
            k_flat = flatten(k)

        skips = []
        x = blurry
        for level in range(cfg.depth + 1):
            site = f"enc{level}"
            if level > 0:
                x = maxpool2(x)
            r = self.conv(f"{site}.entry", x)
            x = self._block(site, relu(self._modulated(site, r, k_flat, mode)))
            skips.append(x)

        d = skips[-1]
        for level in range(cfg.depth - 1, -1, -1):
            site = f"dec{level}"
            up = relu(self.conv(f"{site}.up", upsample2(d)))
            skip = relu(self.conv(f"{site}.skip", skips[level]))
            r = self.conv(f"{site}.fuse", concat_channels(up, skip))
            d = self._block(site, relu(self._modulated(site, r, k_flat, mode)))

        out = self.conv("head", d)
        if cfg.global_residual:
            out = add(out, blurry)
        return out

    def trace_shapes(self, height: int, width: int) -> list[tuple[str, tuple[int, ...]]]:
        cfg = self.config
        self._check_input(height, width)
        c = cfg.channels
        shapes = []
        for level in range(cfg.depth + 1):
            shapes.append((f"enc{level}", (1, c, height >> level, width >> level)))
        for level in range(cfg.depth - 1, -1, -1):
            h, w = height >> level, width >> level
            shapes.append((f"dec{level}.concat", (1, 2 * c, h, w)))
            shapes.append((f"dec{level}", (1, c, h, w)))
        for site in self.sites:
            shapes.append((f"guide.{site}", (1, 2 * c)))
        shapes.append(("output", (1, 3, height, width)))
        return shapes


def build_synthesis(config: SynthesisConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> SynthesisNet:
    if not isinstance(config, SynthesisConfig):
        raise ConfigError(f"build_synthesis: expected SynthesisConfig, got {type(config).__name__}")
    return SynthesisNet(config, rng, dtype)


def synthesize(
    net: SynthesisNet,
    blurry: Union[Tensor, np.ndarray],
    k: Union[Tensor, np.ndarray, None],
    mode: Optional[GuidanceMode] = None,
) -> Tensor:
    """ボケ画像 N×3×H×W とカーネル N×1×m×m から N×3×H×W の復元画像を返す"""
    if not isinstance(blurry, Tensor):
        blurry = Tensor(np.asarray(blurry, dtype=net.dtype))
    if k is not None and not isinstance(k, Tensor):
        k = Tensor(np.asarray(k, dtype=net.dtype))
    return net.forward(blurry, k, mode)
