"""
ネットワークの共通基底クラス

各ネットワーク（解析・合成・分類）はレイヤー仕様の一覧を返すだけでよく、
パラメータの生成・初期化・保存・読み込みはこの基底クラスが受け持つ。
"""

import logging
from abc import ABC, abstractmethod
from typing import Iterator, Literal, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from .errors import ConfigError, ShapeError, shape_str
from .tensor import DEFAULT_DTYPE, Tensor, conv2d, linear

logger = logging.getLogger(__name__)


class LayerSpec(BaseModel):
    """1 層分のパラメータ形状"""

    name: str = Field(description="パラメータ名の接頭辞（例: level0.conv1）")
    kind: Literal["conv", "linear"]
    in_channels: int = Field(ge=0)
    out_channels: int = Field(ge=1)
    kernel: int = Field(default=1, ge=1, description="畳み込みの一辺（linear では無視）")
    zero_init: bool = Field(default=False, description="重みをゼロで初期化する")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels)

    @property
    def fan_in(self) -> int:
        return self.in_channels * (self.kernel * self.kernel if self.kind == "conv" else 1)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """He の fan-in スケーリングによる正規分布初期化"""
    std = np.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Network(ABC):
    """名前付きパラメータを持つネットワークの共通基底クラス"""

    #: チェックポイント上の名前の接頭辞
    prefix: str = ""

    def __init__(self, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.params: dict[str, Tensor] = {}
        self.dtype = np.dtype(dtype)
        for spec in self.layer_specs():
            self._add_layer(spec, rng)
        logger.debug(f"{self.__class__.__name__} built with {self.parameter_count()} parameters")

    @abstractmethod
    def layer_specs(self) -> list[LayerSpec]:
        """生成するレイヤーを順番に返す"""

    def _add_layer(self, spec: LayerSpec, rng: np.random.Generator) -> None:
        weight_name = f"{spec.name}.weight"
        bias_name = f"{spec.name}.bias"
        if weight_name in self.params:
            raise ConfigError(f"duplicate layer name {spec.name!r} in {self.__class__.__name__}")
        if spec.zero_init:
            weight = np.zeros(spec.weight_shape, dtype=self.dtype)
        else:
            weight = he_normal(rng, spec.weight_shape, spec.fan_in, self.dtype)
        self.params[weight_name] = Tensor(weight, requires_grad=True, name=weight_name)
        self.params[bias_name] = Tensor(
            np.zeros(spec.out_channels, dtype=self.dtype), requires_grad=True, name=bias_name
        )

    def conv(self, name: str, x: Tensor) -> Tensor:
        """stride 1 の same 畳み込み"""
        weight = self.params[f"{name}.weight"]
        return conv2d(x, weight, self.params[f"{name}.bias"], stride=1, padding=(weight.shape[2] - 1) // 2)

    def dense(self, name: str, x: Tensor) -> Tensor:
        return linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def set_requires_grad(self, flag: bool) -> None:
        for tensor in self.params.values():
            tensor.requires_grad = flag

    def astype(self, dtype) -> "Network":
        """パラメータを dtype に変換する（勾配チェックでは float64）"""
        self.dtype = np.dtype(dtype)
        for name, tensor in self.params.items():
            tensor.data = tensor.data.astype(self.dtype)
            tensor.grad = None
        return self

    def state(self) -> dict[str, np.ndarray]:
        """接頭辞付きの名前 → 配列"""
        return {f"{self.prefix}{name}": tensor.data for name, tensor in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """state() と同じ形式の辞書からパラメータを読み込む"""
        expected = {f"{self.prefix}{name}" for name in self.params}
        present = {key for key in state if key.startswith(self.prefix)}
        missing = sorted(expected - present)
        if missing:
            raise ConfigError(f"{self.__class__.__name__}: missing parameters {missing[:5]}")
        unexpected = sorted(present - expected)
        if strict and unexpected:
            raise ConfigError(f"{self.__class__.__name__}: unexpected parameters {unexpected[:5]}")
        for name, tensor in self.params.items():
            value = np.asarray(state[f"{self.prefix}{name}"])
            if value.shape != tensor.shape:
                raise ShapeError(f"load_state[{name}]", shape_str(tensor.shape), shape_str(value.shape))
            tensor.data = value.astype(self.dtype, copy=True)
            tensor.grad = None

    def trace_shapes(self, height: int, width: int) -> list[tuple[str, tuple[int, ...]]]:
        """計算せずに各段の出力形状を返す（サブクラスで実装）"""
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(params={self.parameter_count()}, dtype={self.dtype})"


def describe(net: Network, limit: Optional[int] = None) -> str:
    """パラメータ一覧を人が読める形で返す"""
    lines = [f"{name}: {shape_str(t.shape)}" for name, t in net.named_parameters()]
    if limit is not None:
        lines = lines[:limit]
    return "\n".join(lines)
