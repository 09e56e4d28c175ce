"""
相互相関レイヤー

各活性マップのペア (f_i, f_j) について、有限のシフト範囲で
C_ij(s,t) = Σ_{h,w} f_i(h−s, w−t)·f_j(h, w) を H·W で割った値を計算する。
範囲外の f_i はゼロとして扱う。

C_ij(s,t) = C_ji(−s,−t) なので、シフトの「正の半分」だけグラム行列を計算し、
残りの半分は転置をミラーして埋める（再計算しないので対称性はビット単位で成立する）。
出力マップ上のインデックス [s+r, t+r] がシフト (s, t) に対応する。
"""

import logging
from functools import lru_cache
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError, ShapeError, UsageError, shape_str
from .tensor import Tensor, track

logger = logging.getLogger(__name__)

PairMode = Literal["unordered_with_diagonal", "ordered_offdiagonal"]


class CorrelationSpec(BaseModel):
    """相互相関レイヤーの設定"""

    model_config = ConfigDict(frozen=True)

    radius: int = Field(description="最大シフト量 |s|,|t|", ge=0)
    channels: int = Field(description="入力特徴マップ数 C", ge=1)
    pair_mode: PairMode = Field(
        default="unordered_with_diagonal",
        description="ペアの数え方。unordered_with_diagonal は i≤j（P=C(C+1)/2）、ordered_offdiagonal は i≠j（P=C(C−1)）",
    )

    @property
    def extent(self) -> int:
        return 2 * self.radius + 1

    @property
    def pair_count(self) -> int:
        return pair_count(self.channels, self.pair_mode)


def level_radius(m: int, level: int) -> int:
    """レベル l の相関半径 floor(2^−l·m/2)"""
    return m >> (level + 1)


def pair_count(channels: int, pair_mode: PairMode = "unordered_with_diagonal") -> int:
    if pair_mode == "unordered_with_diagonal":
        return channels * (channels + 1) // 2
    return channels * (channels - 1)


def pair_index(i: int, j: int, channels: int, pair_mode: PairMode = "unordered_with_diagonal") -> int:
    """
    ペア (i, j) を出力チャネル番号 p に写す

    unordered_with_diagonal: i ≤ j のみ許容し、行優先で
        p = i·C − i(i−1)/2 + (j − i)
    ordered_offdiagonal: i ≠ j のみ許容し、
        p = i·(C−1) + (j if j < i else j−1)
    """
    if not (0 <= i < channels and 0 <= j < channels):
        raise UsageError(f"pair_index: ({i}, {j}) out of range for {channels} channels")
    if pair_mode == "unordered_with_diagonal":
        if i > j:
            raise UsageError(f"pair_index: ({i}, {j}) is not stored in {pair_mode} mode; use ({j}, {i}) mirrored")
        return i * channels - i * (i - 1) // 2 + (j - i)
    if pair_mode == "ordered_offdiagonal":
        if i == j:
            raise UsageError(f"pair_index: diagonal pair ({i}, {i}) is not stored in {pair_mode} mode")
        return i * (channels - 1) + (j if j < i else j - 1)
    raise UsageError(f"pair_index: unknown pair mode {pair_mode!r}")


@lru_cache(maxsize=64)
def pair_list(channels: int, pair_mode: PairMode = "unordered_with_diagonal") -> tuple[tuple[int, int], ...]:
    """出力チャネル順に並べたペアの一覧"""
    pairs = [
        (i, j)
        for i in range(channels)
        for j in range(channels)
        if (i <= j if pair_mode == "unordered_with_diagonal" else i != j)
    ]
    pairs.sort(key=lambda ij: pair_index(ij[0], ij[1], channels, pair_mode))
    return tuple(pairs)


def _positive_shifts(radius: int) -> list[tuple[int, int]]:
    return [(s, t) for s in range(0, radius + 1) for t in range(-radius, radius + 1) if s > 0 or t >= 0]


def _overlap(extent: int, shift: int) -> tuple[slice, slice]:
    """f_i 側と f_j 側の重なり領域（シフト量 shift）"""
    lo = max(0, shift)
    hi = min(extent, extent + shift)
    return slice(lo - shift, hi - shift), slice(lo, hi)


def cross_correlate(features: Tensor, spec: CorrelationSpec) -> Tensor:
    """N×C×H×W の特徴から N×P×(2r+1)×(2r+1) の相関マップを計算する"""
    if features.ndim != 4:
        raise ShapeError("cross_correlate", "features of rank 4 (N×C×H×W)", shape_str(features.shape))
    n, c, h, w = features.shape
    if c != spec.channels:
        raise ShapeError("cross_correlate", f"{spec.channels} channels", f"{c} channels")
    r = spec.radius
    if r >= min(h, w):
        raise ConfigError(f"cross_correlate: radius {r} must be smaller than min(H, W) = {min(h, w)}")

    x = features.data
    dtype = x.dtype
    norm = float(h * w)
    pairs = pair_list(c, spec.pair_mode)
    i_idx = np.array([p[0] for p in pairs], dtype=np.intp)
    j_idx = np.array([p[1] for p in pairs], dtype=np.intp)
    lo_idx = np.minimum(i_idx, j_idx)
    hi_idx = np.maximum(i_idx, j_idx)

    shifts = _positive_shifts(r)
    out = np.zeros((n, len(pairs), spec.extent, spec.extent), dtype=dtype)
    windows = []
    for s, t in shifts:
        (ai, bi), (aj, bj) = _overlap(h, s), _overlap(w, t)
        a = x[:, :, ai, aj].reshape(n, c, -1)
        b = x[:, :, bi, bj].reshape(n, c, -1)
        gram = np.matmul(a, b.transpose(0, 2, 1)) / norm
        windows.append((ai, aj, bi, bj))
        if s == 0 and t == 0:
            out[:, :, r, r] = gram[:, lo_idx, hi_idx]
        else:
            out[:, :, s + r, t + r] = gram[:, i_idx, j_idx]
            out[:, :, r - s, r - t] = gram[:, j_idx, i_idx]

    def _backward(g: np.ndarray):
        grad = np.zeros(x.shape, dtype=dtype)
        for (s, t), (ai, aj, bi, bj) in zip(shifts, windows):
            d_gram = np.zeros((n, c, c), dtype=dtype)
            if s == 0 and t == 0:
                np.add.at(d_gram, (slice(None), lo_idx, hi_idx), g[:, :, r, r])
            else:
                np.add.at(d_gram, (slice(None), i_idx, j_idx), g[:, :, s + r, t + r])
                np.add.at(d_gram, (slice(None), j_idx, i_idx), g[:, :, r - s, r - t])
            d_gram /= norm
            a = x[:, :, ai, aj]
            b = x[:, :, bi, bj]
            grad[:, :, ai, aj] += np.einsum("nij,njhw->nihw", d_gram, b)
            grad[:, :, bi, bj] += np.einsum("nij,nihw->njhw", d_gram, a)
        return (grad,)

    return track("cross_correlate", out, (features,), _backward)


def correlation_map(output: np.ndarray, i: int, j: int, spec: CorrelationSpec) -> np.ndarray:
    """
    出力から C_ij の N×(2r+1)×(2r+1) マップを取り出す

    保存されていない側のペアは C_ij(s,t) = C_ji(−s,−t) でミラーして返す。
    """
    c = spec.channels
    if not (0 <= i < c and 0 <= j < c):
        raise UsageError(f"correlation_map: ({i}, {j}) out of range for {c} channels")
    if spec.pair_mode == "unordered_with_diagonal" and i > j:
        return output[:, pair_index(j, i, c, spec.pair_mode), ::-1, ::-1]
    return output[:, pair_index(i, j, c, spec.pair_mode)]
