"""
最小構成のリバースモード自動微分エンジン

numpy 配列をラップした Tensor と、演算を記録する Tape からなる。
ネットワークが必要とする層プリミティブ（conv2d / maxpool2 / upsample2 / relu /
linear / concat_channels など）はすべてここで前向き・逆向き計算を定義する。

使用例:
    >>> w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    >>> with Tape():
    ...     loss = sum_all(conv2d(x, w))
    ...     backward(loss)
    >>> w.grad

レイアウトは活性が N×C×H×W、フィルタが Cout×Cin×Kh×Kw。
一般的なブロードキャストは行わない（同形状どうし、またはスカラーのみ）。
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, UsageError, shape_str

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
CONV_METHODS = ("im2col", "naive")

_conv_method = "im2col"
_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """勾配テープに参加する N 次元配列"""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional["TapeNode"] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={shape_str(self.shape)}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward", "index", "tape")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: BackwardFn, index: int, tape: "Tape"):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.index = index
        self.tape = tape


class Tape:
    """
    記録順（＝トポロジカル順）に演算を保持するテープ

    `with Tape():` で現在のスレッドのアクティブなテープを切り替える。
    テープはスレッド間で共有しない。
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, op: str, inputs: tuple, output: Tensor, backward: BackwardFn) -> TapeNode:
        node = TapeNode(op, inputs, output, backward, len(self.nodes), self)
        self.nodes.append(node)
        output.node = node
        return node

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = [Tape()]
    return stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """このブロック内の演算はテープに記録しない（推論用）"""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def set_conv_method(method: str) -> None:
    """conv2d の既定実装を切り替える（"im2col" または "naive"）"""
    global _conv_method
    if method not in CONV_METHODS:
        raise ConfigError(f"unknown conv method {method!r}; expected one of {CONV_METHODS}")
    _conv_method = method


def get_conv_method() -> str:
    return _conv_method


def track(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """
    演算結果を Tensor にし、必要ならテープに記録する

    backward は出力勾配を受け取り、inputs と同じ順序で入力勾配（不要なら None）を返す。
    """
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(op, tuple(inputs), out, backward)
    return out


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """
    スカラー loss から逆伝播し、到達可能な葉テンソルの grad に勾配を加算する

    到達しなかったテンソルの grad は None のまま。
    retain_tape=False の場合、使用したテープは最後にクリアされる。
    """
    if loss.size != 1:
        raise UsageError(f"backward: loss must be a scalar, got shape {shape_str(loss.shape)}")
    node = loss.node
    if node is None:
        raise UsageError("backward: loss is not on a tape (no input requires grad, or it was computed under no_grad)")
    tape = node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for current in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(current.output), None)
        if g is None:
            continue
        input_grads = current.backward(g)
        for tensor, grad in zip(current.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.node is None:
                if tensor.grad is None:
                    tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True)
                else:
                    tensor.grad = tensor.grad + grad
            else:
                key = id(tensor)
                grads[key] = grad if key not in grads else grads[key] + grad
    if not retain_tape:
        tape.clear()


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, shape_str(a.shape), shape_str(b.shape), "operands must have identical shapes")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return track("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return track("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return track("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a: Tensor, factor: float) -> Tensor:
    return track("scale", a.data * factor, (a,), lambda g: (g * factor,))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return track("add_scalar", a.data + value, (a,), lambda g: (g,))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return track("sum", np.asarray(a.data.sum(), dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(a: Tensor) -> Tensor:
    shape, dtype, count = a.shape, a.dtype, a.size
    return track(
        "mean",
        np.asarray(a.data.mean(), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g / count, dtype=dtype),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError("reshape", f"{a.size} elements", shape, str(e)) from e
    return track("reshape", data, (a,), lambda g: (g.reshape(original),))


def flatten(a: Tensor) -> Tensor:
    """N×... を N×D に平坦化"""
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    """max(0, x)。x=0 での劣勾配は 0"""
    mask = a.data > 0
    return track("relu", np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def _require_4d(op: str, t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ShapeError(op, f"{what} of rank 4 (N×C×H×W)", shape_str(t.shape))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    method: Optional[str] = None,
) -> Tensor:
    """
    2次元畳み込み（実際は相互相関、ゼロパディング）

    出力サイズ H' = (H + 2·padding − Kh)/stride + 1。
    method は "im2col"（既定）か "naive"（ループ実装、検証用）。
    """
    _require_4d("conv2d", x, "input")
    _require_4d("conv2d", weight, "weight")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError("conv2d", f"input with {cw} channels", f"{c} channels", f"weight {shape_str(weight.shape)}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: kernel size must be odd, got {kh}×{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError("conv2d", f"bias of shape {f}", shape_str(bias.shape))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d", f"input of at least {kh}×{kw} after padding", f"{h}×{w}")

    method = method or _conv_method
    if method not in CONV_METHODS:
        raise ConfigError(f"unknown conv method {method!r}")

    xd = x.data
    wd = weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    inputs = (x, weight) if bias is None else (x, weight, bias)

    if method == "im2col":
        # N, C, Ho, Wo, Kh, Kw のビュー（tensordot 内で im2col 行列として実体化される）
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        cols = None
        out = np.zeros((n, f, out_h, out_w), dtype=xd.dtype)
        for ni in range(n):
            for fi in range(f):
                for i in range(out_h):
                    for j in range(out_w):
                        patch = xp[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                        out[ni, fi, i, j] = np.sum(patch * wd[fi])
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def _backward(g: np.ndarray):
        grad_xp = np.zeros(xp.shape, dtype=xd.dtype)
        if method == "im2col":
            grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            grad_cols = np.tensordot(g, wd, axes=([1], [0]))  # N, Ho, Wo, C, Kh, Kw
            for i in range(kh):
                for j in range(kw):
                    grad_xp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += grad_cols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
        else:
            grad_w = np.zeros(wd.shape, dtype=wd.dtype)
            for ni in range(n):
                for fi in range(f):
                    for i in range(out_h):
                        for j in range(out_w):
                            gv = g[ni, fi, i, j]
                            rows = slice(i * stride, i * stride + kh)
                            columns = slice(j * stride, j * stride + kw)
                            grad_w[fi] += gv * xp[ni, :, rows, columns]
                            grad_xp[ni, :, rows, columns] += gv * wd[fi]
        grad_x = grad_xp[:, :, padding : padding + h, padding : padding + w]
        grads = [grad_x, grad_w.astype(wd.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return track("conv2d", out, inputs, _backward)


def conv2d_same(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """stride 1、padding (K−1)/2 の「same」畳み込み"""
    return conv2d(x, weight, bias, stride=1, padding=(weight.shape[2] - 1) // 2)


def maxpool2(x: Tensor) -> Tensor:
    """2×2 最大値プーリング（stride 2）。逆伝播は argmax のセルにのみ流す"""
    _require_4d("maxpool2", x, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("maxpool2", "even H and W", f"{h}×{w}", "pad or crop before pooling")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def _backward(g: np.ndarray):
        grad_blocks = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(grad_blocks, idx, g[..., None], axis=-1)
        grad = grad_blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (grad,)

    return track("maxpool2", np.ascontiguousarray(out), (x,), _backward)


def upsample2(x: Tensor) -> Tensor:
    """最近傍 ×2 アップサンプリング。逆伝播は 2×2 ブロックの和"""
    _require_4d("upsample2", x, "input")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return track("upsample2", out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """チャネル方向の連結（a が先）"""
    _require_4d("concat_channels", a, "first input")
    _require_4d("concat_channels", b, "second input")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError("concat_channels", f"matching N,H,W {shape_str(a.shape)}", shape_str(b.shape))
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return track("concat_channels", out, (a, b), lambda g: (g[:, :split], g[:, split:]))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """アフィン写像 x·Wᵀ + b（x: N×Din, W: Dout×Din）"""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear", "input N×Din and weight Dout×Din", f"{shape_str(x.shape)} / {shape_str(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", f"Din={weight.shape[1]}", f"Din={x.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear", f"bias of shape {weight.shape[0]}", shape_str(bias.shape))
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data[None, :]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g: np.ndarray):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return track("linear", out, inputs, _backward)


def center_fit(x: Tensor, size: int) -> Tensor:
    """
    空間サイズを size×size に合わせる

    大きければ中央を切り出し、小さければ対称にゼロパディングする
    （差が奇数のときは余りを後ろ側に置く）。
    """
    _require_4d("center_fit", x, "input")
    n, c, h, w = x.shape

    def _offsets(extent: int) -> tuple[slice, slice]:
        if extent >= size:
            start = (extent - size) // 2
            return slice(start, start + size), slice(0, size)
        start = (size - extent) // 2
        return slice(0, extent), slice(start, start + extent)

    src_h, dst_h = _offsets(h)
    src_w, dst_w = _offsets(w)
    out = np.zeros((n, c, size, size), dtype=x.dtype)
    out[:, :, dst_h, dst_w] = x.data[:, :, src_h, src_w]

    def _backward(g: np.ndarray):
        grad = np.zeros(x.shape, dtype=g.dtype)
        grad[:, :, src_h, src_w] = g[:, :, dst_h, dst_w]
        return (grad,)

    return track("center_fit", out, (x,), _backward)


def modulate(r: Tensor, mult: Optional[Tensor] = None, shift: Optional[Tensor] = None) -> Tensor:
    """
    チャネルごとのアフィン変調 r·(1+mult) + shift

    mult, shift は N×C で、空間全体に一様に適用される。None の項は省略される。
    """
    _require_4d("modulate", r, "input")
    n, c = r.shape[:2]
    for label, vec in (("mult", mult), ("shift", shift)):
        if vec is not None and vec.shape != (n, c):
            raise ShapeError("modulate", f"{label} of shape {n}×{c}", shape_str(vec.shape))
    if mult is None and shift is None:
        return r

    rd = r.data
    data = rd
    factor = None
    if mult is not None:
        factor = (1 + mult.data)[:, :, None, None]
        data = data * factor
    if shift is not None:
        data = data + shift.data[:, :, None, None]
    inputs = [r] + [vec for vec in (mult, shift) if vec is not None]

    def _backward(g: np.ndarray):
        grads = [g * factor if factor is not None else g]
        if mult is not None:
            grads.append((g * rd).sum(axis=(2, 3)))
        if shift is not None:
            grads.append(g.sum(axis=(2, 3)))
        return grads

    return track("modulate", data, inputs, _backward)


def split_columns(x: Tensor, index: int) -> tuple[Tensor, Tensor]:
    """N×D を列 index で N×index と N×(D−index) に分ける"""
    if x.ndim != 2 or not 0 <= index <= x.shape[1]:
        raise ShapeError("split_columns", f"N×D with 0≤{index}≤D", shape_str(x.shape))
    width = x.shape[1]
    dtype = x.dtype

    def _left_backward(g: np.ndarray):
        full = np.zeros((g.shape[0], width), dtype=dtype)
        full[:, :index] = g
        return (full,)

    def _right_backward(g: np.ndarray):
        full = np.zeros((g.shape[0], width), dtype=dtype)
        full[:, index:] = g
        return (full,)

    left = track("split_left", np.ascontiguousarray(x.data[:, :index]), (x,), _left_backward)
    right = track("split_right", np.ascontiguousarray(x.data[:, index:]), (x,), _right_backward)
    return left, right
