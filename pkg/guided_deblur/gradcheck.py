"""
勾配チェック（解析的勾配と中心差分の比較）

`guided-deblur gradcheck [--module NAME]` から呼ばれる。
各スイートは倍精度の小さな入力で損失を組み立て、最大の相対誤差を返す。
"""

import logging
from typing import Callable, Optional, Sequence

import numpy as np
from colorama import Fore, Style

from .analysis_net import AnalysisConfig, build_analysis, estimate_kernel
from .errors import UsageError
from .synthesis_net import SynthesisConfig, build_synthesis, synthesize
from .tensor import (
    Tensor,
    backward,
    center_fit,
    concat_channels,
    conv2d,
    linear,
    maxpool2,
    modulate,
    mul,
    no_grad,
    relu,
    sum_all,
    upsample2,
)
from .training import classifier_config, build_classifier, cross_entropy3, l1_kernel_loss, l2_image_loss
from .xcorr import CorrelationSpec, cross_correlate

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-6


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    f() の勾配を inputs について中心差分と比べ、最大の相対誤差を返す

    相対誤差は |a − n| / max(1, |a|, |n|)。samples を指定すると各入力から
    その数だけ要素を選んで調べる。inputs は倍精度であること。
    """
    for tensor in inputs:
        if tensor.dtype != np.float64:
            raise UsageError(f"grad_check: inputs must be float64, got {tensor.dtype}")
        tensor.requires_grad = True
        tensor.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.data.reshape(-1)
            if samples is None or samples >= flat.size:
                indices = np.arange(flat.size)
            else:
                indices = rng.choice(flat.size, size=samples, replace=False)
            for idx in indices:
                original = flat[idx]
                flat[idx] = original + eps
                plus = f().item()
                flat[idx] = original - eps
                minus = f().item()
                flat[idx] = original
                numeric = (plus - minus) / (2 * eps)
                a = float(grad.reshape(-1)[idx])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


def _rand(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def tensor_suite(rng: np.random.Generator) -> dict[str, float]:
    results = {}
    x, w, b = _rand(rng, 2, 3, 7, 7), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
    for stride, padding in ((1, 1), (2, 0)):
        weights = rng.standard_normal(conv2d(x, w, b, stride, padding).shape)
        results[f"conv2d s{stride} p{padding}"] = grad_check(
            lambda: sum_all(mul(conv2d(x, w, b, stride, padding), Tensor(weights))), [x, w, b]
        )
    p = _rand(rng, 2, 3, 6, 6)
    weights = rng.standard_normal((2, 3, 3, 3))
    results["maxpool2"] = grad_check(lambda: sum_all(mul(maxpool2(p), Tensor(weights))), [p])
    u = _rand(rng, 1, 2, 3, 3)
    weights_up = rng.standard_normal((1, 2, 6, 6))
    results["upsample2"] = grad_check(lambda: sum_all(mul(upsample2(u), Tensor(weights_up))), [u])
    v, lw, lb = _rand(rng, 3, 5), _rand(rng, 4, 5), _rand(rng, 4)
    weights_lin = rng.standard_normal((3, 4))
    results["linear"] = grad_check(lambda: sum_all(mul(relu(linear(v, lw, lb)), Tensor(weights_lin))), [v, lw, lb])
    r, mv, bv = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3), _rand(rng, 2, 3)
    weights_mod = rng.standard_normal((2, 3, 4, 4))
    results["modulate"] = grad_check(lambda: sum_all(mul(modulate(r, mv, bv), Tensor(weights_mod))), [r, mv, bv])
    c1, c2 = _rand(rng, 1, 2, 5, 5), _rand(rng, 1, 1, 5, 5)
    weights_fit = rng.standard_normal((1, 3, 7, 7))
    results["concat+center_fit"] = grad_check(
        lambda: sum_all(mul(center_fit(concat_channels(c1, c2), 7), Tensor(weights_fit))), [c1, c2]
    )
    return results


def xcorr_suite(rng: np.random.Generator) -> dict[str, float]:
    results = {}
    f = _rand(rng, 2, 3, 6, 6)
    for mode in ("unordered_with_diagonal", "ordered_offdiagonal"):
        spec = CorrelationSpec(radius=2, channels=3, pair_mode=mode)
        weights = rng.standard_normal((2, spec.pair_count, spec.extent, spec.extent))
        results[f"cross_correlate {mode}"] = grad_check(
            lambda: sum_all(mul(cross_correlate(f, spec), Tensor(weights))), [f]
        )
    return results


def _tiny_analysis_config(m: int = 5) -> AnalysisConfig:
    return AnalysisConfig(
        levels=2,
        feat_channels=3,
        reduced_channels=2,
        feat_kernel=3,
        convs_per_level=1,
        integrate_kernel=3,
        head_channels=[3, 1],
        m=m,
    )


def analysis_suite(rng: np.random.Generator) -> dict[str, float]:
    net = build_analysis(_tiny_analysis_config(), rng, dtype=np.float64)
    y = _rand(rng, 1, 1, 8, 8)
    weights = rng.standard_normal((1, 1, 5, 5))
    params = [net.params["level0.feat0.weight"], net.params["head.conv1.weight"], net.params["integrate0.up.weight"]]
    return {
        "estimate_kernel": grad_check(
            lambda: sum_all(mul(estimate_kernel(net, y), Tensor(weights))), [y, *params], samples=12, rng=rng
        )
    }


def _tiny_synthesis(rng: np.random.Generator, m: int = 3, mode: str = "both"):
    cfg = SynthesisConfig(
        depth=1, channels=2, guide_hidden=4, convs_per_block=1, m=m, guidance_mode=mode, zero_init_output=False
    )
    net = build_synthesis(cfg, rng, dtype=np.float64)
    for name, tensor in net.params.items():
        if name.endswith("fc3.weight"):
            tensor.data = rng.standard_normal(tensor.shape) * 0.5
    return net


def synthesis_suite(rng: np.random.Generator) -> dict[str, float]:
    net = _tiny_synthesis(rng)
    blurry = _rand(rng, 1, 3, 4, 4)
    k = Tensor(rng.uniform(0.0, 1.0, size=(1, 1, 3, 3)))
    weights = rng.standard_normal((1, 3, 4, 4))
    params = [net.params["guide.enc0.fc1.weight"], net.params["dec0.fuse.weight"]]
    return {
        "synthesize": grad_check(
            lambda: sum_all(mul(synthesize(net, blurry, k), Tensor(weights))), [blurry, k, *params], samples=12, rng=rng
        )
    }


def training_suite(rng: np.random.Generator) -> dict[str, float]:
    a, t = _rand(rng, 1, 1, 3, 3), Tensor(rng.standard_normal((1, 1, 3, 3)))
    p, q = _rand(rng, 2, 3, 4, 4), Tensor(rng.standard_normal((2, 3, 4, 4)))
    logits = _rand(rng, 4, 3)
    labels = np.array([0, 2, 1, 2])
    results = {
        "l1_kernel_loss": grad_check(lambda: l1_kernel_loss(a, t), [a]),
        "l2_image_loss": grad_check(lambda: l2_image_loss(p, q), [p]),
        "cross_entropy3": grad_check(lambda: cross_entropy3(logits, labels), [logits]),
    }
    net = build_classifier(classifier_config(_tiny_analysis_config(), 5), rng, dtype=np.float64)
    y = _rand(rng, 2, 1, 6, 6)
    results["classifier"] = grad_check(
        lambda: cross_entropy3(net.forward(y), np.array([1, 0])), [y, net.params["output.weight"]], samples=12, rng=rng
    )
    return results


SUITES: dict[str, Callable[[np.random.Generator], dict[str, float]]] = {
    "tensor": tensor_suite,
    "xcorr": xcorr_suite,
    "analysis": analysis_suite,
    "synthesis": synthesis_suite,
    "training": training_suite,
}

TOLERANCES = {"tensor": 1e-6, "xcorr": 1e-6, "analysis": 1e-4, "synthesis": 1e-4, "training": 1e-6}


def run_suites(names: Optional[Sequence[str]] = None, seed: int = 0) -> bool:
    """スイートを実行して判定を表示する。すべて許容誤差内なら True"""
    names = list(names or SUITES)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise UsageError(f"unknown gradcheck module(s) {unknown}; expected {list(SUITES)}")
    ok = True
    checked = 0
    for name in names:
        tolerance = TOLERANCES.get(name, DEFAULT_TOLERANCE)
        results = SUITES[name](np.random.default_rng(seed))
        for case, error in results.items():
            passed = error < tolerance
            ok &= passed
            checked += 1
            level = logging.INFO if passed else logging.ERROR
            logger.log(level, f"gradcheck {name}/{case}: max relative error {error:.2e} (tol {tolerance:.0e})")
    if ok:
        print(f"{Fore.GREEN}✅ gradcheck passed: {checked} cases in {', '.join(names)}{Style.RESET_ALL}")
    else:
        print(f"{Fore.RED}❌ gradcheck failed: see the log for the cases over tolerance{Style.RESET_ALL}")
    return ok


if __name__ == "__main__":
    raise SystemExit(0 if run_suites() else 1)
