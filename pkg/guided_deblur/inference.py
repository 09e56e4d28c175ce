"""
推論: 任意サイズの画像の復元と、サイズクラスによるペアの振り分け
"""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .analysis_net import AnalysisNet, build_analysis, estimate_kernel
from .blur_sim import BlurKernel
from .checkpoint import Checkpoint
from .config import RunConfig
from .data_pipeline import normalize_y, rgb_to_y
from .errors import ConfigError, ShapeError, shape_str
from .synthesis_net import SynthesisNet, build_synthesis, synthesize
from .tensor import Tensor, no_grad
from .training import ClassifierNet, build_classifier, classifier_config, classify_kernel_size
from .xcorr import level_radius

logger = logging.getLogger(__name__)


def pad_to_multiple(image: np.ndarray, multiple: int, min_size: int = 0) -> tuple[np.ndarray, tuple[int, int]]:
    """C×H×W を端の画素の複製で multiple の倍数（かつ min_size 以上）に広げる"""
    if image.ndim != 3:
        raise ShapeError("pad_to_multiple", "image C×H×W", shape_str(image.shape))
    _, h, w = image.shape

    def target(extent: int) -> int:
        extent = max(extent, min_size)
        return -(-extent // multiple) * multiple

    th, tw = target(h), target(w)
    if (th, tw) == (h, w):
        return image, (h, w)
    padded = np.pad(image, ((0, 0), (0, th - h), (0, tw - w)), mode="edge")
    return padded, (h, w)


def input_geometry(analysis: AnalysisNet, synthesis: SynthesisNet) -> tuple[int, int]:
    """(必要な倍数, 最小の一辺)"""
    factor = 2 ** (analysis.config.levels - 1)
    multiple = int(np.lcm(factor, 2**synthesis.config.depth))
    radius = level_radius(analysis.config.m, analysis.config.levels - 1)
    return multiple, (radius + 1) * factor


def deblur_array(
    analysis: AnalysisNet,
    synthesis: SynthesisNet,
    image: np.ndarray,
) -> tuple[np.ndarray, BlurKernel]:
    """ボケ画像 3×H×W（[0,1]）から復元画像（[0,1] にクリップ）と推定カーネルを返す"""
    multiple, min_size = input_geometry(analysis, synthesis)
    padded, (h, w) = pad_to_multiple(np.asarray(image, dtype=np.float32), multiple, min_size)
    y_norm, _, _ = normalize_y(rgb_to_y(padded))
    with no_grad():
        kernel = estimate_kernel(analysis, Tensor(y_norm[None].astype(analysis.dtype)))
        restored = synthesize(synthesis, Tensor(padded[None].astype(synthesis.dtype)), kernel)
    out = np.clip(restored.data[0, :, :h, :w], 0.0, 1.0).astype(np.float32)
    grid = kernel.data[0, 0].astype(np.float64)
    return out, BlurKernel(m=grid.shape[0], grid=grid / grid.sum())


def load_networks(
    analysis_path: Union[str, Path],
    synthesis_path: Union[str, Path],
    config: Optional[RunConfig] = None,
) -> tuple[AnalysisNet, SynthesisNet, RunConfig]:
    """チェックポイントからネットワークのペアを組み立てる（config 省略時はチェックポイント内の設定）"""
    analysis_ckpt = Checkpoint.load(analysis_path)
    synthesis_ckpt = analysis_ckpt if Path(synthesis_path) == Path(analysis_path) else Checkpoint.load(synthesis_path)
    if config is None:
        if not analysis_ckpt.config_text:
            raise ConfigError(f"{analysis_path}: checkpoint carries no config; pass --config")
        config = RunConfig.from_text(analysis_ckpt.config_text, str(analysis_path))
    rng = np.random.default_rng(config.train.seed)
    analysis = build_analysis(config.analysis, rng)
    synthesis = build_synthesis(config.synthesis, rng)
    analysis_ckpt.apply_to(analysis)
    synthesis_ckpt.apply_to(synthesis)
    return analysis, synthesis, config


def load_classifier(path: Union[str, Path], config: Optional[RunConfig] = None) -> ClassifierNet:
    ckpt = Checkpoint.load(path)
    if config is None:
        if not ckpt.config_text:
            raise ConfigError(f"{path}: checkpoint carries no config; pass --config")
        config = RunConfig.from_text(ckpt.config_text, str(path))
    net = build_classifier(
        classifier_config(config.analysis, config.trajectory.m), np.random.default_rng(config.train.seed)
    )
    ckpt.apply_to(net)
    return net


class ScaleRouter:
    """分類器でサイズクラスを判定し、そのクラス専用のペアで復元する"""

    def __init__(self, classifier: ClassifierNet, pairs: dict[int, tuple[AnalysisNet, SynthesisNet]]):
        missing = sorted({0, 1, 2} - set(pairs))
        if missing:
            raise ConfigError(f"ScaleRouter: missing pairs for size classes {missing}")
        self.classifier = classifier
        self.pairs = pairs

    @classmethod
    def from_directory(cls, classifier_path: Union[str, Path], pairs_dir: Union[str, Path]) -> "ScaleRouter":
        """pairs_dir/class{0,1,2}.dblf を読み込む"""
        pairs_dir = Path(pairs_dir)
        pairs = {}
        for size_class in range(3):
            path = pairs_dir / f"class{size_class}.dblf"
            if not path.exists():
                raise ConfigError(f"ScaleRouter: pair checkpoint not found: {path}")
            analysis, synthesis, _ = load_networks(path, path)
            pairs[size_class] = (analysis, synthesis)
        return cls(load_classifier(classifier_path), pairs)

    def route(self, image: np.ndarray) -> int:
        radius = self.classifier.correlation_spec.radius
        padded, _ = pad_to_multiple(np.asarray(image, dtype=np.float32), 1, radius + 1)
        y_norm, _, _ = normalize_y(rgb_to_y(padded))
        return int(classify_kernel_size(self.classifier, y_norm[None])[0])

    def deblur(self, image: np.ndarray) -> tuple[np.ndarray, BlurKernel, int]:
        size_class = self.route(image)
        logger.info(f"Routed to size class {size_class}")
        analysis, synthesis = self.pairs[size_class]
        restored, kernel = deblur_array(analysis, synthesis, image)
        return restored, kernel, size_class
