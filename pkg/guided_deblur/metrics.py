"""
画質指標（PSNR・平均 SSIM）と評価レポート、誘導モード・学習方針のアブレーション
"""

import logging
import math
import tempfile
import time
from contextlib import nullcontext
from datetime import datetime
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.signal import convolve2d

from .analysis_net import AnalysisNet, build_analysis
from .checkpoint import Checkpoint
from .config import RunConfig
from .data_pipeline import SampleSource, load_dataset, read_pair, rgb_to_y, write_image
from .errors import ConfigError, ShapeError, shape_str
from .inference import ScaleRouter, deblur_array
from .synthesis_net import SynthesisNet, build_synthesis, synthesize
from .tensor import Tensor, no_grad
from .training import build_classifier, classifier_config, init_from_checkpoint, run_stage

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
REPORT_HEADER = "path,psnr_db,mssim"


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10·log10(peak²/MSE)。MSE が 0 なら math.inf"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("psnr", shape_str(a.shape), shape_str(b.shape))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2
    profile = np.exp(-(offsets**2) / (2 * sigma * sigma))
    window = np.outer(profile, profile)
    return window / window.sum()


def _luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0].astype(np.float64)
    if image.ndim == 3 and image.shape[0] == 3:
        return rgb_to_y(image.astype(np.float64))[0]
    raise ShapeError("mssim", "H×W, 1×H×W or 3×H×W", shape_str(image.shape))


def mssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """
    輝度チャネルでの平均 SSIM

    11×11・σ=1.5 のガウス窓を valid 範囲だけで動かし、局所 SSIM の平均をとる。
    """
    ya, yb = _luminance(a), _luminance(b)
    if ya.shape != yb.shape:
        raise ShapeError("mssim", shape_str(ya.shape), shape_str(yb.shape))
    if min(ya.shape) < SSIM_WINDOW:
        raise ShapeError("mssim", f"image at least {SSIM_WINDOW}×{SSIM_WINDOW}", shape_str(ya.shape))
    window = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    def local_mean(x: np.ndarray) -> np.ndarray:
        return convolve2d(x, window, mode="valid")

    mu_a = local_mean(ya)
    mu_b = local_mean(yb)
    var_a = local_mean(ya * ya) - mu_a * mu_a
    var_b = local_mean(yb * yb) - mu_b * mu_b
    cov = local_mean(ya * yb) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def _format_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


class EvalRow(BaseModel):
    path: str
    psnr_db: float
    mssim: float
    seconds: float = Field(default=0.0, description="復元にかかった秒数（CSV には出さない）")


class EvalReport(BaseModel):
    """1 データセット分の評価結果"""

    rows: list[EvalRow] = Field(default_factory=list)
    fingerprint: str = Field(default="", description="RunConfig の param_hash")
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))

    @property
    def mean_psnr(self) -> float:
        if not self.rows:
            return math.nan
        values = [row.psnr_db for row in self.rows]
        if any(math.isinf(v) for v in values):
            return math.inf
        return float(np.mean(values))

    @property
    def mean_mssim(self) -> float:
        return float(np.mean([row.mssim for row in self.rows])) if self.rows else math.nan

    @property
    def mean_seconds(self) -> float:
        return float(np.mean([row.seconds for row in self.rows])) if self.rows else 0.0

    @property
    def infinite_count(self) -> int:
        return sum(1 for row in self.rows if math.isinf(row.psnr_db))

    def to_csv(self) -> str:
        lines = [REPORT_HEADER]
        for row in self.rows:
            lines.append(f"{row.path},{_format_db(row.psnr_db)},{row.mssim:.6f}")
        lines.append(f"MEAN,{_format_db(self.mean_psnr)},{self.mean_mssim:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")


def evaluate_set(
    analysis: Optional[AnalysisNet],
    synthesis: Optional[SynthesisNet],
    data_dir: Union[str, Path],
    report_path: Optional[Union[str, Path]] = None,
    images_out: Optional[Union[str, Path]] = None,
    router=None,
    fingerprint: str = "",
) -> EvalReport:
    """
    manifest.txt のデータセットを復元して PSNR・MSSIM を集計する

    router（ScaleRouter）を渡すとクラス別ペアで復元する。
    """
    data_dir = Path(data_dir)
    entries = load_dataset(data_dir)
    report = EvalReport(fingerprint=fingerprint)
    for entry in entries:
        blurred, sharp, _ = read_pair(entry)
        started = time.perf_counter()
        if router is not None:
            restored, _, _ = router.deblur(blurred)
        else:
            restored, _ = deblur_array(analysis, synthesis, blurred)
        elapsed = time.perf_counter() - started
        rel = entry.blurred.relative_to(data_dir).as_posix()
        report.rows.append(EvalRow(path=rel, psnr_db=psnr(restored, sharp), mssim=mssim(restored, sharp), seconds=elapsed))
        if images_out is not None:
            write_image(Path(images_out) / entry.blurred.name, restored)
    logger.info(
        f"Evaluated {len(report.rows)} images: mean PSNR {_format_db(report.mean_psnr)} dB, "
        f"mean MSSIM {report.mean_mssim:.4f}, {report.mean_seconds:.3f}s per image"
    )
    if report_path is not None:
        report.write(report_path)
    return report


def heldout_psnr(synthesis: SynthesisNet, source: SampleSource, count: int, stream: str = "test") -> float:
    """真のカーネルで誘導したときの保持サンプルでの平均 PSNR"""
    values = []
    with no_grad():
        for index in range(count):
            sample = source.sample(index, stream)
            kernel = sample.kernel.grid[None, None].astype(synthesis.dtype)
            pred = synthesize(synthesis, Tensor(sample.blurred[None].astype(synthesis.dtype)), Tensor(kernel))
            values.append(psnr(np.clip(pred.data[0], 0.0, 1.0), sample.sharp))
    return float(np.mean(values))


def _write_table(path: Union[str, Path], header: str, results: dict[str, float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [header] + [f"{name},{_format_db(value)}" for name, value in results.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train(config: RunConfig, stage: str, out_path: Optional[Path] = None, **nets) -> Checkpoint:
    cfg = config.for_stage(stage)
    source = SampleSource.from_config(cfg)
    try:
        return run_stage(cfg.train, source, config_text=cfg.to_text(), out_path=out_path, **nets)
    finally:
        source.close()


def ablation_run(
    modes: Sequence[str],
    config: RunConfig,
    out_csv: Optional[Union[str, Path]] = None,
) -> dict[str, float]:
    """
    誘導モードごとに合成ネットを真のカーネルで学習し、保持サンプルの平均 PSNR を返す

    すべてのモードで同じシード・同じサンプル列を使う。
    """
    results: dict[str, float] = {}
    for mode in modes:
        cfg = config.updated(synthesis={"guidance_mode": mode})
        synthesis = build_synthesis(cfg.synthesis, np.random.default_rng(cfg.train.seed))
        _train(cfg, "pretrain_synthesis", synthesis=synthesis)
        heldout = SampleSource(cfg.data, cfg.trajectory, cfg.eval.seed, size_class=cfg.train.size_class)
        results[mode] = heldout_psnr(synthesis, heldout, cfg.eval.samples)
        logger.info(f"ablation {mode}: mean PSNR {results[mode]:.4f} dB")
    if out_csv is not None:
        _write_table(out_csv, "mode,psnr_db", results)
    return results


# ---------------------------------------------------------------- 学習方針のアブレーション

TRAINING_STRATEGIES: tuple[str, ...] = ("random", "pretrain_only", "pretrain_then_e2e", "scale_optimized")


def _fresh_pair(config: RunConfig) -> tuple[AnalysisNet, SynthesisNet]:
    rng = np.random.default_rng(config.train.seed)
    return build_analysis(config.analysis, rng), build_synthesis(config.synthesis, rng)


def _pretrained_pair(config: RunConfig, workdir: Path) -> tuple[AnalysisNet, SynthesisNet]:
    """両ネットを個別に事前学習し、チェックポイント経由で新しいペアに読み込む"""
    analysis, synthesis = _fresh_pair(config)
    _train(config, "pretrain_analysis", workdir / "analysis.dblf", analysis=analysis)
    _train(config, "pretrain_synthesis", workdir / "synthesis.dblf", synthesis=synthesis)
    analysis, synthesis = _fresh_pair(config)
    init_from_checkpoint(analysis, workdir / "analysis.dblf", True, "e2e")
    init_from_checkpoint(synthesis, workdir / "synthesis.dblf", True, "e2e")
    return analysis, synthesis


def train_strategy_pair(strategy: str, config: RunConfig, workdir: Path) -> tuple[AnalysisNet, SynthesisNet]:
    """
    学習方針ひとつ分のペアを学習する

      - random: ランダム初期化から e2e のみ
      - pretrain_only: 事前学習だけ（e2e の前の状態）
      - pretrain_then_e2e: 事前学習したペアから e2e
    学習済みペアは workdir/pair.dblf にも保存する。
    """
    workdir.mkdir(parents=True, exist_ok=True)
    if strategy == "random":
        analysis, synthesis = _fresh_pair(config)
        _train(config, "e2e", workdir / "pair.dblf", analysis=analysis, synthesis=synthesis)
        return analysis, synthesis
    if strategy in ("pretrain_only", "pretrain_then_e2e"):
        analysis, synthesis = _pretrained_pair(config, workdir)
        if strategy == "pretrain_then_e2e":
            _train(config, "e2e", workdir / "pair.dblf", analysis=analysis, synthesis=synthesis)
        else:
            Checkpoint.from_networks(config.to_text(), analysis, synthesis).save(workdir / "pair.dblf")
        return analysis, synthesis
    raise ConfigError(f"no single-pair training for strategy {strategy!r}")


def train_scale_router(config: RunConfig, workdir: Path) -> ScaleRouter:
    """サイズクラスごとに事前学習 → e2e したペアと分類器を学習し、ディレクトリから読み戻す"""
    pairs_dir = workdir / "pairs"
    for size_class in range(3):
        class_config = config.for_size_class(size_class)
        analysis, synthesis = _pretrained_pair(class_config, workdir / f"class{size_class}")
        _train(class_config, "e2e", pairs_dir / f"class{size_class}.dblf", analysis=analysis, synthesis=synthesis)
    classifier = build_classifier(
        classifier_config(config.analysis, config.trajectory.m), np.random.default_rng(config.train.seed)
    )
    _train(config, "classifier", workdir / "classifier.dblf", classifier=classifier)
    return ScaleRouter.from_directory(workdir / "classifier.dblf", pairs_dir)


def deblur_psnr(
    deblur: Callable[[np.ndarray], np.ndarray], source: SampleSource, count: int, stream: str = "test"
) -> float:
    """ボケ画像だけを見て復元したときの保持サンプルでの平均 PSNR"""
    values = []
    for index in range(count):
        sample = source.sample(index, stream)
        values.append(psnr(deblur(sample.blurred), sample.sharp))
    return float(np.mean(values))


def strategy_run(
    strategies: Sequence[str],
    config: RunConfig,
    out_csv: Optional[Union[str, Path]] = None,
    workdir: Optional[Union[str, Path]] = None,
) -> dict[str, float]:
    """
    学習方針ごとにペアを学習し、推定カーネルで復元した保持サンプルの平均 PSNR を返す

    各段階の反復数は config.train.iterations。scale_optimized は全範囲の設定
    （train.size_class = none）でのみ使える。workdir を省略すると一時ディレクトリに
    チェックポイントを置く。
    """
    unknown = [name for name in strategies if name not in TRAINING_STRATEGIES]
    if unknown:
        raise ConfigError(f"unknown training strategies {unknown}; expected {TRAINING_STRATEGIES}")
    if "scale_optimized" in strategies and config.train.size_class is not None:
        raise ConfigError("scale_optimized trains its own size-class pairs; set train.size_class = none")

    heldout = SampleSource(config.data, config.trajectory, config.eval.seed, size_class=config.train.size_class)
    results: dict[str, float] = {}
    scratch = nullcontext(workdir) if workdir is not None else tempfile.TemporaryDirectory(prefix="strategy-")
    with scratch as directory:
        root = Path(directory)
        for strategy in strategies:
            if strategy == "scale_optimized":
                router = train_scale_router(config, root / strategy)
                results[strategy] = deblur_psnr(lambda image: router.deblur(image)[0], heldout, config.eval.samples)
            else:
                analysis, synthesis = train_strategy_pair(strategy, config, root / strategy)
                results[strategy] = deblur_psnr(
                    lambda image: deblur_array(analysis, synthesis, image)[0], heldout, config.eval.samples
                )
            logger.info(f"strategy {strategy}: mean PSNR {results[strategy]:.4f} dB")
    if out_csv is not None:
        _write_table(out_csv, "strategy,psnr_db", results)
    return results
