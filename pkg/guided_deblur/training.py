"""
損失・最適化・段階的学習

段階は 4 つ:
  pretrain_analysis   推定カーネルと真のカーネルの L1
  pretrain_synthesis  真のカーネルで誘導した復元画像の L2
  e2e                 推定カーネルで誘導した復元画像の L2（カーネル損失なし）
  classifier          カーネルサイズ 3 クラスの交差エントロピー

学習ループは 1 スレッドで、バッチ生成だけを stream_batches で並行させる。
"""

import asyncio
import logging
import time
from pathlib import Path
from typing import Literal, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .analysis_net import AnalysisConfig, estimate_kernel, trunk_specs
from .checkpoint import Checkpoint
from .data_pipeline import Batch, SampleSource, stream_batches
from .errors import ConfigError, ShapeError, TrainingError, UsageError, shape_str
from .layers import LayerSpec, Network
from .synthesis_net import SynthesisNet, synthesize
from .tensor import DEFAULT_DTYPE, Tensor, backward, flatten, no_grad, relu, track
from .xcorr import CorrelationSpec, cross_correlate, level_radius

logger = logging.getLogger(__name__)

Stage = Literal["pretrain_analysis", "pretrain_synthesis", "e2e", "classifier"]
STAGES: tuple[str, ...] = ("pretrain_analysis", "pretrain_synthesis", "e2e", "classifier")
NUM_CLASSES = 3


def _as_tensor(value: Union[Tensor, np.ndarray], dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


# ---------------------------------------------------------------- 損失


def l1_kernel_loss(k_hat: Tensor, k_true: Union[Tensor, np.ndarray]) -> Tensor:
    """全グリッドセルの平均絶対誤差"""
    k_true = _as_tensor(k_true, k_hat.dtype)
    if k_hat.shape != k_true.shape:
        raise ShapeError("l1_kernel_loss", shape_str(k_hat.shape), shape_str(k_true.shape))
    diff = k_hat.data - k_true.data
    count = diff.size
    value = np.asarray(np.abs(diff).mean(), dtype=k_hat.dtype)
    sign = np.sign(diff)

    def _backward(g: np.ndarray):
        grad = (g / count) * sign
        return grad, -grad

    return track("l1_kernel_loss", value, (k_hat, k_true), _backward)


def l2_image_loss(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """全画素・全チャネルの平均二乗誤差"""
    target = _as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError("l2_image_loss", shape_str(pred.shape), shape_str(target.shape))
    diff = pred.data - target.data
    count = diff.size
    value = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def _backward(g: np.ndarray):
        grad = (2.0 * g / count) * diff
        return grad, -grad

    return track("l2_image_loss", value, (pred, target), _backward)


def cross_entropy3(logits: Tensor, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    3 クラスの softmax 交差エントロピー（バッチ平均）

    logits は N×3（単一なら長さ 3）。最大値を引いてから exp をとる。
    """
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    if z.ndim != 2 or z.shape[1] != NUM_CLASSES:
        raise ShapeError("cross_entropy3", f"N×{NUM_CLASSES} logits", shape_str(logits.shape))
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (z.shape[0],):
        raise ShapeError("cross_entropy3", f"{z.shape[0]} labels", shape_str(labels.shape))
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise UsageError(f"cross_entropy3: labels must be integers in 0..{NUM_CLASSES - 1}, got {labels.tolist()}")

    n = z.shape[0]
    shifted = z.astype(np.float64) - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    value = np.asarray((np.log(total[:, 0]) - shifted[rows, labels]).mean(), dtype=logits.dtype)
    probs = exp / total
    probs[rows, labels] -= 1.0

    def _backward(g: np.ndarray):
        grad = (g * probs / n).astype(logits.dtype)
        return (grad.reshape(logits.shape),)

    return track("cross_entropy3", value, (logits,), _backward)


# ---------------------------------------------------------------- 最適化


class AdamState(BaseModel):
    """Adam の 1 次・2 次モーメントとステップ数"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    step: int = Field(default=0, ge=0)
    m: dict[str, np.ndarray] = Field(default_factory=dict)
    v: dict[str, np.ndarray] = Field(default_factory=dict)


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, Optional[np.ndarray]]:
    return {name: tensor.grad for name, tensor in params.items()}


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
) -> AdamState:
    """
    バイアス補正付き Adam の 1 ステップ（params を書き換える）

    勾配が None のパラメータは更新しない。非有限の勾配が 1 つでもあれば
    何も更新せずに TrainingError を送出する。
    """
    for name, grad in grads.items():
        if grad is None:
            continue
        if grad.shape != params[name].shape:
            raise ShapeError(f"adam_step[{name}]", shape_str(params[name].shape), shape_str(grad.shape))
        bad = int((~np.isfinite(grad)).sum())
        if bad:
            raise TrainingError(
                f"non-finite gradient for {name}",
                {"parameter": name, "step": state.step + 1, "non_finite": bad, "lr": lr},
            )

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for name, grad in grads.items():
        if grad is None:
            continue
        tensor = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data = (tensor.data - update).astype(tensor.dtype, copy=False)
    return state


class PlateauSchedule:
    """
    損失の停滞で学習率を下げるスケジュール

    最良値を持つエポックから数えて patience エポックの間、相対 threshold 以上の
    改善がなければ停滞とみなす。下げた後は patience エポックのクールダウン。
    """

    def __init__(self, factor: float = 0.8, patience: int = 5, threshold: float = 1e-3):
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best: Optional[float] = None
        self.since_best = 0
        self.since_reduction: Optional[int] = None

    def improves(self, loss: float) -> bool:
        if self.best is None:
            return np.isfinite(loss)
        return bool(loss < self.best - self.threshold * abs(self.best))

    def step(self, loss: float) -> bool:
        """1 エポック分の損失を記録し、学習率を下げるべきなら True"""
        if self.since_reduction is not None:
            self.since_reduction += 1
        if self.improves(loss):
            self.best = float(loss)
            self.since_best = 1
        else:
            self.since_best += 1
        cooled = self.since_reduction is None or self.since_reduction >= self.patience
        if self.since_best >= self.patience and cooled:
            self.since_reduction = 0
            return True
        return False


def lr_schedule_update(
    history: Sequence[float],
    current_lr: float,
    factor: float = 0.8,
    patience: int = 5,
    threshold: float = 1e-3,
) -> float:
    """エポック損失の履歴を先頭から再生し、最後のエポックで停滞と判定されたら lr を下げる"""
    schedule = PlateauSchedule(factor, patience, threshold)
    reduce = False
    for loss in history:
        reduce = schedule.step(float(loss))
    return current_lr * factor if reduce else current_lr


# ---------------------------------------------------------------- 分類器


def classifier_config(analysis: AnalysisConfig, m: int) -> AnalysisConfig:
    """解析ネットの構成を流用し、相関半径を全体のカーネルサイズ m に合わせる"""
    return AnalysisConfig(**{**analysis.model_dump(), "m": m})


class ClassifierNet(Network):
    """単一スケールの解析トランク + 3 出力の全結合層"""

    prefix = "classifier."

    def __init__(self, config: AnalysisConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.config = config
        super().__init__(rng, dtype)

    @property
    def correlation_spec(self) -> CorrelationSpec:
        return CorrelationSpec(
            radius=level_radius(self.config.m, 0),
            channels=self.config.reduced_channels,
            pair_mode=self.config.pair_mode,
        )

    def layer_specs(self) -> list[LayerSpec]:
        cfg = self.config
        extent = self.correlation_spec.extent
        specs = trunk_specs("level0", cfg)
        specs.append(
            LayerSpec(
                name="output",
                kind="linear",
                in_channels=cfg.reduced_channels * extent * extent,
                out_channels=NUM_CLASSES,
            )
        )
        return specs

    def forward(self, y: Tensor) -> Tensor:
        if y.ndim != 4 or y.shape[1] != 1:
            raise ShapeError("classify_kernel_size", "luminance input N×1×H×W", shape_str(y.shape))
        feats = y
        for c in range(self.config.convs_per_level):
            feats = relu(self.conv(f"level0.feat{c}", feats))
        reduced = relu(self.conv("level0.reduce", feats))
        corr = cross_correlate(reduced, self.correlation_spec)
        mixed = relu(self.conv("level0.mix", corr))
        return self.dense("output", flatten(mixed))


def build_classifier(config: AnalysisConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> ClassifierNet:
    return ClassifierNet(config, rng, dtype)


def classify_kernel_size(classifier: ClassifierNet, y_norm: Union[Tensor, np.ndarray]) -> np.ndarray:
    """各画像のサイズクラス（0/1/2）。同点は小さいクラス"""
    with no_grad():
        logits = classifier.forward(_as_tensor(y_norm, classifier.dtype))
    return np.argmax(logits.data, axis=1)


# ---------------------------------------------------------------- 段階的学習


class TrainPlan(BaseModel):
    """1 段階分の学習計画"""

    stage: Stage = Field(default="pretrain_analysis")
    lr: float = Field(default=1e-4, gt=0, description="初期学習率")
    lr_decay: float = Field(default=0.8, gt=0, lt=1, description="停滞時に掛ける係数")
    plateau_epochs: int = Field(default=5, ge=1, description="停滞とみなすエポック数（クールダウンも同じ）")
    plateau_threshold: float = Field(default=1e-3, ge=0, description="改善とみなす相対減少量")
    batch_size: int = Field(default=4, ge=1)
    iterations: int = Field(default=1_000_000, ge=0)
    epoch_iterations: int = Field(default=5000, ge=1, description="1 エポックのイテレーション数")
    val_batches: int = Field(default=4, ge=0, description="エポックごとの検証バッチ数（0 なら学習損失の平均）")
    checkpoint_every: int = Field(default=10000, ge=0, description="途中チェックポイントの間隔（0 で無効）")
    seed: int = Field(default=0, ge=0)
    size_class: Optional[int] = Field(default=None, ge=0, le=2, description="クラス特化ペアの学習対象")
    require_pretrained: bool = Field(default=False, description="e2e で事前学習済みチェックポイントを必須にする")


def stage_loss(
    stage: Stage,
    batch: Batch,
    analysis: Optional[Network] = None,
    synthesis: Optional[SynthesisNet] = None,
    classifier: Optional[ClassifierNet] = None,
) -> Tensor:
    """段階ごとの損失。e2e は真のカーネルを一切参照しない"""
    if stage == "pretrain_analysis":
        k_hat = estimate_kernel(analysis, _as_tensor(batch.y_norm, analysis.dtype))
        return l1_kernel_loss(k_hat, batch.kernels)
    if stage == "pretrain_synthesis":
        dtype = synthesis.dtype
        pred = synthesize(synthesis, _as_tensor(batch.blurred, dtype), _as_tensor(batch.kernels, dtype))
        return l2_image_loss(pred, batch.sharp)
    if stage == "e2e":
        k_hat = estimate_kernel(analysis, _as_tensor(batch.y_norm, analysis.dtype))
        pred = synthesize(synthesis, _as_tensor(batch.blurred, synthesis.dtype), k_hat)
        return l2_image_loss(pred, batch.sharp)
    if stage == "classifier":
        logits = classifier.forward(_as_tensor(batch.y_norm, classifier.dtype))
        return cross_entropy3(logits, batch.size_class)
    raise ConfigError(f"unknown training stage {stage!r}; expected one of {STAGES}")


def init_from_checkpoint(net: Network, path: Optional[Union[str, Path]], required: bool, stage: str) -> bool:
    """
    事前学習済みパラメータを読み込む

    path が無い場合、required なら ConfigError、そうでなければランダム初期化のまま
    警告を出して False を返す。
    """
    label = net.prefix.rstrip(".")
    if path is None:
        if required:
            raise ConfigError(f"{stage}: a pre-trained {label} checkpoint is required (train.require_pretrained = true)")
        logger.warning(f"{stage}: {label} starts from random initialization")
        return False
    ckpt = Checkpoint.load(path)
    if not ckpt.has(net.prefix):
        raise ConfigError(f"{stage}: checkpoint {path} has no {label} parameters")
    ckpt.apply_to(net)
    logger.info(f"{stage}: loaded {label} from {path}")
    return True


class StageTrainer:
    """1 段階分の学習ループ（検証・学習率スケジュール・チェックポイント付き）"""

    def __init__(
        self,
        plan: TrainPlan,
        source: SampleSource,
        analysis: Optional[Network] = None,
        synthesis: Optional[SynthesisNet] = None,
        classifier: Optional[ClassifierNet] = None,
        config_text: str = "",
        out_path: Optional[Union[str, Path]] = None,
        log_path: Optional[Union[str, Path]] = None,
    ):
        self.plan = plan
        self.source = source
        self.analysis = analysis
        self.synthesis = synthesis
        self.classifier = classifier
        self.config_text = config_text
        self.out_path = Path(out_path) if out_path else None
        self.log_path = Path(log_path) if log_path else None

        self.networks = self._trained_networks()
        self.params: dict[str, Tensor] = {}
        for net in self.networks:
            for name, tensor in net.named_parameters():
                self.params[f"{net.prefix}{name}"] = tensor
        self.state = AdamState()
        self.lr = plan.lr
        self.schedule = PlateauSchedule(plan.lr_decay, plan.plateau_epochs, plan.plateau_threshold)
        self.epoch_losses: list[float] = []
        self.lr_history: list[float] = []
        self.train_losses: list[float] = []
        self._val_cache: Optional[list[Batch]] = None

    def _trained_networks(self) -> list[Network]:
        required = {
            "pretrain_analysis": ("analysis",),
            "pretrain_synthesis": ("synthesis",),
            "e2e": ("analysis", "synthesis"),
            "classifier": ("classifier",),
        }[self.plan.stage]
        nets = []
        for attr in required:
            net = getattr(self, attr)
            if net is None:
                raise ConfigError(f"stage {self.plan.stage} needs a {attr} network")
            nets.append(net)
        return nets

    def loss(self, batch: Batch) -> Tensor:
        return stage_loss(self.plan.stage, batch, self.analysis, self.synthesis, self.classifier)

    def validation_batches(self) -> list[Batch]:
        if self._val_cache is None:
            self._val_cache = [
                self.source.batch("val", index, self.plan.batch_size) for index in range(self.plan.val_batches)
            ]
        return self._val_cache

    def validate(self) -> float:
        """固定の検証バッチでの平均損失（勾配は記録しない）"""
        batches = self.validation_batches()
        if not batches:
            return float("nan")
        with no_grad():
            values = [self.loss(batch).item() for batch in batches]
        return float(np.mean(values))

    def train_step(self, batch: Batch, iteration: int) -> float:
        for net in self.networks:
            net.zero_grad()
        loss = self.loss(batch)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite {self.plan.stage} loss at iteration {iteration}",
                {"iteration": iteration, "loss": value, "lr": self.lr},
            )
        backward(loss)
        adam_step(self.params, collect_grads(self.params), self.state, self.lr)
        return value

    def end_epoch(self, epoch: int, recent: Sequence[float]) -> None:
        val = self.validate() if self.plan.val_batches else float(np.mean(recent))
        self.epoch_losses.append(val)
        if self.schedule.step(val):
            self.lr *= self.plan.lr_decay
            logger.info(f"epoch {epoch}: loss stagnated, learning rate reduced to {self.lr:.3e}")
        self.lr_history.append(self.lr)
        logger.info(f"epoch {epoch}: {self.plan.stage} epoch loss {val:.6e}, lr {self.lr:.3e}")

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_networks(self.config_text, *self.networks)

    async def _run(self) -> Checkpoint:
        plan = self.plan
        log = self.log_path.open("a", encoding="utf-8") if self.log_path else None
        started = time.time()
        recent: list[float] = []
        try:
            iteration = 0
            async for batch in stream_batches(
                self.source, "train", 0, plan.iterations, plan.batch_size, self.source.data.prefetch
            ):
                iteration += 1
                value = self.train_step(batch, iteration)
                self.train_losses.append(value)
                recent.append(value)
                if log is not None:
                    log.write(f"{iteration} {value:.8e} {self.lr:.8e}\n")
                if iteration % plan.epoch_iterations == 0:
                    self.end_epoch(iteration // plan.epoch_iterations, recent)
                    recent = []
                if self.out_path and plan.checkpoint_every and iteration % plan.checkpoint_every == 0:
                    self.checkpoint().save(self.out_path)
        finally:
            if log is not None:
                log.close()
        logger.info(f"{plan.stage}: {plan.iterations} iterations in {time.time() - started:.1f}s")
        ckpt = self.checkpoint()
        if self.out_path:
            ckpt.save(self.out_path)
        return ckpt

    def run(self) -> Checkpoint:
        return asyncio.run(self._run())


def run_stage(
    plan: TrainPlan,
    source: SampleSource,
    analysis: Optional[Network] = None,
    synthesis: Optional[SynthesisNet] = None,
    classifier: Optional[ClassifierNet] = None,
    config_text: str = "",
    out_path: Optional[Union[str, Path]] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> Checkpoint:
    """plan.stage の学習を実行し、学習したネットワークのチェックポイントを返す"""
    logger.info(
        f"Starting {plan.stage}: {plan.iterations} iterations, batch {plan.batch_size}, lr {plan.lr:.1e}"
    )
    trainer = StageTrainer(plan, source, analysis, synthesis, classifier, config_text, out_path, log_path)
    return trainer.run()
