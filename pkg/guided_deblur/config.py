"""
実行設定（RunConfig）とプリセット

設定ファイルは 1 行 1 キーの `section.key = value` 形式。
  - リストはカンマ区切り、None は `none`、真偽値は `true` / `false`
  - `#` 以降はコメント
  - 未知のセクション・キーはエラー
正準形はキーの辞書順で、parse → serialize → parse は恒等になる。
"""

import logging
import typing
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .analysis_net import AnalysisConfig
from .blur_sim import TrajectoryConfig
from .data_pipeline import DataConfig
from .errors import ConfigError
from .kernel_cache import param_hash
from .synthesis_net import GUIDANCE_MODES, SynthesisConfig
from .tensor import CONV_METHODS, set_conv_method
from .training import TrainPlan
from .xcorr import level_radius

logger = logging.getLogger(__name__)


class TensorConfig(BaseModel):
    conv_method: Literal["im2col", "naive"] = Field(default="im2col", description="conv2d の実装")


class EvalConfig(BaseModel):
    samples: int = Field(default=64, ge=1, description="評価・アブレーションで使う保持サンプル数")
    seed: int = Field(default=1000, ge=0, description="評価セット生成のシード")
    ablation_modes: list[str] = Field(default_factory=lambda: list(GUIDANCE_MODES), description="アブレーションする誘導モード")

    def model_post_init(self, __context):
        unknown = [mode for mode in self.ablation_modes if mode not in GUIDANCE_MODES]
        if unknown:
            raise ConfigError(f"eval.ablation_modes: unknown modes {unknown}; expected {GUIDANCE_MODES}")


SECTIONS: dict[str, type[BaseModel]] = {
    "tensor": TensorConfig,
    "analysis": AnalysisConfig,
    "synthesis": SynthesisConfig,
    "trajectory": TrajectoryConfig,
    "data": DataConfig,
    "train": TrainPlan,
    "eval": EvalConfig,
}


class RunConfig(BaseModel):
    """全モジュールの設定をまとめたもの"""

    model_config = ConfigDict(extra="forbid")

    tensor: TensorConfig = Field(default_factory=TensorConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    trajectory: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainPlan = Field(default_factory=TrainPlan)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def model_post_init(self, __context):
        m = self.kernel_m
        if self.analysis.m != m or self.synthesis.m != m:
            raise ConfigError(
                f"kernel size mismatch: analysis.m={self.analysis.m}, synthesis.m={self.synthesis.m}, "
                f"expected {m} (trajectory.m or data.class_bounds[train.size_class])"
            )
        if self.data.class_bounds[-1] != self.trajectory.m:
            raise ConfigError(
                f"data.class_bounds {self.data.class_bounds} must end at trajectory.m={self.trajectory.m}"
            )
        crop = self.data.crop_size
        for what, factor in (
            ("analysis.levels", 2 ** (self.analysis.levels - 1)),
            ("synthesis.depth", 2**self.synthesis.depth),
        ):
            if crop % factor:
                raise ConfigError(f"data.crop_size={crop} must be divisible by {factor} ({what})")
        coarsest = crop >> (self.analysis.levels - 1)
        radius = level_radius(m, self.analysis.levels - 1)
        if radius >= coarsest:
            raise ConfigError(
                f"data.crop_size={crop} too small: coarsest map {coarsest} ≤ correlation radius {radius}"
            )

    @property
    def kernel_m(self) -> int:
        if self.train.size_class is None:
            return self.trajectory.m
        return self.data.class_bounds[self.train.size_class]

    def apply(self) -> "RunConfig":
        """プロセス全体に効く設定（conv2d の実装）を反映する"""
        set_conv_method(self.tensor.conv_method)
        return self

    def updated(self, **sections: dict[str, Any]) -> "RunConfig":
        """セクションごとの差分を当てた新しい設定（検証し直す）"""
        data = self.model_dump()
        for section, changes in sections.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            data[section].update(changes)
        try:
            return RunConfig(**data)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    def for_size_class(self, size_class: int) -> "RunConfig":
        """クラス特化ペア用の設定（m をクラス上限に合わせる）"""
        if size_class not in (0, 1, 2):
            raise ConfigError(f"size_class must be 0, 1 or 2, got {size_class}")
        m = self.data.class_bounds[size_class]
        return self.updated(train={"size_class": size_class}, analysis={"m": m}, synthesis={"m": m})

    def for_stage(self, stage: str) -> "RunConfig":
        return self.updated(train={"stage": stage})

    def fingerprint(self) -> str:
        return param_hash(self.model_dump(mode="json"))

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            values = getattr(self, section).model_dump()
            for key, value in values.items():
                lines.append(f"{section}.{key} = {_format_value(value)}")
        return "\n".join(sorted(lines)) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        sections: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            section, _, name = key.partition(".")
            if section not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section {section!r}")
            model = SECTIONS[section]
            if name not in model.model_fields:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if name in sections[section]:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            sections[section][name] = _parse_value(value, model.model_fields[name].annotation)
        try:
            return cls(**{name: values for name, values in sections.items()})
        except ValidationError as e:
            raise ConfigError(f"{source}: {e}") from e


def _is_list(annotation) -> bool:
    if typing.get_origin(annotation) is list:
        return True
    return any(typing.get_origin(arg) is list for arg in typing.get_args(annotation))


def _allows_none(annotation) -> bool:
    return annotation is type(None) or type(None) in typing.get_args(annotation)


def _parse_value(value: str, annotation) -> Any:
    if value.lower() == "none" and _allows_none(annotation):
        return None
    if _is_list(annotation):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def paper_config() -> RunConfig:
    """512×512、m=85 の論文規模"""
    return RunConfig()


def toy_config() -> RunConfig:
    """64×64、m=17、チャネル数 1/8 の机上規模"""
    return RunConfig(
        analysis=AnalysisConfig(feat_channels=8, reduced_channels=4, head_channels=[8, 8, 4, 1], m=17),
        synthesis=SynthesisConfig(channels=16, guide_hidden=16, m=17),
        trajectory=TrajectoryConfig(max_speed=2.5, max_accel=1.2, m=17),
        data=DataConfig(crop_size=64, class_bounds=[5, 11, 17], prefetch=2),
        train=TrainPlan(
            lr=1e-3,
            iterations=2000,
            epoch_iterations=500,
            val_batches=2,
            checkpoint_every=500,
        ),
    )


PRESETS = {"paper": paper_config, "toy": toy_config}


def load_config(name_or_path: Optional[Union[str, Path]] = None) -> RunConfig:
    """プリセット名（paper / toy）または設定ファイルのパスから読み込む（省略時は toy）"""
    if name_or_path is None:
        return toy_config()
    key = str(name_or_path)
    if key in PRESETS:
        return PRESETS[key]()
    path = Path(key)
    if not path.exists():
        raise ConfigError(f"config not found: {key} (presets: {', '.join(PRESETS)})")
    text = path.read_text(encoding="utf-8")
    logger.debug(f"Loaded config {path}")
    return RunConfig.from_text(text, str(path))


__all__ = [
    "CONV_METHODS",
    "EvalConfig",
    "PRESETS",
    "RunConfig",
    "SECTIONS",
    "TensorConfig",
    "load_config",
    "paper_config",
    "toy_config",
]
