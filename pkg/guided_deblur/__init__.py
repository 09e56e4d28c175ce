"""カーネル推定（解析ネットワーク）とカーネル誘導 U-Net（合成ネットワーク）によるブラインド画像復元"""

from .analysis_net import AnalysisConfig, AnalysisNet, build_analysis, estimate_kernel
from .blur_sim import BlurKernel, TrajectoryConfig, apply_blur, sample_kernel
from .checkpoint import Checkpoint
from .config import RunConfig, load_config
from .errors import ConfigError, DecodeError, DeblurError, ShapeError, TrainingError, UsageError
from .inference import ScaleRouter, deblur_array
from .metrics import EvalReport, evaluate_set, mssim, psnr
from .synthesis_net import SynthesisConfig, SynthesisNet, build_synthesis, synthesize
from .tensor import Tensor, backward, no_grad
from .training import TrainPlan, run_stage

__all__ = [
    "AnalysisConfig",
    "AnalysisNet",
    "BlurKernel",
    "Checkpoint",
    "ConfigError",
    "DecodeError",
    "DeblurError",
    "EvalReport",
    "RunConfig",
    "ScaleRouter",
    "ShapeError",
    "SynthesisConfig",
    "SynthesisNet",
    "Tensor",
    "TrainPlan",
    "TrainingError",
    "TrajectoryConfig",
    "UsageError",
    "apply_blur",
    "backward",
    "build_analysis",
    "build_synthesis",
    "deblur_array",
    "estimate_kernel",
    "evaluate_set",
    "load_config",
    "mssim",
    "no_grad",
    "psnr",
    "run_stage",
    "sample_kernel",
    "synthesize",
]
