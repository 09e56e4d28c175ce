import numpy as np
import pytest

from guided_deblur.analysis_net import AnalysisConfig
from guided_deblur.blur_sim import TrajectoryConfig
from guided_deblur.config import EvalConfig, RunConfig
from guided_deblur.data_pipeline import DataConfig
from guided_deblur.synthesis_net import SynthesisConfig
from guided_deblur.tensor import Tape
from guided_deblur.training import TrainPlan


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def fresh_tape():
    """テストごとに独立したテープを使う"""
    with Tape() as tape:
        yield tape


@pytest.fixture
def tiny_config() -> RunConfig:
    """数秒で学習が回る最小構成（16×16、m=5）"""
    return RunConfig(
        analysis=AnalysisConfig(
            levels=2,
            feat_channels=3,
            reduced_channels=2,
            feat_kernel=3,
            convs_per_level=1,
            integrate_kernel=3,
            head_channels=[3, 1],
            m=5,
        ),
        synthesis=SynthesisConfig(depth=1, channels=4, guide_hidden=4, convs_per_block=1, m=5),
        trajectory=TrajectoryConfig(max_speed=1.0, max_accel=0.5, m=5),
        data=DataConfig(crop_size=16, class_bounds=[1, 3, 5], prefetch=1),
        train=TrainPlan(
            lr=1e-3,
            batch_size=2,
            iterations=4,
            epoch_iterations=2,
            val_batches=1,
            checkpoint_every=2,
        ),
        eval=EvalConfig(samples=2),
    )
