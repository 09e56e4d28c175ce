import math

import numpy as np
import pytest

from guided_deblur.analysis_net import build_analysis
from guided_deblur.blur_sim import BlurKernel
from guided_deblur.checkpoint import Checkpoint
from guided_deblur.data_pipeline import SampleSource
from guided_deblur.errors import ConfigError, ShapeError, TrainingError, UsageError
from guided_deblur.synthesis_net import build_synthesis
from guided_deblur.tensor import Tensor, backward
from guided_deblur.training import (
    AdamState,
    PlateauSchedule,
    StageTrainer,
    adam_step,
    build_classifier,
    classifier_config,
    classify_kernel_size,
    cross_entropy3,
    init_from_checkpoint,
    l1_kernel_loss,
    l2_image_loss,
    lr_schedule_update,
    run_stage,
    stage_loss,
)


def guided_synthesis(config, rng, dtype=np.float64):
    """出力ヘッドと誘導ユニットの最終層を乱数にした合成ネット（勾配が k まで届く）"""
    cfg = config.synthesis.model_copy(update={"zero_init_output": False})
    net = build_synthesis(cfg, rng, dtype=dtype)
    for name, tensor in net.params.items():
        if name.endswith("fc3.weight"):
            tensor.data = rng.standard_normal(tensor.shape).astype(dtype) * 0.5
    return with_positive_biases(net)


def with_positive_biases(net, value=0.1):
    """ReLU が全滅しないようにバイアスを正にする"""
    for name, tensor in net.params.items():
        if name.endswith(".bias"):
            tensor.data = np.full(tensor.shape, value, dtype=tensor.dtype)
    return net


class TestLosses:
    def test_l1_identical(self):
        k = BlurKernel.delta(3).grid[None, None]
        assert l1_kernel_loss(Tensor(k), k).item() == 0.0

    def test_l1_adjacent_delta(self):
        a = BlurKernel.delta(3).grid[None, None]
        b = np.zeros_like(a)
        b[0, 0, 1, 2] = 1.0
        assert l1_kernel_loss(Tensor(a), b).item() == pytest.approx(2 / 9)
        assert l1_kernel_loss(Tensor(b), a).item() == l1_kernel_loss(Tensor(a), b).item()

    def test_l2_offset(self):
        target = np.zeros((1, 3, 4, 4))
        assert l2_image_loss(Tensor(target), target).item() == 0.0
        assert l2_image_loss(Tensor(target + 0.5), target).item() == pytest.approx(0.25)

    def test_l2_gradient(self, rng):
        pred = Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
        target = rng.standard_normal((1, 3, 2, 2))
        backward(l2_image_loss(pred, target))
        np.testing.assert_allclose(pred.grad, 2 * (pred.data - target) / pred.size, atol=1e-12)

    def test_loss_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l2_image_loss(Tensor(np.zeros((1, 3, 2, 2))), np.zeros((1, 3, 2, 3)))

    def test_cross_entropy_values(self):
        assert cross_entropy3(Tensor(np.array([20.0, 0.0, 0.0])), 0).item() < 1e-8
        assert cross_entropy3(Tensor(np.zeros(3)), 2).item() == pytest.approx(math.log(3))

    def test_cross_entropy_gradient(self):
        logits = Tensor(np.zeros((2, 3)), requires_grad=True)
        backward(cross_entropy3(logits, [0, 2]))
        expected = np.array([[-2 / 3, 1 / 3, 1 / 3], [1 / 3, 1 / 3, -2 / 3]]) / 2
        np.testing.assert_allclose(logits.grad, expected, atol=1e-12)

    @pytest.mark.parametrize("labels", [[3], [-1], [0.5]])
    def test_cross_entropy_bad_label(self, labels):
        with pytest.raises(UsageError):
            cross_entropy3(Tensor(np.zeros((1, 3))), labels)


class TestAdam:
    def test_zero_gradient(self):
        param = Tensor(np.array([1.0, -2.0]))
        state = adam_step({"p": param}, {"p": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(param.data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_moves_by_lr(self):
        param = Tensor(np.array([1.0]))
        adam_step({"p": param}, {"p": np.array([0.3])}, AdamState(), lr=0.01)
        assert param.data[0] == pytest.approx(0.99, abs=1e-7)
        param = Tensor(np.array([1.0]))
        adam_step({"p": param}, {"p": np.array([-5.0])}, AdamState(), lr=0.01)
        assert param.data[0] == pytest.approx(1.01, abs=1e-7)

    def test_none_gradient_skipped(self):
        param = Tensor(np.array([1.0]))
        state = adam_step({"p": param}, {"p": None}, AdamState(), lr=0.1)
        assert param.data[0] == 1.0
        assert "p" not in state.m

    def test_deterministic(self, rng):
        grads = [rng.standard_normal(4) for _ in range(5)]
        results = []
        for _ in range(2):
            param, state = Tensor(np.ones(4)), AdamState()
            for g in grads:
                state = adam_step({"p": param}, {"p": g}, state, lr=0.01)
            results.append(param.data.copy())
        assert np.array_equal(results[0], results[1])

    def test_nan_gradient(self):
        a, b = Tensor(np.array([1.0])), Tensor(np.array([2.0, 3.0]))
        state = AdamState()
        with pytest.raises(TrainingError) as info:
            adam_step({"a": a, "b": b}, {"a": np.array([0.1]), "b": np.array([np.nan, 1.0])}, state, lr=0.1)
        assert info.value.diagnostics == {"parameter": "b", "step": 1, "non_finite": 1, "lr": 0.1}
        assert a.data[0] == 1.0
        assert state.step == 0


class TestSchedule:
    def test_decreasing_keeps_lr(self):
        assert lr_schedule_update([1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4], 1e-4) == 1e-4

    def test_flat_five_epochs(self):
        assert lr_schedule_update([1.0] * 5, 1e-4) == pytest.approx(0.8e-4)
        assert lr_schedule_update([1.0] * 4, 1e-4) == 1e-4

    def test_flat_ten_epochs_reduces_twice(self):
        schedule = PlateauSchedule()
        lr = 1e-4
        history = []
        for _ in range(10):
            if schedule.step(1.0):
                lr *= 0.8
            history.append(lr)
        assert lr == pytest.approx(0.64e-4)
        assert sum(1 for a, b in zip(history, history[1:]) if b < a) == 2
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_tiny_improvement_is_stagnation(self):
        assert lr_schedule_update([1.0, 0.9999, 0.9998, 0.9997, 0.9996], 1.0) == pytest.approx(0.8)


class TestClassifier:
    def test_three_outputs_and_shift_invariance(self, tiny_config, rng):
        net = build_classifier(classifier_config(tiny_config.analysis, 5), rng)
        y = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        logits = net.forward(Tensor(y))
        assert logits.shape == (2, 3)
        classes = classify_kernel_size(net, y)
        assert np.array_equal(classes, np.argmax(logits.data.astype(np.float64) + 7.0, axis=1))

    def test_radius_follows_global_m(self, tiny_config, rng):
        net = build_classifier(classifier_config(tiny_config.analysis, 17), rng)
        assert net.correlation_spec.radius == 8
        assert net.params["output.weight"].shape == (3, 2 * 17 * 17)


class TestStageLoss:
    def test_e2e_reaches_analysis(self, tiny_config, rng):
        analysis = with_positive_biases(build_analysis(tiny_config.analysis, rng, dtype=np.float64))
        synthesis = guided_synthesis(tiny_config, rng)
        batch = SampleSource.from_config(tiny_config).batch("train", 0, 2)
        backward(stage_loss("e2e", batch, analysis, synthesis))
        grads = [t.grad for t in analysis.params.values() if t.grad is not None]
        assert grads
        assert any(np.abs(g).sum() > 0 for g in grads)

    def test_e2e_ignores_true_kernel(self, tiny_config, rng):
        analysis = build_analysis(tiny_config.analysis, rng)
        synthesis = guided_synthesis(tiny_config, rng, dtype=np.float32)
        batch = SampleSource.from_config(tiny_config).batch("train", 0, 2)
        perturbed = batch.model_copy(update={"kernels": np.flip(batch.kernels, axis=-1) * 0.5})
        a = stage_loss("e2e", batch, analysis, synthesis).item()
        b = stage_loss("e2e", perturbed, analysis, synthesis).item()
        assert a == b

    def test_unknown_stage(self, tiny_config):
        batch = SampleSource.from_config(tiny_config).batch("train", 0, 1)
        with pytest.raises(ConfigError):
            stage_loss("warmup", batch)


class TestRunStage:
    def test_log_checkpoint_and_schedule(self, tiny_config, tmp_path, rng):
        plan = tiny_config.train
        analysis = build_analysis(tiny_config.analysis, rng)
        source = SampleSource.from_config(tiny_config)
        trainer = StageTrainer(
            plan,
            source,
            analysis=analysis,
            config_text=tiny_config.to_text(),
            out_path=tmp_path / "a.dblf",
            log_path=tmp_path / "a.log",
        )
        ckpt = trainer.run()
        lines = (tmp_path / "a.log").read_text().splitlines()
        assert [int(line.split()[0]) for line in lines] == [1, 2, 3, 4]
        assert all(len(line.split()) == 3 for line in lines)
        assert len(trainer.epoch_losses) == 2
        assert trainer.lr_history == [plan.lr, plan.lr]
        assert trainer.state.step == 4
        saved = Checkpoint.load(tmp_path / "a.dblf")
        assert saved.config_text == tiny_config.to_text()
        assert set(saved.params) == set(ckpt.params)
        assert all(name.startswith("analysis.") for name in saved.params)

    def test_parameters_change(self, tiny_config, rng):
        synthesis = build_synthesis(tiny_config.synthesis, rng)
        before = {name: t.data.copy() for name, t in synthesis.params.items()}
        plan = tiny_config.train.model_copy(update={"stage": "pretrain_synthesis", "val_batches": 0})
        run_stage(plan, SampleSource.from_config(tiny_config), synthesis=synthesis)
        assert not np.array_equal(before["head.weight"], synthesis.params["head.weight"].data)

    def test_missing_network(self, tiny_config):
        plan = tiny_config.train.model_copy(update={"stage": "e2e"})
        with pytest.raises(ConfigError):
            StageTrainer(plan, SampleSource.from_config(tiny_config), analysis=None)

    def test_non_finite_loss(self, tiny_config, rng):
        analysis = build_analysis(tiny_config.analysis, rng)
        analysis.params["level0.feat0.weight"].data[:] = np.nan
        source = SampleSource.from_config(tiny_config)
        trainer = StageTrainer(tiny_config.train, source, analysis=analysis)
        with pytest.raises(TrainingError):
            trainer.train_step(source.batch("train", 0, 2), 1)


class TestInitFromCheckpoint:
    def test_required_without_path(self, tiny_config, rng):
        with pytest.raises(ConfigError):
            init_from_checkpoint(build_analysis(tiny_config.analysis, rng), None, True, "e2e")

    def test_optional_without_path(self, tiny_config, rng):
        assert init_from_checkpoint(build_analysis(tiny_config.analysis, rng), None, False, "e2e") is False

    def test_loads_matching_prefix(self, tiny_config, tmp_path):
        source = build_analysis(tiny_config.analysis, np.random.default_rng(1))
        Checkpoint.from_networks("", source).save(tmp_path / "a.dblf")
        target = build_analysis(tiny_config.analysis, np.random.default_rng(2))
        assert init_from_checkpoint(target, tmp_path / "a.dblf", True, "e2e")
        for name, tensor in source.params.items():
            assert np.array_equal(tensor.data, target.params[name].data)

    def test_wrong_network(self, tiny_config, tmp_path, rng):
        Checkpoint.from_networks("", build_analysis(tiny_config.analysis, rng)).save(tmp_path / "a.dblf")
        with pytest.raises(ConfigError):
            init_from_checkpoint(build_synthesis(tiny_config.synthesis, rng), tmp_path / "a.dblf", False, "e2e")
