import numpy as np
import pytest

from guided_deblur.analysis_net import build_analysis
from guided_deblur.blur_sim import read_kernel
from guided_deblur.checkpoint import Checkpoint
from guided_deblur.data_pipeline import load_dataset, read_image, write_image
from guided_deblur.main import main
from guided_deblur.metrics import psnr
from guided_deblur.synthesis_net import build_synthesis


@pytest.fixture
def config_file(tiny_config, tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(tiny_config.to_text(), encoding="utf-8")
    return path


@pytest.fixture
def pair_checkpoint(tiny_config, tmp_path, rng):
    path = tmp_path / "pair.dblf"
    Checkpoint.from_networks(
        tiny_config.to_text(), build_analysis(tiny_config.analysis, rng), build_synthesis(tiny_config.synthesis, rng)
    ).save(path)
    return path


class TestParsing:
    def test_no_command(self):
        assert main([]) == 1

    def test_unknown_command(self):
        assert main(["sharpen"]) == 1

    def test_missing_required(self):
        assert main(["gen-kernels", "--count", "3"]) == 1

    def test_bad_module_choice(self):
        assert main(["gradcheck", "--module", "nope"]) == 1


class TestGenerate:
    def test_gen_kernels(self, config_file, tmp_path):
        out = tmp_path / "kernels"
        assert main(["gen-kernels", "--config", str(config_file), "--count", "3", "--seed", "7", "--out", str(out)]) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["00000.bkrn", "00001.bkrn", "00002.bkrn"]
        kernel = read_kernel(out / "00000.bkrn")
        assert kernel.m == 5
        assert kernel.grid.sum() == pytest.approx(1.0, abs=1e-5)

    def test_gen_kernels_is_seeded(self, config_file, tmp_path):
        for name in ("a", "b"):
            main(["gen-kernels", "--config", str(config_file), "--count", "1", "--seed", "3", "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "00000.bkrn").read_bytes() == (tmp_path / "b" / "00000.bkrn").read_bytes()

    def test_gen_kernels_without_motion_are_deltas(self, tiny_config, tmp_path):
        path = tmp_path / "still.cfg"
        still = tiny_config.updated(trajectory={"max_speed": 0.0, "psf_sigma_range": [0.0, 0.0]})
        path.write_text(still.to_text(), encoding="utf-8")
        out = tmp_path / "kernels"
        assert main(["gen-kernels", "--config", str(path), "--count", "4", "--out", str(out)]) == 0
        assert all(read_kernel(p).is_delta() for p in sorted(out.iterdir()))

    def test_zero_count(self, tmp_path):
        assert main(["gen-kernels", "--count", "0", "--out", str(tmp_path / "k")]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-kernels", "--config", str(tmp_path / "nope.cfg"), "--count", "1", "--out", str(tmp_path)]) == 1

    def test_gen_dataset(self, config_file, tmp_path):
        out = tmp_path / "data"
        assert main(["gen-dataset", "--config", str(config_file), "--count", "2", "--out", str(out)]) == 0
        assert len(load_dataset(out)) == 2


class TestTrain:
    def test_pretrain_analysis_writes_checkpoint_and_log(self, config_file, tmp_path):
        out = tmp_path / "analysis.dblf"
        assert main(["pretrain-analysis", "--config", str(config_file), "--iterations", "2", "--out", str(out)]) == 0
        ckpt = Checkpoint.load(out)
        assert ckpt.has("analysis.")
        assert "train.stage = pretrain_analysis" in ckpt.config_text
        lines = out.with_suffix(".log").read_text().splitlines()
        assert [line.split()[0] for line in lines] == ["1", "2"]

    def test_e2e_requires_pretrained_when_configured(self, tiny_config, tmp_path):
        path = tmp_path / "strict.cfg"
        path.write_text(tiny_config.updated(train={"require_pretrained": True}).to_text(), encoding="utf-8")
        assert main(["train-e2e", "--config", str(path), "--out", str(tmp_path / "e2e.dblf")]) == 1

    def test_e2e_from_pretrained_pair(self, config_file, pair_checkpoint, tmp_path):
        out = tmp_path / "e2e.dblf"
        args = ["train-e2e", "--config", str(config_file), "--iterations", "2", "--out", str(out)]
        assert main(args + ["--analysis", str(pair_checkpoint), "--synthesis", str(pair_checkpoint)]) == 0
        ckpt = Checkpoint.load(out)
        assert ckpt.has("analysis.") and ckpt.has("synthesis.")

    def test_nan_checkpoint_fails_at_runtime(self, tiny_config, config_file, tmp_path, rng):
        synthesis = build_synthesis(tiny_config.synthesis, rng)
        synthesis.params["head.weight"].data[...] = np.nan
        bad = tmp_path / "bad.dblf"
        Checkpoint.from_networks(tiny_config.to_text(), synthesis).save(bad)
        args = ["pretrain-synthesis", "--config", str(config_file), "--iterations", "2"]
        assert main(args + ["--resume", str(bad), "--out", str(tmp_path / "s.dblf")]) == 2


class TestDeblurAndEvaluate:
    def test_deblur(self, pair_checkpoint, tmp_path, rng):
        image = rng.uniform(size=(3, 15, 18)).astype(np.float32)
        write_image(tmp_path / "in.png", image)
        args = ["deblur", "--analysis", str(pair_checkpoint), "--synthesis", str(pair_checkpoint)]
        args += ["--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "out.png"), "--kernel-out", str(tmp_path / "k.bkrn")]
        assert main(args) == 0
        assert read_image(tmp_path / "out.png").shape == (3, 15, 18)
        assert read_kernel(tmp_path / "k.bkrn").m == 5

    def test_delta_pair_keeps_sharp_image(self, tiny_config, tmp_path, rng):
        analysis = build_analysis(tiny_config.analysis, rng)
        last = len(tiny_config.analysis.head_channels) - 1
        analysis.params[f"head.conv{last}.weight"].data[...] = 0
        analysis.params[f"head.conv{last}.bias"].data[...] = -1
        pair = tmp_path / "delta.dblf"
        Checkpoint.from_networks(tiny_config.to_text(), analysis, build_synthesis(tiny_config.synthesis, rng)).save(pair)
        write_image(tmp_path / "sharp.png", rng.uniform(size=(3, 16, 20)))
        args = ["deblur", "--analysis", str(pair), "--synthesis", str(pair), "--in", str(tmp_path / "sharp.png")]
        args += ["--out", str(tmp_path / "out.png"), "--kernel-out", str(tmp_path / "k.bkrn")]
        assert main(args) == 0
        assert read_kernel(tmp_path / "k.bkrn").is_delta()
        assert psnr(read_image(tmp_path / "out.png"), read_image(tmp_path / "sharp.png")) >= 40.0

    def test_deblur_needs_networks(self, tmp_path):
        assert main(["deblur", "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "out.png")]) == 1

    def test_classifier_without_pairs(self, pair_checkpoint, tmp_path):
        args = ["deblur", "--classifier", str(pair_checkpoint), "--in", "x.png", "--out", str(tmp_path / "o.png")]
        assert main(args) == 1

    def test_evaluate(self, config_file, pair_checkpoint, tmp_path):
        data = tmp_path / "data"
        assert main(["gen-dataset", "--config", str(config_file), "--count", "2", "--out", str(data)]) == 0
        report = tmp_path / "report.csv"
        args = ["evaluate", "--analysis", str(pair_checkpoint), "--synthesis", str(pair_checkpoint)]
        assert main(args + ["--data", str(data), "--report", str(report)]) == 0
        lines = report.read_text().splitlines()
        assert lines[0] == "path,psnr_db,mssim"
        assert len(lines) == 4

    def test_evaluate_missing_dataset(self, pair_checkpoint, tmp_path):
        args = ["evaluate", "--analysis", str(pair_checkpoint), "--synthesis", str(pair_checkpoint)]
        assert main(args + ["--data", str(tmp_path / "none"), "--report", str(tmp_path / "r.csv")]) == 1


class TestAblateAndGradcheck:
    def test_unknown_mode(self, config_file, tmp_path):
        args = ["ablate", "--config", str(config_file), "--modes", "none,sideways", "--out", str(tmp_path / "a.csv")]
        assert main(args) == 1

    def test_ablate(self, config_file, tmp_path):
        out = tmp_path / "a.csv"
        args = ["ablate", "--config", str(config_file), "--modes", "none,additive", "--iterations", "2", "--out", str(out)]
        assert main(args) == 0
        assert out.read_text().splitlines()[0] == "mode,psnr_db"

    def test_ablate_strategies(self, config_file, tmp_path):
        out = tmp_path / "s.csv"
        args = ["ablate", "--config", str(config_file), "--axis", "strategy", "--strategies", "random,pretrain_only"]
        assert main(args + ["--iterations", "2", "--workdir", str(tmp_path / "work"), "--out", str(out)]) == 0
        assert [line.split(",")[0] for line in out.read_text().splitlines()] == ["strategy", "random", "pretrain_only"]
        assert (tmp_path / "work" / "pretrain_only" / "pair.dblf").exists()

    def test_unknown_strategy(self, config_file, tmp_path):
        args = ["ablate", "--config", str(config_file), "--axis", "strategy", "--strategies", "random,twice"]
        assert main(args + ["--out", str(tmp_path / "s.csv")]) == 1

    def test_strategies_need_strategy_axis(self, config_file, tmp_path):
        args = ["ablate", "--config", str(config_file), "--strategies", "random", "--out", str(tmp_path / "s.csv")]
        assert main(args) == 1

    def test_gradcheck_tensor(self):
        assert main(["gradcheck", "--module", "tensor"]) == 0
