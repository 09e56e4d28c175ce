"""
guided-deblur のコマンドライン

サブコマンド:
- gen-kernels / gen-dataset     カーネル・ペア画像データセットの生成
- pretrain-analysis / pretrain-synthesis / train-e2e / train-classifier   段階的学習
- deblur / evaluate             推論と評価
- ablate                        誘導モードのアブレーション
- gradcheck                     勾配チェック

終了コード: 0 成功、1 入力の検証エラー、2 実行時の失敗。
ログは標準エラー、成果物はファイルにのみ書く。
"""

import argparse
import logging
import sys
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from .analysis_net import build_analysis
from .blur_sim import kernel_for, write_kernel
from .checkpoint import Checkpoint
from .config import RunConfig, load_config
from .data_pipeline import SampleSource, load_dataset, read_image, write_dataset, write_image
from .errors import ConfigError, DecodeError, DeblurError, ShapeError, UsageError
from .gradcheck import SUITES, run_suites
from .inference import ScaleRouter, deblur_array, load_networks
from .kernel_cache import KernelBank
from .log import setup_logging
from .metrics import TRAINING_STRATEGIES, ablation_run, evaluate_set, strategy_run
from .synthesis_net import GUIDANCE_MODES, build_synthesis
from .training import build_classifier, classifier_config, init_from_checkpoint, run_stage

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2

VALIDATION_ERRORS = (ConfigError, ShapeError, UsageError, DecodeError, ValidationError, FileNotFoundError)


class ArgumentParser(argparse.ArgumentParser):
    """引数エラーを UsageError にして終了コード 1 で扱う"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


class Command(ABC):
    """サブコマンドの共通基底クラス（検証フェーズと実行フェーズを分ける）"""

    name: str = ""
    help: str = ""

    @abstractmethod
    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        """引数を登録する"""

    @abstractmethod
    def prepare(self, args: argparse.Namespace) -> Any:
        """入力を検証し、実行に必要なものを揃える（ここでの失敗は終了コード 1）"""

    @abstractmethod
    def execute(self, prepared: Any) -> int:
        """本体（ここでの失敗は終了コード 2）"""

    def _handle_error(self, error: Exception) -> str:
        error_message = f"Error in {self.name}: {error}"
        logger.error(error_message)
        return error_message

    def __call__(self, args: argparse.Namespace) -> int:
        try:
            prepared = self.prepare(args)
        except VALIDATION_ERRORS as e:
            self._handle_error(e)
            return EXIT_INVALID
        except Exception as e:
            self._handle_error(e)
            return EXIT_FAILED
        try:
            return self.execute(prepared)
        except Exception as e:
            self._handle_error(e)
            if isinstance(e, DeblurError) and getattr(e, "diagnostics", None):
                logger.error(f"diagnostics: {e.diagnostics}")
            return EXIT_FAILED


def _positive(name: str, value: int) -> int:
    if value < 1:
        raise UsageError(f"--{name} must be ≥ 1, got {value}")
    return value


def _split_names(value: str) -> list[str]:
    return [name.strip() for name in value.split(",") if name.strip()]


def _config_with_overrides(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    train: dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        train["iterations"] = args.iterations
    if train:
        config = config.updated(train=train)
    if getattr(args, "size_class", None) is not None:
        config = config.for_size_class(args.size_class)
    return config.apply()


class GenKernelsCommand(Command):
    name = "gen-kernels"
    help = "BKRN カーネルを N 個生成する"

    def add_arguments(self, parser):
        parser.add_argument("--config", default="toy", help="プリセット名または設定ファイル")
        parser.add_argument("--count", type=int, required=True)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--out", required=True, help="出力ディレクトリ")

    def prepare(self, args):
        _positive("count", args.count)
        return load_config(args.config), args.count, args.seed, Path(args.out)

    def execute(self, prepared):
        config, count, seed, out = prepared
        out.mkdir(parents=True, exist_ok=True)
        bank = KernelBank(config.data.kernel_cache) if config.data.kernel_cache else None
        try:
            for index in range(count):
                if bank is not None:
                    kernel = bank.get_or_create(config.trajectory, seed, index)
                else:
                    kernel = kernel_for(config.trajectory, seed, index)
                write_kernel(out / f"{index:05d}.bkrn", kernel)
        finally:
            if bank is not None:
                bank.close()
        logger.info(f"Wrote {count} kernels (m={config.trajectory.m}) to {out}")
        return EXIT_OK


class GenDatasetCommand(Command):
    name = "gen-dataset"
    help = "鮮明・ボケ画像のペアとカーネル、マニフェストを生成する"

    def add_arguments(self, parser):
        parser.add_argument("--images", default=None, help="鮮明画像（PNG）のディレクトリ。省略時は手続き生成")
        parser.add_argument("--config", default="toy")
        parser.add_argument("--count", type=int, required=True)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--out", required=True)

    def prepare(self, args):
        _positive("count", args.count)
        config = load_config(args.config)
        source = SampleSource.from_config(config, seed=args.seed, image_dir=args.images)
        return source, args.count, Path(args.out)

    def execute(self, prepared):
        source, count, out = prepared
        try:
            write_dataset(out, source, count)
        finally:
            source.close()
        return EXIT_OK


class TrainCommand(Command):
    """4 つの学習サブコマンドの共通部分"""

    stage: str = ""

    def add_arguments(self, parser):
        parser.add_argument("--config", default="toy")
        parser.add_argument("--data", default=None, help="鮮明画像のディレクトリ（省略時は手続き生成）")
        parser.add_argument("--resume", default=None, help="学習を続けるチェックポイント")
        parser.add_argument("--out", required=True, help="出力チェックポイント（.dblf）")
        parser.add_argument("--log", default=None, help="損失ログ（省略時は --out の拡張子を .log に）")
        parser.add_argument("--iterations", type=int, default=None)
        parser.add_argument("--seed", type=int, default=None)
        parser.add_argument("--size-class", type=int, default=None, choices=(0, 1, 2), dest="size_class")

    def build_networks(self, config: RunConfig, args) -> dict[str, Any]:
        rng = np.random.default_rng(config.train.seed)
        if self.stage == "pretrain_analysis":
            return {"analysis": build_analysis(config.analysis, rng)}
        if self.stage == "pretrain_synthesis":
            return {"synthesis": build_synthesis(config.synthesis, rng)}
        if self.stage == "classifier":
            if config.train.size_class is not None:
                raise ConfigError("train-classifier learns all size classes; drop --size-class")
            return {"classifier": build_classifier(classifier_config(config.analysis, config.trajectory.m), rng)}
        return {"analysis": build_analysis(config.analysis, rng), "synthesis": build_synthesis(config.synthesis, rng)}

    def load_initial(self, config: RunConfig, args, nets: dict[str, Any]) -> None:
        if args.resume:
            ckpt = Checkpoint.load(args.resume)
            for net in nets.values():
                ckpt.apply_to(net)
            logger.info(f"Resuming {self.stage} from {args.resume}")

    def prepare(self, args):
        config = _config_with_overrides(args).for_stage(self.stage)
        nets = self.build_networks(config, args)
        self.load_initial(config, args, nets)
        source = SampleSource.from_config(config, image_dir=args.data)
        out = Path(args.out)
        log = Path(args.log) if args.log else out.with_suffix(".log")
        return config, nets, source, out, log

    def execute(self, prepared):
        config, nets, source, out, log = prepared
        try:
            run_stage(config.train, source, config_text=config.to_text(), out_path=out, log_path=log, **nets)
        finally:
            source.close()
        return EXIT_OK


class PretrainAnalysisCommand(TrainCommand):
    name = "pretrain-analysis"
    help = "解析ネットワークを真のカーネルとの L1 で事前学習する"
    stage = "pretrain_analysis"


class PretrainSynthesisCommand(TrainCommand):
    name = "pretrain-synthesis"
    help = "合成ネットワークを真のカーネルで誘導して事前学習する"
    stage = "pretrain_synthesis"


class TrainE2ECommand(TrainCommand):
    name = "train-e2e"
    help = "両ネットワークを画像損失だけで同時に学習する"
    stage = "e2e"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--analysis", default=None, help="事前学習済み解析ネットワーク")
        parser.add_argument("--synthesis", default=None, help="事前学習済み合成ネットワーク")

    def load_initial(self, config, args, nets):
        if args.resume:
            super().load_initial(config, args, nets)
            return
        required = config.train.require_pretrained
        init_from_checkpoint(nets["analysis"], args.analysis, required, self.stage)
        init_from_checkpoint(nets["synthesis"], args.synthesis, required, self.stage)


class TrainClassifierCommand(TrainCommand):
    name = "train-classifier"
    help = "カーネルサイズの 3 クラス分類器を学習する"
    stage = "classifier"


def _add_pair_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--analysis", default=None, help="解析ネットワークのチェックポイント")
    parser.add_argument("--synthesis", default=None, help="合成ネットワークのチェックポイント")
    parser.add_argument("--classifier", default=None, help="サイズ分類器のチェックポイント")
    parser.add_argument("--pairs", default=None, help="class{0,1,2}.dblf を置いたディレクトリ")
    parser.add_argument("--config", default=None, help="チェックポイント内の設定の代わりに使う設定")


def _load_pipeline(args) -> tuple[Any, Any, Optional[ScaleRouter], str]:
    if args.classifier or args.pairs:
        if not (args.classifier and args.pairs):
            raise UsageError("--classifier and --pairs must be given together")
        router = ScaleRouter.from_directory(args.classifier, args.pairs)
        return None, None, router, ""
    if not (args.analysis and args.synthesis):
        raise UsageError("--analysis and --synthesis are required (or --classifier with --pairs)")
    config = load_config(args.config) if args.config else None
    analysis, synthesis, config = load_networks(args.analysis, args.synthesis, config)
    config.apply()
    return analysis, synthesis, None, config.fingerprint()


class DeblurCommand(Command):
    name = "deblur"
    help = "1 枚の画像を復元する"

    def add_arguments(self, parser):
        _add_pair_arguments(parser)
        parser.add_argument("--in", required=True, dest="input")
        parser.add_argument("--out", required=True)
        parser.add_argument("--kernel-out", default=None, dest="kernel_out", help="推定カーネルを BKRN で書き出す")

    def prepare(self, args):
        analysis, synthesis, router, _ = _load_pipeline(args)
        image = read_image(args.input)
        return analysis, synthesis, router, image, Path(args.out), args.kernel_out

    def execute(self, prepared):
        analysis, synthesis, router, image, out, kernel_out = prepared
        if router is not None:
            restored, kernel, _ = router.deblur(image)
        else:
            restored, kernel = deblur_array(analysis, synthesis, image)
        write_image(out, restored)
        if kernel_out:
            write_kernel(kernel_out, kernel)
        logger.info(f"Wrote {out}")
        return EXIT_OK


class EvaluateCommand(Command):
    name = "evaluate"
    help = "データセット全体で PSNR・MSSIM を集計する"

    def add_arguments(self, parser):
        _add_pair_arguments(parser)
        parser.add_argument("--data", required=True, help="gen-dataset の出力ディレクトリ")
        parser.add_argument("--report", required=True, help="CSV レポートの出力先")
        parser.add_argument("--images-out", default=None, dest="images_out")

    def prepare(self, args):
        analysis, synthesis, router, fingerprint = _load_pipeline(args)
        load_dataset(args.data)
        return analysis, synthesis, router, fingerprint, args

    def execute(self, prepared):
        analysis, synthesis, router, fingerprint, args = prepared
        evaluate_set(analysis, synthesis, args.data, args.report, args.images_out, router, fingerprint)
        return EXIT_OK


class AblateCommand(Command):
    name = "ablate"
    help = "誘導モードまたは学習方針ごとの平均 PSNR の表を作る"

    def add_arguments(self, parser):
        parser.add_argument("--config", default="toy")
        parser.add_argument("--out", required=True, help="CSV の出力先")
        parser.add_argument("--axis", choices=("guidance", "strategy"), default="guidance")
        parser.add_argument("--modes", default=None, help=f"カンマ区切り（既定: {','.join(GUIDANCE_MODES)}）")
        parser.add_argument(
            "--strategies", default=None, help=f"カンマ区切り（既定: {','.join(TRAINING_STRATEGIES)}）"
        )
        parser.add_argument("--workdir", default=None, help="学習方針ごとのチェックポイントを残すディレクトリ")
        parser.add_argument("--iterations", type=int, default=None, help="各学習段階の反復数")
        parser.add_argument("--seed", type=int, default=None)

    def prepare(self, args):
        config = _config_with_overrides(args)
        if args.axis == "strategy":
            if args.modes:
                raise UsageError("--modes applies to --axis guidance only")
            names = _split_names(args.strategies) if args.strategies else list(TRAINING_STRATEGIES)
            expected = TRAINING_STRATEGIES
        else:
            if args.strategies or args.workdir:
                raise UsageError("--strategies and --workdir apply to --axis strategy only")
            names = _split_names(args.modes) if args.modes else list(config.eval.ablation_modes)
            expected = GUIDANCE_MODES
        unknown = [name for name in names if name not in expected]
        if unknown:
            raise UsageError(f"unknown {args.axis} names {unknown}; expected {expected}")
        return args.axis, names, config, args.out, args.workdir

    def execute(self, prepared):
        axis, names, config, out, workdir = prepared
        if axis == "strategy":
            strategy_run(names, config, out, workdir)
        else:
            ablation_run(names, config, out)
        return EXIT_OK


class GradcheckCommand(Command):
    name = "gradcheck"
    help = "解析的勾配を中心差分と照合する"

    def add_arguments(self, parser):
        parser.add_argument("--module", default=None, choices=sorted(SUITES))
        parser.add_argument("--seed", type=int, default=0)

    def prepare(self, args):
        return ([args.module] if args.module else None), args.seed

    def execute(self, prepared):
        names, seed = prepared
        return EXIT_OK if run_suites(names, seed) else EXIT_FAILED


COMMANDS: list[Command] = [
    GenKernelsCommand(),
    GenDatasetCommand(),
    PretrainAnalysisCommand(),
    PretrainSynthesisCommand(),
    TrainE2ECommand(),
    TrainClassifierCommand(),
    DeblurCommand(),
    EvaluateCommand(),
    AblateCommand(),
    GradcheckCommand(),
]


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="guided-deblur", description="カーネル誘導によるブラインド画像復元")
    parser.add_argument("-v", "--verbose", action="store_true", help="DEBUG ログを出す")
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    for command in COMMANDS:
        command_parser = sub.add_parser(command.name, help=command.help, description=command.help)
        command.add_arguments(command_parser)
        command_parser.set_defaults(handler=command)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """コマンドライン引数を処理して終了コードを返す"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        setup_logging()
        logger.error(f"Error in guided-deblur: {e}")
        return EXIT_INVALID
    setup_logging(args.verbose)
    if not getattr(args, "handler", None):
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
