#!/usr/bin/env python3
"""
guided-deblur デモ実行スクリプト

トイ構成で両ネットワークを短く学習し、1 枚のボケ画像を復元して結果を表示する
"""

import argparse
import sys
import tempfile
from pathlib import Path

import numpy as np
from colorama import Fore, Style

from guided_deblur.analysis_net import build_analysis, kernel_l1
from guided_deblur.config import toy_config
from guided_deblur.data_pipeline import SampleSource, write_image
from guided_deblur.inference import deblur_array
from guided_deblur.layers import describe
from guided_deblur.log import setup_logging
from guided_deblur.metrics import mssim, psnr
from guided_deblur.synthesis_net import build_synthesis
from guided_deblur.training import run_stage


def demo_networks(config):
    """ネットワーク構成の表示"""
    print("🔧 ネットワーク構成")
    print("=" * 50)
    rng = np.random.default_rng(config.train.seed)
    analysis = build_analysis(config.analysis, rng)
    synthesis = build_synthesis(config.synthesis, rng)
    for net in (analysis, synthesis):
        print(f"{net.prefix.rstrip('.')}: {net.parameter_count()} parameters")
        print(describe(net, limit=6))
        print("...")
    return analysis, synthesis


def demo_training(config, analysis, synthesis, iterations: int):
    """段階的学習（解析 → 合成 → E2E）"""
    print(f"\n🏋️ 学習（各段階 {iterations} イテレーション）")
    print("=" * 50)
    for stage, nets in (
        ("pretrain_analysis", {"analysis": analysis}),
        ("pretrain_synthesis", {"synthesis": synthesis}),
        ("e2e", {"analysis": analysis, "synthesis": synthesis}),
    ):
        cfg = config.updated(train={"stage": stage, "iterations": iterations})
        source = SampleSource.from_config(cfg)
        try:
            run_stage(cfg.train, source, config_text=cfg.to_text(), **nets)
        finally:
            source.close()
        print(f"✅ {stage} 完了")


def demo_deblur(config, analysis, synthesis, out_dir: Path):
    """保持サンプル 1 枚の復元"""
    print("\n🖼️ 復元")
    print("=" * 50)
    source = SampleSource(config.data, config.trajectory, config.eval.seed)
    sample = source.sample(0, "test")
    restored, kernel = deblur_array(analysis, synthesis, sample.blurred)

    before = psnr(np.clip(sample.blurred, 0, 1), sample.sharp)
    after = psnr(restored, sample.sharp)
    color = Fore.GREEN if after > before else Fore.YELLOW
    print(f"ボケ画像:   PSNR {before:.2f} dB / MSSIM {mssim(sample.blurred, sample.sharp):.4f}")
    print(f"{color}復元画像:   PSNR {after:.2f} dB / MSSIM {mssim(restored, sample.sharp):.4f}{Style.RESET_ALL}")
    print(f"カーネル:   推定と真の L1 距離 {kernel_l1(kernel.grid, sample.kernel.grid):.4f}")

    out_dir.mkdir(parents=True, exist_ok=True)
    for name, image in (("sharp", sample.sharp), ("blurred", sample.blurred), ("restored", restored)):
        write_image(out_dir / f"{name}.png", image)
    write_image(out_dir / "kernel.png", np.repeat(kernel.grid[None] / kernel.grid.max(), 3, axis=0))
    print(f"📁 画像を {out_dir} に書き出しました")


def main() -> int:
    """メイン実行関数"""
    parser = argparse.ArgumentParser(description="guided-deblur のトイ構成デモ")
    parser.add_argument("--iterations", type=int, default=200, help="各段階のイテレーション数")
    parser.add_argument("--out", default=None, help="画像の出力先（省略時は一時ディレクトリ）")
    args = parser.parse_args()

    setup_logging()
    print("🎞️ guided-deblur デモンストレーション")
    print("=" * 50)
    config = toy_config().apply()
    out_dir = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="guided_deblur_demo."))

    try:
        analysis, synthesis = demo_networks(config)
        demo_training(config, analysis, synthesis, args.iterations)
        demo_deblur(config, analysis, synthesis, out_dir)
    except KeyboardInterrupt:
        print("\n\n👋 デモを終了します")
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
