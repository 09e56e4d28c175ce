"""ログ設定（標準エラー出力、レベル名を colorama で色付け）"""

import logging
import sys

from colorama import Fore, Style, init

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

LEVEL_COLORS = {
    logging.DEBUG: Fore.CYAN,
    logging.INFO: Fore.GREEN,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED + Style.BRIGHT,
}


class ColorFormatter(logging.Formatter):
    """levelname だけを色付けするフォーマッタ"""

    def format(self, record: logging.LogRecord) -> str:
        color = LEVEL_COLORS.get(record.levelno)
        if color is None:
            return super().format(record)
        original = record.levelname
        record.levelname = f"{color}{original}{Style.RESET_ALL}"
        try:
            return super().format(record)
        finally:
            record.levelname = original


def setup_logging(verbose: bool = False) -> None:
    """ルートロガーを一度だけ設定する。成果物はファイルへ、ログは stderr へ"""
    init(autoreset=True)
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_guided_deblur", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ColorFormatter(LOG_FORMAT))
    handler._guided_deblur = True
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
