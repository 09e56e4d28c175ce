"""
guided_deblur の例外階層

検証エラーは ValueError、実行時エラーは RuntimeError の派生として定義し、
呼び出し側が組み込みの例外ファミリーでも捕捉できるようにする。
"""

from typing import Any, Optional, Sequence


class DeblurError(Exception):
    """guided_deblur が送出する全例外の基底クラス"""


class ConfigError(DeblurError, ValueError):
    """設定値が不正（奇数でないカーネル、未知のキー、前提チェックポイントの欠如など）"""


class UsageError(DeblurError, ValueError):
    """API の誤用（スカラーでない loss の backward、範囲外のペア番号など）"""


class ShapeError(DeblurError, ValueError):
    """Structured shape error: which op, what it expected, what it got."""

    def __init__(
        self,
        op: str,
        expected: Any,
        actual: Any,
        detail: Optional[str] = None,
    ):
        self.op = op
        self.expected = expected
        self.actual = actual
        self.detail = detail
        message = f"{op}: expected {expected}, got {actual}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DecodeError(DeblurError, ValueError):
    """画像・カーネル・チェックポイントのデコード失敗"""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class TrainingError(DeblurError, RuntimeError):
    """学習中の異常（NaN 勾配など）。diagnostics に状況を保持する"""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


def shape_str(shape: Sequence[int]) -> str:
    return "×".join(str(int(s)) for s in shape)
