"""
パイプライン共通エラー定義
エラーコードとCLI終了コードの対応を一元管理する
"""

from enum import Enum
from typing import Sequence


class ErrorCode(Enum):
    """エラーコード（値はCLIの終了コード）"""
    USAGE = 2
    VALIDATION = 3
    NUMERIC = 4

    @property
    def prefix(self) -> str:
        return f"E_{self.name}"


class PipelineError(Exception):
    """全パイプラインエラーの基底クラス"""
    code = ErrorCode.VALIDATION

    def cli_line(self) -> str:
        """grep可能な1行形式"""
        message = " ".join(str(self).split())
        return f"{self.code.prefix}: {message}"


class ValidationError(PipelineError, ValueError):
    """入力・不変条件の検証エラー"""
    code = ErrorCode.VALIDATION


class DimensionError(ValidationError):
    """行列の形状不一致"""

    def __init__(self, operation: str, *shapes: Sequence[int]):
        self.operation = operation
        self.shapes = tuple(tuple(s) for s in shapes)
        shape_text = " vs ".join("x".join(str(d) for d in s) for s in self.shapes)
        super().__init__(f"{operation}: 形状が一致しません ({shape_text})")


class StateError(PipelineError, RuntimeError):
    """テープの状態エラー（forward前のbackward等）"""
    code = ErrorCode.VALIDATION


class NumericError(PipelineError, ArithmeticError):
    """非有限値（NaN/Inf）の検出"""
    code = ErrorCode.NUMERIC


class UsageError(PipelineError):
    """CLI引数の誤り"""
    code = ErrorCode.USAGE


def file_error(path, error: OSError) -> ValidationError:
    """OSError をファイルパス付きの検証エラーに変換"""
    reason = error.strerror or error.__class__.__name__
    return ValidationError(f"{path}: ファイルを読み書きできません ({reason})")
