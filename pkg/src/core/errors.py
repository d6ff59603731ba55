from __future__ import annotations

from typing import Any, Dict, List


class FusionError(Exception):
    """项目内所有可预期错误的基类。"""


class ShapeError(FusionError, ValueError):
    """张量维度不匹配。"""


class ConfigError(FusionError):
    """配置键不存在或取值非法。"""


class DataError(FusionError):
    """输入数据缺失、损坏或不满足前置条件。"""


class SkeletonParseError(DataError):
    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"骨架文件解析失败 {path}:{line_number}：{reason}")


class NumericalError(FusionError):
    """训练中出现NaN/inf。diagnostics 记录最后一个batch的样本与梯度范数。"""

    def __init__(self, message: str, diagnostics: Dict[str, Any] | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class CheckpointError(FusionError):
    def __init__(
        self,
        message: str,
        missing: List[str] | None = None,
        unexpected: List[str] | None = None,
        mismatched: List[str] | None = None,
    ):
        self.missing = missing or []
        self.unexpected = unexpected or []
        self.mismatched = mismatched or []
        diff = []
        if self.missing:
            diff.append(f"missing={self.missing[:10]}")
        if self.unexpected:
            diff.append(f"unexpected={self.unexpected[:10]}")
        if self.mismatched:
            diff.append(f"shape_mismatch={self.mismatched[:10]}")
        super().__init__(message + (f"（{'; '.join(diff)}）" if diff else ""))
