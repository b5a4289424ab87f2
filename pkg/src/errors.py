"""
异常定义模块
工具集内所有模块抛出的异常都继承自 CvqkdError，命令行层据此映射退出码
"""
from typing import Optional


class CvqkdError(Exception):
    """工具集异常基类"""


class DomainError(CvqkdError, ValueError):
    """参数超出定义域（例如 V<1、透过率不在[0,1]、未知的正交分量标签）"""


class UnphysicalStateError(DomainError):
    """非物理状态：协方差矩阵不半正定，或 G≤1 时出现负的过量噪声"""


class ConfigError(DomainError):
    """配置文件或命令行参数组合无效"""


class SecurityAbort(CvqkdError):
    """协议中止

    Attributes:
        reason: 机器可读的中止原因，取值见 ABORT_REASONS
        details: 附加信息（估计值、阈值等），会写入会话报告
    """

    ABORT_REASONS = (
        'insecure_channel',
        'reconciliation_failed',
        'no_key',
        'estimate_unreliable',
    )

    def __init__(self, reason: str, message: str = "", details: Optional[dict] = None):
        if reason not in self.ABORT_REASONS:
            raise ValueError(f"未知的中止原因: {reason}")
        super().__init__(message or reason)
        self.reason = reason
        self.details = details or {}


class VerificationError(CvqkdError):
    """统计验证失败（|z| 超过门限）"""

    def __init__(self, message: str, flagged_rows: int = 0):
        super().__init__(message)
        self.flagged_rows = flagged_rows
