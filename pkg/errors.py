"""
异常定义模块
系统内所有可预期错误的统一层次结构
"""
from typing import Optional


class DmadError(Exception):
    """系统错误基类"""


class DimensionError(DmadError, ValueError):
    """张量形状不匹配"""


class ConfigError(DmadError, ValueError):
    """配置参数非法"""


class DataError(DmadError, ValueError):
    """数据内容非法（标签越界、空数据集等）"""


class EvaluationError(DmadError):
    """数值计算失败（出现 NaN/Inf 等）"""


class ScheduleError(DmadError, ValueError):
    """学习率调度步数越界"""


class ProtocolError(DmadError):
    """评测协议被破坏（单类别样本、训练读取评测集等）"""


class ContractError(DmadError):
    """调用约定被违反（教师模型未冻结等）"""


class DependencyError(DmadError):
    """缺少前置产物（如教师模型检查点）"""


class TrainingAnomaly(DmadError):
    """训练过程异常（损失非有限值、首轮即早停）"""


class _OffsetError(DmadError):
    """带字节偏移量的解析错误"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (字节偏移 {offset})"
        super().__init__(message)


class PgmParseError(_OffsetError):
    """PGM 图像解析失败"""


class CheckpointError(_OffsetError):
    """DMAD-CKPT 检查点解析失败"""
