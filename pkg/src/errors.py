"""
异常定义
库函数只抛出这里的异常，命令行入口负责捕获并转换为退出码
"""


class MuselError(Exception):
    """所有 musel 异常的基类"""


class DataError(MuselError, ValueError):
    """数据集无效：文件缺失、形状不一致、含非有限值等"""


class DegenerateColumnError(DataError):
    """设计矩阵某一列范数为零"""

    def __init__(self, k: int, j: int):
        self.k = k
        self.j = j
        super().__init__(f"数据集 {k} 的第 {j} 列范数为零，无法计算单变量统计量")


class ShapeError(DataError):
    """矩阵形状不匹配"""


class ModelSpaceError(MuselError, ValueError):
    """指示变量不在模型空间内（|γ| > L 或同一协变量被多个子集激活）"""


class PriorError(MuselError, ValueError):
    """先验参数无效"""


class ConfigError(MuselError, ValueError):
    """配置无效（模拟参数不可行、配置文件损坏、ω 长度不对等）"""


class PriorOrderingWarning(UserWarning):
    """ω 不满足 ω_K/K < … < ω_2/2 < ω_1 时发出的警告"""


class UsageError(MuselError):
    """命令行参数用法错误（退出码 2）"""
