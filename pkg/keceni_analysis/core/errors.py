"""
异常类型
输入类错误 (退出码 2) 与数值类错误 (退出码 1) 分开，CLI 据此映射退出码
"""
from typing import Optional


class KeceniInputError(ValueError):
    """文件、节点编号、场景或配置不合法"""


class ScenarioError(KeceniInputError):
    pass


class ConfigError(KeceniInputError):
    pass


class KeceniNumericalError(RuntimeError):
    """拟合或估计过程中出现的数值问题"""


class RankDeficiencyError(KeceniNumericalError):
    def __init__(self, columns: list[str]):
        self.columns = columns
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(columns)}")


class ConvergenceError(KeceniNumericalError):
    def __init__(self, message: str, gradient_norm: Optional[float] = None):
        self.gradient_norm = gradient_norm
        super().__init__(message)


class NoComparableUnitsError(KeceniNumericalError):
    def __init__(self, bandwidth: float, min_delta: float):
        self.bandwidth = bandwidth
        self.min_delta = min_delta
        super().__init__(
            f"no comparable units within bandwidth λ={bandwidth:.6g} "
            f"(smallest dissimilarity {min_delta:.6g}); widen λ"
        )


class SingularBreadError(KeceniNumericalError):
    def __init__(self, condition_number: float):
        self.condition_number = condition_number
        super().__init__(f"bread matrix is singular (condition number {condition_number:.3g})")
