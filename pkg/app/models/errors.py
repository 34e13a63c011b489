"""
例外定義
CLI が機械可読なエラー種別（error_class）を返せるよう、すべて LabError を基底にする。
"""
from typing import Any


class LabError(ValueError):
    """ラボ全体の基底例外。error_class は CLI の stderr JSON にそのまま出る。"""

    error_class = "lab_error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context = context

    def to_dict(self) -> dict[str, Any]:
        return {
            "error_class": self.error_class,
            "message": str(self),
            **{k: v for k, v in self.context.items() if v is not None},
        }


class DimensionMismatchError(LabError):
    error_class = "dimension_mismatch"


class NonFiniteError(LabError):
    error_class = "non_finite"


class DomainError(LabError):
    """特異集合・チャート外・補間範囲外での評価"""

    error_class = "domain"


class ChartError(LabError):
    error_class = "chart"


class NotCenteredError(LabError):
    error_class = "not_centered"


class ResonanceError(LabError):
    error_class = "resonance"


class BandLimitError(LabError):
    error_class = "band_limit"


class ConvergenceError(LabError):
    error_class = "convergence"


class ExperimentError(LabError):
    """実験の前提条件違反（パス数不足、T⁰ を超える horizon など）"""

    error_class = "experiment"
