"""Rule-based bolus calculator."""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["CalculatorParams", "calculator_dose"]


@dataclass(frozen=True)
class CalculatorParams:
    """Insulin-to-carb ratio ``icr`` (g/U), correction factor ``cf`` (mg/dl/U), target ``target`` (mg/dl)."""

    icr: float
    cf: float
    target: float = 112.5

    def __post_init__(self):
        if not self.icr > 0 or not self.cf > 0:
            raise ValueError("ICR and CF must be positive")

    def to_dict(self) -> dict:
        return {"icr": self.icr, "cf": self.cf, "target": self.target}


def calculator_dose(params: CalculatorParams, cho: float, fasting: float) -> float:
    """``max(0, cho / icr + (fasting - target) / cf)``."""
    if cho < 0:
        raise ValueError("carbohydrate intake must be nonnegative")
    return max(0.0, cho / params.icr + (fasting - params.target) / params.cf)
