"""Distortion budgets and the per-point constraint check."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TradeoffBudget:
    """Closed upper bounds on mean pixel MSE and mean disease KL."""

    epsilon_pixel: float = 0.005
    tau_disease: float = 0.05

    def __post_init__(self):
        if self.epsilon_pixel <= 0 or self.tau_disease <= 0:
            raise ValueError("budgets must be positive")


@dataclass
class TradeoffPoint:
    """One strength setting's full evaluation."""

    strength: float
    amae: float
    per_model_mae: dict
    per_model_r2: dict
    ssim_mean: float
    disease_acc: float
    iou_mean: float
    pixel_mse: float
    disease_kl: float
    constraint_pass: bool = True
    violations: tuple = ()

    def validate(self, budget: TradeoffBudget | None = None) -> None:
        scalars = [self.strength, self.amae, self.ssim_mean, self.disease_acc,
                   self.iou_mean, self.pixel_mse, self.disease_kl]
        scalars += list(self.per_model_mae.values())
        scalars += list(self.per_model_r2.values())
        if not all(np.isfinite(s) for s in scalars):
            raise ValueError(f"non-finite value at strength {self.strength}")
        if budget is not None:
            result = check_constraints(self, budget)
            if result.passed != self.constraint_pass:
                raise ValueError("constraint flag disagrees with the budget")


@dataclass
class ConstraintResult:
    passed: bool
    violations: list = field(default_factory=list)
    margins: dict = field(default_factory=dict)


def check_constraints(point: TradeoffPoint,
                      budget: TradeoffBudget) -> ConstraintResult:
    """Closed inequalities: a point exactly at the budget passes."""
    margins = {"epsilon_pixel": budget.epsilon_pixel - point.pixel_mse,
               "tau_disease": budget.tau_disease - point.disease_kl}
    violations = []
    if point.pixel_mse > budget.epsilon_pixel:
        violations.append(f"epsilon_pixel: mean pixel MSE {point.pixel_mse!r} "
                          f"exceeds {budget.epsilon_pixel!r}")
    if point.disease_kl > budget.tau_disease:
        violations.append(f"tau_disease: mean disease KL {point.disease_kl!r} "
                          f"exceeds {budget.tau_disease!r}")
    return ConstraintResult(passed=not violations, violations=violations,
                            margins=margins)
