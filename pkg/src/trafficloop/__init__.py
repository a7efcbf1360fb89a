"""Predictive adaptive signal control: ARX flow forecasts, annealed green splits,
a point-queue intersection simulator, and an in-process message bus that
wires them into a control loop."""

from .core import (
    ApproachSpec,
    ExogenousRecord,
    FlowObservation,
    IntersectionSpec,
    PlanInfeasibleError,
    SignalPlan,
    aggregate_wait,
    approach_wait,
    validate_plan,
)
from .optimizer import (
    AnnealSchedule,
    OptimizationResult,
    SignalAnnealer,
    anneal,
    brute_force_optimum,
    cost,
    perturb,
    project_feasible,
)
from .prediction import ARXForecaster, FitReport, PredictionModel, fit, forecast_horizon, forecast_one

__version__ = "0.1.0"

__all__ = [
    "ARXForecaster",
    "AnnealSchedule",
    "ApproachSpec",
    "ExogenousRecord",
    "FitReport",
    "FlowObservation",
    "IntersectionSpec",
    "OptimizationResult",
    "PlanInfeasibleError",
    "PredictionModel",
    "SignalAnnealer",
    "SignalPlan",
    "aggregate_wait",
    "anneal",
    "approach_wait",
    "brute_force_optimum",
    "cost",
    "fit",
    "forecast_horizon",
    "forecast_one",
    "perturb",
    "project_feasible",
    "validate_plan",
]
