"""Forecast-then-optimise control rounds.

Both the direct experiment driver and the bus services go through these
functions, so the two paths make the same decisions for the same inputs.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .core import IntersectionSpec, SignalPlan
from .optimizer import AnnealSchedule, OptimizationResult, anneal
from .prediction import PredictionModel, forecast_horizon


def recent_lags(history: Sequence[float], p: int) -> list[float]:
    """Last ``p`` observations, most recent first; short histories repeat the oldest value."""
    if not history:
        raise ValueError("no observations yet")
    lags = list(reversed(history[-p:]))
    return lags + [lags[-1]] * (p - len(lags))


def forecast_approach(model: PredictionModel, history: Sequence[float], config, t_next: int) -> list[float]:
    """Forecasts for intervals ``t_next .. t_next + steps - 1``."""
    steps = config.loop.forecast_steps
    exog = [config.exog_at_interval(t_next + k) for k in range(steps)]
    return forecast_horizon(model, recent_lags(history, model.p), exog, steps)


def round_seed(seed: int, t_next: int) -> int:
    return int(np.random.SeedSequence([seed, t_next]).generate_state(1, dtype=np.uint64)[0])


def optimize_round(forecasts: Sequence[Sequence[float]], spec: IntersectionSpec, schedule: AnnealSchedule,
                   t_next: int, interval_s: float) -> OptimizationResult:
    """Anneal from the even split against the horizon-mean forecast of each approach."""
    flows = [float(np.mean(f)) for f in forecasts]
    sched = replace(schedule, seed=round_seed(schedule.seed, t_next))
    return anneal(spec.uniform_plan(), flows, spec, sched, interval_s, keep_trace=False)


class PredictiveController:
    """Adaptive policy callback: observed counts in, next plan out."""

    def __init__(self, config):
        self.config = config
        self.decisions: list[tuple[int, list[list[float]], OptimizationResult]] = []

    def __call__(self, t_s: float, interval_history: list[list[int]]) -> SignalPlan:
        cfg = self.config
        t_next = len(interval_history)
        forecasts = []
        for i, model in enumerate(cfg.models):
            series = [float(row[i]) for row in interval_history]
            forecasts.append(forecast_approach(model, series, cfg, t_next))
        result = optimize_round(forecasts, cfg.intersection, cfg.anneal, t_next, cfg.interval_s)
        self.decisions.append((t_next, forecasts, result))
        return result.best_plan
