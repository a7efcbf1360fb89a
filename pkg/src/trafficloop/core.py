"""Intersection domain types, plan feasibility and the analytic delay model.

All durations are seconds. Flows are vehicles per counting interval; the
interval length (default 300 s) is a scenario constant and is passed
explicitly wherever a flow has to be turned into a rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_INTERVAL_S = 300.0
BUDGET_TOL = 1e-9
# Degree of saturation is clamped here inside the uniform-delay term.
X_CLAMP = 0.98


class PlanInfeasibleError(ValueError):
    """A signal plan violates the bounds or the cycle budget of its intersection."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ApproachSpec:
    """One inbound arm of the intersection.

    ``saturation_flow`` is the discharge rate of the whole approach in veh/s
    while it shows green. ``lanes`` is descriptive only.
    """

    id: str
    saturation_flow: float
    lanes: int = 1

    def __post_init__(self):
        if not self.id:
            raise ValueError("approach id must be non-empty")
        if not self.saturation_flow > 0:
            raise ValueError(f"approach {self.id}: saturation_flow must be > 0")
        if self.lanes < 1:
            raise ValueError(f"approach {self.id}: lanes must be >= 1")


@dataclass(frozen=True)
class IntersectionSpec:
    id: str
    approaches: tuple[ApproachSpec, ...]
    cycle_length_s: float
    lost_time_s: float
    green_min_s: tuple[float, ...]
    green_max_s: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "approaches", tuple(self.approaches))
        object.__setattr__(self, "green_min_s", tuple(float(v) for v in self.green_min_s))
        object.__setattr__(self, "green_max_s", tuple(float(v) for v in self.green_max_s))
        n = len(self.approaches)
        if n < 2:
            raise ValueError("an intersection needs at least 2 approaches")
        ids = [a.id for a in self.approaches]
        if len(set(ids)) != n:
            raise ValueError(f"duplicate approach ids in {ids}")
        if len(self.green_min_s) != n or len(self.green_max_s) != n:
            raise ValueError("green_min_s and green_max_s must have one entry per approach")
        if not (self.cycle_length_s > self.lost_time_s >= 0):
            raise ValueError("need cycle_length_s > lost_time_s >= 0")
        for a, lo, hi in zip(self.approaches, self.green_min_s, self.green_max_s):
            if not (0 < lo <= hi):
                raise ValueError(f"approach {a.id}: need 0 < green_min ({lo}) <= green_max ({hi})")
        budget = self.green_budget_s
        if not (sum(self.green_min_s) <= budget + BUDGET_TOL and budget <= sum(self.green_max_s) + BUDGET_TOL):
            raise ValueError(
                f"empty feasible region: sum(green_min)={sum(self.green_min_s)}, "
                f"budget={budget}, sum(green_max)={sum(self.green_max_s)}"
            )

    @property
    def n_approaches(self) -> int:
        return len(self.approaches)

    @property
    def green_budget_s(self) -> float:
        return self.cycle_length_s - self.lost_time_s

    @property
    def approach_ids(self) -> list[str]:
        return [a.id for a in self.approaches]

    def uniform_plan(self) -> "SignalPlan":
        """Even split of the green budget (then projected if the bounds demand it)."""
        n = self.n_approaches
        greens = [self.green_budget_s / n] * n
        if all(lo <= g <= hi for g, lo, hi in zip(greens, self.green_min_s, self.green_max_s)):
            return SignalPlan(tuple(greens), self.cycle_length_s, self.lost_time_s)
        from .optimizer import project_feasible

        return project_feasible(greens, self)


@dataclass(frozen=True)
class SignalPlan:
    greens_s: tuple[float, ...]
    cycle_length_s: float
    lost_time_s: float

    def __post_init__(self):
        object.__setattr__(self, "greens_s", tuple(float(g) for g in self.greens_s))

    def __len__(self):
        return len(self.greens_s)


@dataclass(frozen=True)
class FlowObservation:
    approach_id: str
    t: int
    flow_veh_per_interval: float

    def __post_init__(self):
        if not self.flow_veh_per_interval >= 0:
            raise ValueError("flow_veh_per_interval must be >= 0")


@dataclass(frozen=True)
class ExogenousRecord:
    t: int
    values: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


def validate_plan(plan: SignalPlan, spec: IntersectionSpec) -> list[str]:
    """Return the list of violated constraints; an empty list means feasible.

    Raises
    ------
    ValueError
        If the plan and the intersection disagree on the number of approaches.
    """
    n = spec.n_approaches
    if len(plan.greens_s) != n:
        raise ValueError(f"plan has {len(plan.greens_s)} greens, intersection has {n} approaches")
    violations = []
    if plan.cycle_length_s != spec.cycle_length_s:
        violations.append(f"cycle length {plan.cycle_length_s} != {spec.cycle_length_s}")
    if plan.lost_time_s != spec.lost_time_s:
        violations.append(f"lost time {plan.lost_time_s} != {spec.lost_time_s}")
    for i, (g, lo, hi) in enumerate(zip(plan.greens_s, spec.green_min_s, spec.green_max_s)):
        if not math.isfinite(g):
            violations.append(f"approach {i}: green {g} is not finite")
        elif g < lo:
            violations.append(f"approach {i}: green {g} below green_min={lo}")
        elif g > hi:
            violations.append(f"approach {i}: green {g} above green_max={hi}")
    total = math.fsum(plan.greens_s)
    budget = spec.green_budget_s
    if abs(total - budget) > BUDGET_TOL:
        violations.append(f"budget: greens sum to {total:g} != {budget:g} (cycle - lost time)")
    return violations


def check_plan(plan: SignalPlan, spec: IntersectionSpec) -> None:
    violations = validate_plan(plan, spec)
    if violations:
        raise PlanInfeasibleError(violations)


def approach_wait(
    flow: float,
    green_s: float,
    cycle_length_s: float,
    saturation_flow: float,
    interval_s: float = DEFAULT_INTERVAL_S,
) -> float:
    """Average wait (s/veh) on one approach under a fixed split.

    Webster's uniform delay with the degree of saturation clamped at 0.98,
    plus a linear overflow surcharge ``0.5 * (X - 1) * interval_s`` once the
    approach is oversaturated.
    """
    if not green_s > 0:
        raise ValueError(f"green must be > 0, got {green_s}")
    if not cycle_length_s > 0:
        raise ValueError(f"cycle length must be > 0, got {cycle_length_s}")
    if not saturation_flow > 0:
        raise ValueError(f"saturation_flow must be > 0, got {saturation_flow}")
    return _wait(flow, green_s, cycle_length_s, saturation_flow, interval_s)


def _wait(flow, green_s, cycle_s, sat, interval_s):
    # hot path of the optimizer; inputs assumed valid
    u = green_s / cycle_s
    x = (flow / interval_s) / (sat * u)
    xc = x if x < X_CLAMP else X_CLAMP
    d = 0.5 * cycle_s * (1.0 - u) ** 2 / (1.0 - xc * u)
    if x > 1.0:
        d += 0.5 * (x - 1.0) * interval_s
    return d


def approach_wait_array(flow, green_s, cycle_length_s, saturation_flow, interval_s=DEFAULT_INTERVAL_S):
    """Vectorised :func:`approach_wait` (broadcasts over numpy arrays)."""
    flow = np.asarray(flow, dtype=float)
    u = np.asarray(green_s, dtype=float) / cycle_length_s
    x = (flow / interval_s) / (np.asarray(saturation_flow, dtype=float) * u)
    xc = np.minimum(x, X_CLAMP)
    d = 0.5 * cycle_length_s * (1.0 - u) ** 2 / (1.0 - xc * u)
    return d + np.where(x > 1.0, 0.5 * (x - 1.0) * interval_s, 0.0)


def _mean_wait(greens: Sequence[float], flows: Sequence[float], spec: IntersectionSpec, interval_s: float) -> float:
    c = spec.cycle_length_s
    total = 0.0
    for g, f, a in zip(greens, flows, spec.approaches):
        total += _wait(f, g, c, a.saturation_flow, interval_s)
    return total / len(greens)


def aggregate_wait(
    plan: SignalPlan,
    flows: Sequence[float],
    spec: IntersectionSpec,
    interval_s: float = DEFAULT_INTERVAL_S,
) -> float:
    """Mean over approaches of :func:`approach_wait` for a feasible plan."""
    check_plan(plan, spec)
    flows = [float(f) for f in flows]
    if len(flows) != spec.n_approaches:
        raise ValueError(f"expected {spec.n_approaches} flows, got {len(flows)}")
    if any(not (f >= 0 and math.isfinite(f)) for f in flows):
        raise ValueError("flows must be finite and nonnegative")
    return _mean_wait(plan.greens_s, flows, spec, interval_s)
