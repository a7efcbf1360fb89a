"""Green-split optimisation by simulated annealing.

Plans are moved around the feasible set by pairwise transfers of green time,
which keep the cycle budget intact, so every evaluated plan is feasible.
``brute_force_optimum`` enumerates a grid and is used to check the annealer.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_scalar
from sklearn.utils.validation import check_is_fitted

from .core import (
    DEFAULT_INTERVAL_S,
    IntersectionSpec,
    SignalPlan,
    _mean_wait,
    aggregate_wait,
    approach_wait_array,
    validate_plan,
)

MAX_BRUTE_FORCE_APPROACHES = 4
MAX_BRUTE_FORCE_STEPS = 10_000
PERTURB_RETRIES = 8


@dataclass(frozen=True)
class AnnealSchedule:
    t_max: float = 50.0
    t_min: float = 0.01
    cooling: float = 0.95
    iters_per_temp: int = 40
    delta_max_s: float = 5.0
    seed: int = 0
    time_limit_s: float | None = None

    def __post_init__(self):
        if not (self.t_max > self.t_min > 0):
            raise ValueError(f"need t_max > t_min > 0, got t_max={self.t_max}, t_min={self.t_min}")
        if not (0 < self.cooling < 1):
            raise ValueError(f"cooling must lie in (0, 1), got {self.cooling}")
        if self.iters_per_temp < 1:
            raise ValueError("iters_per_temp must be >= 1")
        if self.delta_max_s < 1:
            raise ValueError("delta_max_s must be >= 1")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class OptimizationResult:
    best_plan: SignalPlan
    best_cost: float
    evaluations: int
    accepted_moves: int
    trace: tuple[tuple[float, float], ...] = field(default=(), repr=False)


def cost(plan: SignalPlan, flows: Sequence[float], spec: IntersectionSpec,
         interval_s: float = DEFAULT_INTERVAL_S) -> float:
    """Objective of the optimiser; same value as :func:`aggregate_wait`."""
    return aggregate_wait(plan, flows, spec, interval_s)


def perturb(plan: SignalPlan, spec: IntersectionSpec, rng: random.Random, delta_max_s: float) -> SignalPlan:
    """Move a random amount of green from one approach to another.

    The amount is drawn from U[0.5, delta_max_s] and cut down so that both
    approaches stay inside their bounds. If the cut leaves nothing to move
    the draw is repeated; after 8 failed draws the plan comes back unchanged.
    """
    greens = list(plan.greens_s)
    n = len(greens)
    lo, hi = spec.green_min_s, spec.green_max_s
    for _ in range(PERTURB_RETRIES):
        donor, receiver = rng.sample(range(n), 2)
        delta = rng.uniform(0.5, delta_max_s)
        room = min(greens[donor] - lo[donor], hi[receiver] - greens[receiver])
        if room <= 0:
            continue
        if delta >= room:
            # land exactly on the binding bound
            delta = room
            if greens[donor] - lo[donor] <= hi[receiver] - greens[receiver]:
                greens[receiver] += greens[donor] - lo[donor]
                greens[donor] = lo[donor]
            else:
                greens[donor] -= hi[receiver] - greens[receiver]
                greens[receiver] = hi[receiver]
        else:
            greens[donor] = max(greens[donor] - delta, lo[donor])
            greens[receiver] = min(greens[receiver] + delta, hi[receiver])
        return SignalPlan(tuple(greens), plan.cycle_length_s, plan.lost_time_s)
    return plan


def _clamped_sum(raw, lo, hi, nu):
    return math.fsum(min(max(r + nu, a), b) for r, a, b in zip(raw, lo, hi))


def project_feasible(raw: Sequence[float], spec: IntersectionSpec) -> SignalPlan:
    """Euclidean projection of ``raw`` onto the box-constrained budget simplex.

    The projection has the form ``clamp(raw + nu, lo, hi)``; ``nu`` is found by
    bisection and then solved exactly on the set of unclamped coordinates.
    """
    raw = [float(r) for r in raw]
    n = spec.n_approaches
    if len(raw) != n:
        raise ValueError(f"expected {n} values, got {len(raw)}")
    if not all(math.isfinite(r) for r in raw):
        raise ValueError("raw greens must be finite")
    lo, hi, budget = spec.green_min_s, spec.green_max_s, spec.green_budget_s
    a = min(l - r for l, r in zip(lo, raw))
    b = max(h - r for h, r in zip(hi, raw))
    for _ in range(200):
        mid = 0.5 * (a + b)
        s = _clamped_sum(raw, lo, hi, mid)
        if abs(s - budget) < 1e-12 * max(1.0, budget):
            a = b = mid
            break
        if s < budget:
            a = mid
        else:
            b = mid
    nu = 0.5 * (a + b)
    greens = [min(max(r + nu, l), h) for r, l, h in zip(raw, lo, hi)]
    free = [i for i, g in enumerate(greens) if lo[i] < g < hi[i]]
    if free:
        fixed = math.fsum(g for i, g in enumerate(greens) if i not in free)
        nu_exact = (budget - fixed - math.fsum(raw[i] for i in free)) / len(free)
        candidate = list(greens)
        for i in free:
            candidate[i] = raw[i] + nu_exact
        if all(lo[i] <= candidate[i] <= hi[i] for i in free):
            greens = candidate
            # spread the last rounding residue over the free coordinates
            resid = budget - math.fsum(greens)
            for i in free:
                g = greens[i] + resid / len(free)
                if lo[i] <= g <= hi[i]:
                    greens[i] = g
    return SignalPlan(tuple(greens), spec.cycle_length_s, spec.lost_time_s)


def anneal(initial: SignalPlan, flows: Sequence[float], spec: IntersectionSpec,
           schedule: AnnealSchedule | None = None, interval_s: float = DEFAULT_INTERVAL_S,
           keep_trace: bool = True) -> OptimizationResult:
    """Simulated annealing over green splits with geometric cooling.

    Moves are accepted against the current plan's cost (Metropolis rule);
    the best plan ever seen is returned. Identical inputs and seed give an
    identical result unless ``schedule.time_limit_s`` cuts the run short.
    """
    schedule = schedule or AnnealSchedule()
    flows = [float(f) for f in flows]
    if len(flows) != spec.n_approaches:
        raise ValueError(f"expected {spec.n_approaches} flows, got {len(flows)}")
    if validate_plan(initial, spec):
        initial = project_feasible(initial.greens_s, spec)
    rng = random.Random(schedule.seed)
    deadline = None if schedule.time_limit_s is None else time.monotonic() + schedule.time_limit_s

    current = initial
    current_cost = cost(current, flows, spec, interval_s)
    best, best_cost = current, current_cost
    evaluations, accepted = 1, 0
    trace = []
    temp = schedule.t_max
    while temp >= schedule.t_min:
        for _ in range(schedule.iters_per_temp):
            candidate = perturb(current, spec, rng, schedule.delta_max_s)
            cand_cost = _mean_wait(candidate.greens_s, flows, spec, interval_s)
            evaluations += 1
            delta = cand_cost - current_cost
            if delta < 0 or math.exp(-delta / temp) > rng.random():
                current, current_cost = candidate, cand_cost
                accepted += 1
                if cand_cost < best_cost:
                    best, best_cost = candidate, cand_cost
        if keep_trace:
            trace.append((temp, current_cost))
        temp *= schedule.cooling
        if deadline is not None and time.monotonic() > deadline:
            break
    return OptimizationResult(best, best_cost, evaluations, accepted, tuple(trace))


def grid_candidates(spec: IntersectionSpec, step_s: float = 1.0) -> np.ndarray:
    """All grid splits (multiples of ``step_s``) that satisfy bounds and budget."""
    n = spec.n_approaches
    budget = spec.green_budget_s
    if n > MAX_BRUTE_FORCE_APPROACHES:
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE_APPROACHES} approaches, got {n}")
    if budget / step_s > MAX_BRUTE_FORCE_STEPS:
        raise ValueError(f"grid too large: budget/step = {budget / step_s:g} > {MAX_BRUTE_FORCE_STEPS}")
    axes = [
        np.arange(math.ceil(lo / step_s - 1e-9), math.floor(hi / step_s + 1e-9) + 1) * step_s
        for lo, hi in zip(spec.green_min_s[:-1], spec.green_max_s[:-1])
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    head = np.stack([m.ravel() for m in mesh], axis=1)
    last = budget - head.sum(axis=1)
    on_grid = np.abs(last / step_s - np.round(last / step_s)) < 1e-9
    keep = on_grid & (last >= spec.green_min_s[-1] - 1e-9) & (last <= spec.green_max_s[-1] + 1e-9)
    return np.column_stack([head[keep], last[keep]])


def brute_force_optimum(flows: Sequence[float], spec: IntersectionSpec, step_s: float = 1.0,
                        interval_s: float = DEFAULT_INTERVAL_S) -> SignalPlan:
    """Exhaustive search over the ``step_s`` grid; ties go to the smallest greens vector."""
    grid = grid_candidates(spec, step_s)
    if len(grid) == 0:
        raise ValueError("no grid point satisfies the bounds and budget; use a finer step")
    flows = np.asarray(flows, dtype=float)
    sat = np.array([a.saturation_flow for a in spec.approaches])
    waits = approach_wait_array(flows[None, :], grid, spec.cycle_length_s, sat[None, :], interval_s)
    costs = waits.mean(axis=1)
    # lexsort: last key is primary
    order = np.lexsort(tuple(grid[:, k] for k in reversed(range(grid.shape[1]))) + (costs,))
    return SignalPlan(tuple(grid[order[0]].tolist()), spec.cycle_length_s, spec.lost_time_s)


class SignalAnnealer(BaseEstimator):
    """Estimator-style front end to :func:`anneal` for one intersection.

    ``fit(flows)`` optimises the split for the given per-approach flows and
    stores ``plan_``, ``cost_`` and ``result_``. ``predict(flows)`` returns
    the green vector for new flows without touching the fitted state.
    """

    def __init__(self, intersection=None, t_max=50.0, t_min=0.01, cooling=0.95, iters_per_temp=40,
                 delta_max_s=5.0, seed=0, time_limit_s=None, interval_s=DEFAULT_INTERVAL_S):
        self.intersection = intersection
        self.t_max = t_max
        self.t_min = t_min
        self.cooling = cooling
        self.iters_per_temp = iters_per_temp
        self.delta_max_s = delta_max_s
        self.seed = seed
        self.time_limit_s = time_limit_s
        self.interval_s = interval_s

    def _schedule(self):
        return AnnealSchedule(self.t_max, self.t_min, self.cooling, self.iters_per_temp,
                              self.delta_max_s, self.seed, self.time_limit_s)

    def _check_flows(self, flows):
        if not isinstance(self.intersection, IntersectionSpec):
            raise TypeError("intersection must be an IntersectionSpec")
        flows = np.asarray(flows, dtype=float).ravel()
        if flows.shape[0] != self.intersection.n_approaches:
            raise ValueError(f"expected {self.intersection.n_approaches} flows, got {flows.shape[0]}")
        if not np.all(np.isfinite(flows)) or np.any(flows < 0):
            raise ValueError("flows must be finite and nonnegative")
        check_scalar(self.interval_s, "interval_s", (int, float), min_val=0.0, include_boundaries="neither")
        return flows.tolist()

    def fit(self, flows, initial=None):
        flows = self._check_flows(flows)
        start = initial if initial is not None else self.intersection.uniform_plan()
        self.result_ = anneal(start, flows, self.intersection, self._schedule(), self.interval_s)
        self.plan_ = self.result_.best_plan
        self.cost_ = self.result_.best_cost
        return self

    def predict(self, flows):
        check_is_fitted(self, "plan_")
        flows = self._check_flows(flows)
        res = anneal(self.plan_, flows, self.intersection, self._schedule(), self.interval_s, keep_trace=False)
        return np.array(res.best_plan.greens_s)
