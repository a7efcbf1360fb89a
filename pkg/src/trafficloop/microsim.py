"""Discrete-time point-queue simulation of one signalised intersection.

Each time step adds arrivals, discharges queued vehicles on the approach
that currently shows green (at its saturation rate, with a one-vehicle
service bank so an arrival to an empty queue on green goes straight
through), and accrues ``queue * dt`` vehicle-seconds of waiting.

Greens run round-robin in approach order, each followed by an equal share
of the lost time. A new plan only takes effect at a cycle boundary.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import DEFAULT_INTERVAL_S, IntersectionSpec, SignalPlan, validate_plan

logger = logging.getLogger(__name__)

IDLE_EMISSION_G_PER_VEH_S = 0.8
CSV_COLUMNS = ("t_s", "approach_id", "queue", "arrivals", "departures", "green_s", "cum_wait_veh_s")
_EPS = 1e-9


@dataclass(frozen=True)
class ArrivalProfile:
    """Piecewise-constant demand.

    ``rates[k]`` (veh per interval, one value per approach) holds from
    ``breakpoints_s[k]`` until the next breakpoint; the last segment runs on
    indefinitely. ``phase`` (deterministic process only, in [0, 1)) is the
    fraction of a vehicle already accumulated at t=0; it shifts where in the
    cycle the evenly spaced arrivals fall.
    """

    breakpoints_s: tuple[float, ...]
    rates: tuple[tuple[float, ...], ...]
    interval_s: float = DEFAULT_INTERVAL_S
    process: str = "poisson"
    phase: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "breakpoints_s", tuple(float(b) for b in self.breakpoints_s))
        object.__setattr__(self, "rates", tuple(tuple(float(r) for r in row) for row in self.rates))
        if not self.breakpoints_s or self.breakpoints_s[0] != 0.0:
            raise ValueError("arrival profile must start at t=0")
        if len(self.breakpoints_s) != len(self.rates):
            raise ValueError("one rate row per breakpoint")
        if any(b <= a for a, b in zip(self.breakpoints_s, self.breakpoints_s[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        widths = {len(r) for r in self.rates}
        if len(widths) != 1:
            raise ValueError("every rate row needs the same number of approaches")
        if any(r < 0 or not math.isfinite(r) for row in self.rates for r in row):
            raise ValueError("arrival rates must be finite and >= 0")
        if self.process not in ("poisson", "deterministic"):
            raise ValueError(f"unknown arrival process {self.process!r}")
        if not self.interval_s > 0:
            raise ValueError("interval_s must be > 0")
        if not 0.0 <= self.phase < 1.0:
            raise ValueError(f"phase must lie in [0, 1), got {self.phase}")

    @property
    def n_approaches(self) -> int:
        return len(self.rates[0])

    def flows_at(self, t_s: float) -> tuple[float, ...]:
        """Demand in veh/interval at time ``t_s``."""
        k = int(np.searchsorted(self.breakpoints_s, t_s, side="right")) - 1
        return self.rates[max(k, 0)]

    def rate_per_s(self, t_s: float) -> list[float]:
        return [r / self.interval_s for r in self.flows_at(t_s)]


@dataclass
class SimState:
    clock_s: float
    saturation_flows: tuple[float, ...]
    queues: list[int]
    arrived: list[int]
    departed: list[int]
    total_wait_veh_s: list[float]
    stopped_time_veh_s: list[float]
    arrival_credit: list[float]
    service_credit: list[float]
    cycle_origin_s: float = 0.0

    @classmethod
    def initial(cls, spec: IntersectionSpec) -> "SimState":
        n = spec.n_approaches
        return cls(0.0, tuple(a.saturation_flow for a in spec.approaches),
                   [0] * n, [0] * n, [0] * n, [0.0] * n, [0.0] * n, [0.0] * n, [0.0] * n)

    def phase(self, plan: SignalPlan) -> tuple[int | None, float]:
        """(approach with green or None during clearance, seconds left in that segment)."""
        offset = (self.clock_s - self.cycle_origin_s) % plan.cycle_length_s
        clearance = plan.lost_time_s / len(plan.greens_s)
        start = 0.0
        for i, g in enumerate(plan.greens_s):
            if offset < start + g:
                return i, start + g - offset
            start += g
            if offset < start + clearance:
                return None, start + clearance - offset
            start += clearance
        return None, plan.cycle_length_s - offset


@dataclass(frozen=True)
class SimMetrics:
    mean_wait_s: float
    per_approach_wait_s: tuple[float, ...]
    max_queue: int
    throughput: int
    arrivals: int
    emissions_proxy_g: float
    faults: int = 0

    def to_dict(self) -> dict:
        return {
            "mean_wait_s": self.mean_wait_s,
            "per_approach_wait_s": list(self.per_approach_wait_s),
            "max_queue": self.max_queue,
            "throughput": self.throughput,
            "arrivals": self.arrivals,
            "emissions_proxy_g": self.emissions_proxy_g,
            "faults": self.faults,
        }


def emissions_proxy(stopped_time_veh_s: Sequence[float] | float,
                    rate_g_per_veh_s: float = IDLE_EMISSION_G_PER_VEH_S) -> float:
    """Idle-emission proxy, linear in total stopped time. Only ratios are meaningful."""
    total = stopped_time_veh_s if isinstance(stopped_time_veh_s, (int, float)) else math.fsum(stopped_time_veh_s)
    return rate_g_per_veh_s * total


def green_overlaps(plan: SignalPlan, offset_s: float, dt: float) -> list[float]:
    """Seconds of green each approach gets within ``[offset, offset + dt)`` of the cycle."""
    clearance = plan.lost_time_s / len(plan.greens_s)
    end = offset_s + dt
    out = []
    start = 0.0
    for g in plan.greens_s:
        out.append(max(0.0, min(end, start + g) - max(offset_s, start)))
        start += g + clearance
    return out


def _advance(state: SimState, arrivals: Sequence[int], overlaps: Sequence[float], dt: float) -> tuple[int, ...]:
    """Advance ``state`` in place by one step; returns per-approach departures."""
    queues = state.queues
    credit = state.service_credit
    sat = state.saturation_flows
    departures = []
    for i in range(len(queues)):
        q = queues[i] + arrivals[i]
        state.arrived[i] += arrivals[i]
        ov = overlaps[i]
        d = 0
        if ov > 0.0:
            c = credit[i] + sat[i] * ov
            d = min(q, int(c + _EPS))
            c -= d
            q -= d
            # an idle green can bank at most one vehicle of service
            credit[i] = c if (q > 0 or c < 1.0) else 1.0
        else:
            credit[i] = 1.0 if q == 0 else 0.0
        queues[i] = q
        state.departed[i] += d
        w = q * dt
        state.total_wait_veh_s[i] += w
        state.stopped_time_veh_s[i] += w
        departures.append(d)
    state.clock_s += dt
    return tuple(departures)


def _draw_arrivals(state: SimState, profile: ArrivalProfile, dt: float, rng) -> list[int]:
    rates = profile.rate_per_s(state.clock_s)
    if profile.process == "poisson":
        return [int(v) for v in rng.poisson(np.array(rates) * dt)]
    out = []
    for i, r in enumerate(rates):
        c = state.arrival_credit[i] + r * dt
        k = int(c + _EPS)
        state.arrival_credit[i] = c - k
        out.append(k)
    return out


def step(state: SimState, plan: SignalPlan, profile: ArrivalProfile, dt: float = 1.0,
         rng: np.random.Generator | None = None) -> SimState:
    """Return the state one ``dt`` later under ``plan``; the input is not modified."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    new = copy.deepcopy(state)
    if rng is None:
        rng = np.random.default_rng()
    arrivals = _draw_arrivals(new, profile, dt, rng)
    offset = (new.clock_s - new.cycle_origin_s) % plan.cycle_length_s
    _advance(new, arrivals, green_overlaps(plan, offset, dt), dt)
    return new


def sample_arrivals(profile: ArrivalProfile, duration_s: float, dt: float, seed: int) -> np.ndarray:
    """Per-step integer arrivals, shape (steps, N), fixed by ``seed`` alone."""
    steps = int(round(duration_s / dt))
    times = np.arange(steps) * dt
    idx = np.searchsorted(profile.breakpoints_s, times, side="right") - 1
    lam = np.asarray(profile.rates)[idx] / profile.interval_s * dt
    if profile.process == "poisson":
        return np.random.default_rng(seed).poisson(lam)
    cum = np.floor(profile.phase + np.cumsum(lam, axis=0) + _EPS)
    return np.diff(np.vstack([np.zeros((1, lam.shape[1])), cum]), axis=0).astype(np.int64)


class Simulation:
    """A single run: owns its state, advances on demand, switches plans at cycle starts."""

    def __init__(self, spec: IntersectionSpec, profile: ArrivalProfile, plan: SignalPlan,
                 duration_s: float, seed: int = 0, dt: float = 1.0, warmup_s: float = 0.0,
                 emission_rate: float = IDLE_EMISSION_G_PER_VEH_S):
        if not dt > 0:
            raise ValueError("dt must be > 0")
        ratio = spec.cycle_length_s / dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt must divide the cycle length")
        if profile.n_approaches != spec.n_approaches:
            raise ValueError("arrival profile and intersection disagree on the number of approaches")
        if validate_plan(plan, spec):
            raise ValueError(f"initial plan infeasible: {validate_plan(plan, spec)}")
        self.spec = spec
        self.profile = profile
        self.dt = dt
        self.duration_s = duration_s
        self.warmup_s = warmup_s
        self.emission_rate = emission_rate
        self.state = SimState.initial(spec)
        self.plan = plan
        self.pending: SignalPlan | None = None
        self.faults = 0
        self._arrivals = sample_arrivals(profile, duration_s, dt, seed).tolist()
        self._steps_per_cycle = int(round(ratio))
        self._table = self._overlap_table(plan)
        self._step_idx = 0
        n = spec.n_approaches
        self._m_arrived = [0] * n
        self._m_departed = [0] * n
        self._m_wait = [0.0] * n
        self._m_stopped = [0.0] * n
        self.max_queue = 0
        self.interval_arrivals: list[list[int]] = []
        self.rows: list[tuple] = []
        self._cur_arr = [0] * n
        self._cur_dep = [0] * n
        self._steps_per_interval = max(1, int(round(profile.interval_s / dt)))

    def _overlap_table(self, plan):
        return [green_overlaps(plan, k * self.dt, self.dt) for k in range(self._steps_per_cycle)]

    def stage_plan(self, plan: SignalPlan) -> list[str]:
        """Queue ``plan`` for the next cycle start. Infeasible plans are refused and counted."""
        violations = validate_plan(plan, self.spec)
        if violations:
            self.faults += 1
            logger.warning("rejected plan %s: %s", plan.greens_s, "; ".join(violations))
            return violations
        self.pending = plan
        return []

    def next_cycle_start(self) -> float:
        k = self._step_idx % self._steps_per_cycle
        if k == 0:
            return self.state.clock_s
        return self.state.clock_s + (self._steps_per_cycle - k) * self.dt

    @property
    def total_steps(self) -> int:
        return len(self._arrivals)

    def advance_to(self, t_s: float) -> None:
        target = min(int(round(t_s / self.dt)), self.total_steps)
        state, dt = self.state, self.dt
        n = self.spec.n_approaches
        warm_steps = int(math.ceil(self.warmup_s / dt - 1e-9))
        while self._step_idx < target:
            k = self._step_idx % self._steps_per_cycle
            if k == 0 and self.pending is not None:
                self.plan, self.pending = self.pending, None
                self._table = self._overlap_table(self.plan)
            arr = self._arrivals[self._step_idx]
            before_wait = state.total_wait_veh_s[:] if self._step_idx >= warm_steps else None
            deps = _advance(state, arr, self._table[k], dt)
            if before_wait is not None:
                for i in range(n):
                    self._m_arrived[i] += arr[i]
                    self._m_departed[i] += deps[i]
                    w = state.total_wait_veh_s[i] - before_wait[i]
                    self._m_wait[i] += w
                    self._m_stopped[i] += w
                mq = max(state.queues)
                if mq > self.max_queue:
                    self.max_queue = mq
            for i in range(n):
                self._cur_arr[i] += arr[i]
                self._cur_dep[i] += deps[i]
            self._step_idx += 1
            if self._step_idx % self._steps_per_interval == 0 or self._step_idx == self.total_steps:
                self._close_interval()

    def _close_interval(self):
        t_s = round(self._step_idx * self.dt, 9)
        self.interval_arrivals.append(list(self._cur_arr))
        for i, a in enumerate(self.spec.approaches):
            self.rows.append((t_s, a.id, self.state.queues[i], self._cur_arr[i], self._cur_dep[i],
                              self.plan.greens_s[i], self.state.total_wait_veh_s[i]))
        n = self.spec.n_approaches
        self._cur_arr = [0] * n
        self._cur_dep = [0] * n

    def run(self) -> "SimMetrics":
        self.advance_to(self.duration_s)
        return self.metrics()

    def metrics(self) -> SimMetrics:
        arrived = sum(self._m_arrived)
        per = tuple(w / a if a else 0.0 for w, a in zip(self._m_wait, self._m_arrived))
        return SimMetrics(
            mean_wait_s=math.fsum(self._m_wait) / arrived if arrived else 0.0,
            per_approach_wait_s=per,
            max_queue=self.max_queue,
            throughput=sum(self._m_departed),
            arrivals=arrived,
            emissions_proxy_g=emissions_proxy(self._m_stopped, self.emission_rate),
            faults=self.faults,
        )

    def csv_text(self) -> str:
        buf = io.StringIO()
        write_rows(buf, self.rows)
        return buf.getvalue()


def write_rows(fh, rows, extra_columns: Sequence[str] = ()) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow((*extra_columns, *CSV_COLUMNS))
    for row in rows:
        writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


@dataclass(frozen=True)
class FixedPolicy:
    plan: SignalPlan


@dataclass(frozen=True)
class AdaptivePolicy:
    """``decide(t_s, interval_history)`` returns the plan for the next cycle.

    ``interval_history[k]`` holds the per-approach arrival counts observed
    in interval ``k``; the list covers every completed interval.
    """

    decide: Callable[[float, list[list[int]]], SignalPlan]
    reevaluation_period_s: float = DEFAULT_INTERVAL_S


def run_scenario(config, policy, seed: int, warmup_s: float = 0.0, return_sim: bool = False):
    """Simulate ``config`` for its whole duration under ``policy``.

    The adaptive policy is consulted at every reevaluation boundary; its plan
    starts at the next cycle boundary. Arrivals depend only on ``seed`` so
    the fixed and adaptive arms see identical demand.
    """
    spec = config.intersection
    if isinstance(policy, FixedPolicy):
        initial = policy.plan
    else:
        initial = config.fixed_plan()
    sim = Simulation(spec, config.arrival_profile, initial, config.duration_s, seed=seed,
                     dt=config.dt_s, warmup_s=warmup_s, emission_rate=config.emission_rate)
    if isinstance(policy, AdaptivePolicy):
        period = policy.reevaluation_period_s
        t = period
        while t < config.duration_s - _EPS:
            sim.advance_to(t)
            try:
                plan = policy.decide(t, sim.interval_arrivals)
            except Exception:
                logger.exception("controller failed at t=%s; keeping previous plan", t)
                sim.faults += 1
            else:
                sim.stage_plan(plan)
            t += period
    metrics = sim.run()
    return (metrics, sim) if return_sim else metrics
