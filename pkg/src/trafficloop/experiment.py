"""Paired fixed-vs-adaptive experiments over a list of seeds."""

from __future__ import annotations

import asyncio
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .control import PredictiveController
from .microsim import AdaptivePolicy, FixedPolicy, SimMetrics, run_scenario, write_rows


@dataclass(frozen=True)
class ArmResult:
    policy: str
    seed: int
    metrics: SimMetrics
    rows: tuple = field(repr=False, default=())
    loop_stats: dict | None = None


@dataclass(frozen=True)
class ComparisonReport:
    fixed: SimMetrics
    adaptive: SimMetrics
    wait_reduction_pct: float
    emissions_reduction_pct: float
    seeds_used: int
    per_seed: tuple = ()

    def to_dict(self) -> dict:
        return {
            "fixed": self.fixed.to_dict(),
            "adaptive": self.adaptive.to_dict(),
            "wait_reduction_pct": self.wait_reduction_pct,
            "emissions_reduction_pct": self.emissions_reduction_pct,
            "seeds_used": self.seeds_used,
            "per_seed": list(self.per_seed),
        }


def reduction_pct(fixed: float, adaptive: float) -> float:
    return 100.0 * (fixed - adaptive) / fixed if fixed else 0.0


def run_arm(config, policy: str, seed: int) -> ArmResult:
    if policy == "fixed":
        metrics, sim = run_scenario(config, FixedPolicy(config.fixed_plan()), seed, return_sim=True)
    elif policy == "adaptive":
        controller = PredictiveController(config)
        metrics, sim = run_scenario(
            config, AdaptivePolicy(controller, config.loop.reevaluation_period_s), seed, return_sim=True)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return ArmResult(policy, seed, metrics, tuple(sim.rows))


def run_loop_arm(config, seed: int) -> ArmResult:
    from .bus import run_control_loop

    metrics, stats, sim = asyncio.run(run_control_loop(config, seed))
    return ArmResult("loop", seed, metrics, tuple(sim.rows), stats.to_dict())


def _run_job(args):
    config, policy, seed = args
    return run_loop_arm(config, seed) if policy == "loop" else run_arm(config, policy, seed)


def run_many(config, policies: Sequence[str], seeds: Sequence[int], jobs: int = 1) -> list[ArmResult]:
    """Run every (policy, seed) pair; results come back in input order whatever ``jobs`` is."""
    work = [(config, p, s) for s in seeds for p in policies]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_job, work))
    return [_run_job(w) for w in work]


def mean_metrics(results: Sequence[ArmResult]) -> SimMetrics:
    """Seed-average of each metric field."""
    k = len(results)
    if k == 0:
        raise ValueError("no results to average")
    ms = [r.metrics for r in results]
    n = len(ms[0].per_approach_wait_s)
    return SimMetrics(
        mean_wait_s=math.fsum(m.mean_wait_s for m in ms) / k,
        per_approach_wait_s=tuple(math.fsum(m.per_approach_wait_s[i] for m in ms) / k for i in range(n)),
        max_queue=max(m.max_queue for m in ms),
        throughput=round(sum(m.throughput for m in ms) / k),
        arrivals=round(sum(m.arrivals for m in ms) / k),
        emissions_proxy_g=math.fsum(m.emissions_proxy_g for m in ms) / k,
        faults=sum(m.faults for m in ms),
    )


def compare(config, seeds: Sequence[int], jobs: int = 1, results: Sequence[ArmResult] | None = None
            ) -> tuple[ComparisonReport, list[ArmResult]]:
    """Fixed vs adaptive on the same seeds (so both arms see the same arrivals)."""
    if results is None:
        results = run_many(config, ("fixed", "adaptive"), seeds, jobs)
    fixed = [r for r in results if r.policy == "fixed"]
    adaptive = [r for r in results if r.policy != "fixed"]
    f, a = mean_metrics(fixed), mean_metrics(adaptive)
    per_seed = []
    for rf, ra in zip(fixed, adaptive):
        per_seed.append({
            "seed": rf.seed,
            "fixed_mean_wait_s": rf.metrics.mean_wait_s,
            "adaptive_mean_wait_s": ra.metrics.mean_wait_s,
            "wait_reduction_pct": reduction_pct(rf.metrics.mean_wait_s, ra.metrics.mean_wait_s),
            "emissions_reduction_pct": reduction_pct(rf.metrics.emissions_proxy_g, ra.metrics.emissions_proxy_g),
        })
    report = ComparisonReport(
        fixed=f,
        adaptive=a,
        wait_reduction_pct=reduction_pct(f.mean_wait_s, a.mean_wait_s),
        emissions_reduction_pct=reduction_pct(f.emissions_proxy_g, a.emissions_proxy_g),
        seeds_used=len(seeds),
        per_seed=tuple(per_seed),
    )
    return report, list(results)


def write_csvs(results: Sequence[ArmResult], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in results:
        path = out / f"{r.policy}_seed{r.seed}.csv"
        with open(path, "w", newline="") as fh:
            write_rows(fh, r.rows)
        paths.append(path)
    return paths


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)
