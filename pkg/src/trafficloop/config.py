"""Scenario files: one YAML document per experiment.

Top-level keys::

    name, seed, duration_s, interval_s, dt_s, start_clock
    intersection:      id, cycle_length_s, lost_time_s,
                       approaches: [{id, saturation_flow, lanes, green_min_s, green_max_s}]
    arrival_profile:   process (poisson | deterministic), phase (deterministic only),
                       segments: [{start_s, flows: [veh/interval per approach]}]
    exogenous:         names: [...], timeline: [{start_s, values: [...]}]
    prediction:        p, q, ridge, and either models: [...] or history_file
    anneal:            t_max, t_min, cooling, iters_per_temp, delta_max_s, seed, time_limit_s
    loop:              reevaluation_period_s, forecast_steps, intersection_id, queue_size
    emission_rate_g_per_veh_s
    fixed_plan:        optional greens for the fixed arm (default: even split)

``anneal``, ``loop`` and ``exogenous`` may be omitted; defaults are applied
and recorded in ``ScenarioConfig.notices``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .bus import ControlLoopConfig
from .core import (
    DEFAULT_INTERVAL_S,
    ApproachSpec,
    ExogenousRecord,
    FlowObservation,
    IntersectionSpec,
    SignalPlan,
    validate_plan,
)
from .microsim import IDLE_EMISSION_G_PER_VEH_S, ArrivalProfile
from .optimizer import AnnealSchedule
from .prediction import PredictionModel, fit

logger = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ConfigError(ValueError):
    """Invalid scenario file; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class ExogenousTimeline:
    names: tuple[str, ...] = ()
    starts_s: tuple[float, ...] = (0.0,)
    values: tuple[tuple[float, ...], ...] = ((),)

    @property
    def q(self) -> int:
        return len(self.names)

    def at(self, t_s: float) -> tuple[float, ...]:
        k = 0
        for i, s in enumerate(self.starts_s):
            if s <= t_s + 1e-9:
                k = i
        return self.values[k]

    def records(self, n_intervals: int, interval_s: float) -> list[ExogenousRecord]:
        return [ExogenousRecord(t, self.at(t * interval_s)) for t in range(n_intervals)]


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    intersection: IntersectionSpec
    arrival_profile: ArrivalProfile
    exogenous: ExogenousTimeline
    models: tuple[PredictionModel, ...]
    anneal: AnnealSchedule
    loop: ControlLoopConfig
    duration_s: float
    seed: int = 0
    interval_s: float = DEFAULT_INTERVAL_S
    dt_s: float = 1.0
    start_clock: str = "00:00"
    emission_rate: float = IDLE_EMISSION_G_PER_VEH_S
    prediction: dict = field(default_factory=dict)
    fixed_greens: tuple[float, ...] | None = None
    notices: tuple[str, ...] = ()

    @property
    def exog_records(self) -> list[ExogenousRecord]:
        n = int(math.ceil(self.duration_s / self.interval_s)) + self.loop.forecast_steps + 1
        return self.exogenous.records(n, self.interval_s)

    def exog_at_interval(self, t: int) -> tuple[float, ...]:
        return self.exogenous.at(t * self.interval_s)

    def fixed_plan(self) -> SignalPlan:
        if self.fixed_greens is None:
            return self.intersection.uniform_plan()
        return SignalPlan(self.fixed_greens, self.intersection.cycle_length_s, self.intersection.lost_time_s)

    def clock_label(self, t_s: float) -> str:
        h, m = (int(v) for v in self.start_clock.split(":"))
        total = h * 60 + m + int(t_s // 60)
        return f"{(total // 60) % 24:02d}:{total % 60:02d}"


def _req(doc: dict, key: str, path: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required key")
    return doc[key]


def _num(value, key: str, *, positive=False, nonneg=False) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a number, got {value!r}") from None
    if not math.isfinite(v):
        raise ConfigError(key, "must be finite")
    if positive and not v > 0:
        raise ConfigError(key, f"must be > 0, got {v}")
    if nonneg and v < 0:
        raise ConfigError(key, f"must be >= 0, got {v}")
    return v


def _intersection(doc: dict) -> IntersectionSpec:
    approaches, lo, hi = [], [], []
    raw = _req(doc, "approaches", "intersection")
    if not isinstance(raw, list):
        raise ConfigError("intersection.approaches", "expected a list")
    for i, a in enumerate(raw):
        key = f"intersection.approaches[{i}]"
        aid = str(_req(a, "id", key))
        key = f"intersection.approaches[{i}:{aid}]"
        try:
            approaches.append(ApproachSpec(aid, _num(_req(a, "saturation_flow", key), f"{key}.saturation_flow"),
                                           int(a.get("lanes", 1))))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(key, str(exc)) from None
        gmin = _num(_req(a, "green_min_s", key), f"{key}.green_min_s", positive=True)
        gmax = _num(_req(a, "green_max_s", key), f"{key}.green_max_s", positive=True)
        if gmin > gmax:
            raise ConfigError(key, f"approach {aid}: green_min_s ({gmin}) > green_max_s ({gmax})")
        lo.append(gmin)
        hi.append(gmax)
    try:
        return IntersectionSpec(
            id=str(_req(doc, "id", "intersection")),
            approaches=tuple(approaches),
            cycle_length_s=_num(_req(doc, "cycle_length_s", "intersection"), "intersection.cycle_length_s",
                                positive=True),
            lost_time_s=_num(doc.get("lost_time_s", 0.0), "intersection.lost_time_s", nonneg=True),
            green_min_s=tuple(lo),
            green_max_s=tuple(hi),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("intersection", str(exc)) from None


def _profile(doc: dict, n: int, interval_s: float) -> ArrivalProfile:
    segments = _req(doc, "segments", "arrival_profile")
    starts, rates = [], []
    for i, seg in enumerate(segments):
        key = f"arrival_profile.segments[{i}]"
        flows = _req(seg, "flows", key)
        if len(flows) != n:
            raise ConfigError(f"{key}.flows", f"expected {n} flows, got {len(flows)}")
        starts.append(_num(_req(seg, "start_s", key), f"{key}.start_s", nonneg=True))
        rates.append(tuple(_num(f, f"{key}.flows", nonneg=True) for f in flows))
    try:
        return ArrivalProfile(tuple(starts), tuple(rates), interval_s, str(doc.get("process", "poisson")),
                              float(doc.get("phase", 0.0)))
    except ValueError as exc:
        raise ConfigError("arrival_profile", str(exc)) from None


def _exogenous(doc: dict | None, notices: list) -> ExogenousTimeline:
    if not doc:
        notices.append("exogenous: section missing, using no exogenous inputs (q=0)")
        return ExogenousTimeline()
    names = tuple(str(n) for n in doc.get("names", ()))
    starts, values = [], []
    for i, rec in enumerate(_req(doc, "timeline", "exogenous")):
        key = f"exogenous.timeline[{i}]"
        vals = tuple(_num(v, f"{key}.values") for v in _req(rec, "values", key))
        if len(vals) != len(names):
            raise ConfigError(f"{key}.values", f"expected {len(names)} values ({', '.join(names)}), got {len(vals)}")
        starts.append(_num(_req(rec, "start_s", key), f"{key}.start_s", nonneg=True))
        values.append(vals)
    if not starts or starts[0] != 0.0:
        raise ConfigError("exogenous.timeline", "first record must start at 0")
    return ExogenousTimeline(names, tuple(starts), tuple(values))


def _anneal(doc: dict | None, notices: list) -> AnnealSchedule:
    if doc is None:
        notices.append("anneal: section missing, using default schedule")
        return AnnealSchedule()
    allowed = {"t_max", "t_min", "cooling", "iters_per_temp", "delta_max_s", "seed", "time_limit_s"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError("anneal", f"unknown keys {sorted(unknown)}")
    kwargs = dict(doc)
    for k in ("iters_per_temp", "seed"):
        if k in kwargs:
            kwargs[k] = int(kwargs[k])
    try:
        return AnnealSchedule(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError("anneal", str(exc)) from None


def _loop(doc: dict | None, intersection_id: str, interval_s: float, notices: list) -> ControlLoopConfig:
    if doc is None:
        notices.append("loop: section missing, reevaluating every interval")
        doc = {}
    try:
        cfg = ControlLoopConfig(
            reevaluation_period_s=float(doc.get("reevaluation_period_s", interval_s)),
            forecast_steps=int(doc.get("forecast_steps", 1)),
            intersection_id=str(doc.get("intersection_id", intersection_id)),
            queue_size=int(doc.get("queue_size", 1024)),
        )
    except ValueError as exc:
        raise ConfigError("loop", str(exc)) from None
    ratio = cfg.reevaluation_period_s / interval_s
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("loop.reevaluation_period_s", "must be a whole number of intervals")
    return cfg


def _models(doc: dict, approach_ids: list[str], exog: ExogenousTimeline, interval_s: float,
            base: Path) -> tuple[tuple[PredictionModel, ...], dict]:
    p = int(doc.get("p", 1))
    q = int(doc.get("q", exog.q))
    ridge = _num(doc.get("ridge", 0.0), "prediction.ridge", nonneg=True)
    if q != exog.q:
        raise ConfigError("prediction.q", f"q={q} but the exogenous timeline has {exog.q} variables")
    meta = {"p": p, "q": q, "ridge": ridge}
    if "models" in doc:
        models = []
        for i, m in enumerate(doc["models"]):
            try:
                model = PredictionModel.from_dict({**m, "exog_names": m.get("exog_names", exog.names)})
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"prediction.models[{i}]", str(exc)) from None
            if model.p != p or model.q != q:
                raise ConfigError(f"prediction.models[{i}]", f"expected p={p}, q={q}")
            models.append(model)
        by_id = {m.approach_id: m for m in models}
    elif "history_file" in doc:
        path = base / doc["history_file"]
        if not path.exists():
            raise ConfigError("prediction.history_file", f"file not found: {path}")
        history = read_history_csv(path, q)
        by_id = {}
        for aid, (obs, recs) in history.items():
            model, _ = fit(obs, recs, p, q, ridge, exog_names=exog.names)
            by_id[aid] = model
    else:
        raise ConfigError("prediction", "need either 'models' or 'history_file'")
    missing = [a for a in approach_ids if a not in by_id]
    if missing:
        raise ConfigError("prediction", f"no model for approaches {missing}")
    return tuple(by_id[a] for a in approach_ids), meta


def read_history_csv(path, q: int) -> dict[str, tuple[list[FlowObservation], list[ExogenousRecord]]]:
    """Read ``t, approach_id, flow, z_1..z_q`` rows grouped by approach, sorted by t."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for c in ("t", "approach_id", "flow"):
            if c not in cols:
                raise ValueError(f"{path}: missing column {c!r}")
        zcols = [c for c in cols if c.startswith("z_")]
        if len(zcols) != q:
            raise ValueError(f"{path}: expected q={q} exogenous columns z_1..z_{q}, found {len(zcols)}")
        zcols.sort(key=lambda c: int(c[2:]))
        groups: dict[str, list] = {}
        for row in reader:
            groups.setdefault(row["approach_id"], []).append(
                (int(row["t"]), float(row["flow"]), tuple(float(row[c]) for c in zcols)))
    out = {}
    for aid, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        out[aid] = ([FlowObservation(aid, t, f) for t, f, _ in rows],
                    [ExogenousRecord(t, z) for t, _, z in rows])
    return out


def parse_config(doc: dict[str, Any], base: Path | str = ".") -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a mapping")
    notices: list[str] = []
    interval_s = _num(doc.get("interval_s", DEFAULT_INTERVAL_S), "interval_s", positive=True)
    duration_s = _num(_req(doc, "duration_s", ""), "duration_s", nonneg=True)
    dt_s = _num(doc.get("dt_s", 1.0), "dt_s", positive=True)
    spec = _intersection(_req(doc, "intersection", ""))
    profile = _profile(_req(doc, "arrival_profile", ""), spec.n_approaches, interval_s)
    exog = _exogenous(doc.get("exogenous"), notices)
    models, meta = _models(_req(doc, "prediction", ""), spec.approach_ids, exog, interval_s, Path(base))
    fixed = doc.get("fixed_plan")
    cfg = ScenarioConfig(
        name=str(doc.get("name", "scenario")),
        intersection=spec,
        arrival_profile=profile,
        exogenous=exog,
        models=models,
        anneal=_anneal(doc.get("anneal"), notices),
        loop=_loop(doc.get("loop"), spec.id, interval_s, notices),
        duration_s=duration_s,
        seed=int(doc.get("seed", 0)),
        interval_s=interval_s,
        dt_s=dt_s,
        start_clock=str(doc.get("start_clock", "00:00")),
        emission_rate=_num(doc.get("emission_rate_g_per_veh_s", IDLE_EMISSION_G_PER_VEH_S),
                           "emission_rate_g_per_veh_s", nonneg=True),
        prediction=meta,
        fixed_greens=None if fixed is None else tuple(float(g) for g in fixed),
        notices=tuple(notices),
    )
    if fixed is not None:
        violations = validate_plan(cfg.fixed_plan(), spec)
        if violations:
            raise ConfigError("fixed_plan", "; ".join(violations))
    ratio = spec.cycle_length_s / dt_s
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("dt_s", "must divide intersection.cycle_length_s")
    for note in notices:
        logger.info("%s", note)
    return cfg


def load_config(path) -> ScenarioConfig:
    """Load and validate a scenario file.

    Raises
    ------
    ConfigError
        On parse errors or any invariant violation; the message names the key.
    """
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"no such file: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
    return parse_config(doc, base=path.parent)


def shipped_scenario(name: str) -> Path:
    path = SCENARIO_DIR / f"{name}.yaml"
    if not path.exists():
        raise FileNotFoundError(f"no shipped scenario {name!r}")
    return path
