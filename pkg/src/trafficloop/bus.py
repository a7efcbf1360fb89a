"""In-process asyncio publish/subscribe bus and the control-loop services.

Topics are ``/``-separated lowercase segments. A subscription pattern may end
in a single ``*`` segment that matches exactly one trailing segment, so the
grammar maps onto MQTT's ``+`` wildcard one to one.

Each subscription owns a bounded queue. Publishing never waits on a
subscriber: when a queue is full its oldest message is dropped and the
subscription's ``dropped`` counter goes up.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import re
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, AsyncIterator

logger = logging.getLogger(__name__)

DEFAULT_QUEUE_SIZE = 1024
_SEGMENT = re.compile(r"^[a-z0-9_]+$")


class TopicError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def parse_topic(topic: str, *, pattern: bool = False) -> tuple[str, ...]:
    if not isinstance(topic, str) or not topic:
        raise TopicError(f"empty topic {topic!r}")
    segments = tuple(topic.split("/"))
    for i, seg in enumerate(segments):
        if seg == "*":
            if not pattern:
                raise TopicError(f"wildcard not allowed in publication topic {topic!r}")
            if i != len(segments) - 1:
                raise TopicError(f"wildcard only allowed as the last segment: {topic!r}")
        elif not _SEGMENT.match(seg):
            raise TopicError(f"bad segment {seg!r} in topic {topic!r}")
    return segments


def topic_matches(pattern: tuple[str, ...], topic: tuple[str, ...]) -> bool:
    if len(pattern) != len(topic):
        return False
    return all(p == "*" or p == t for p, t in zip(pattern, topic))


# field -> accepted python types; lists are checked element-wise for numbers
_NUM = (int, float)
SCHEMAS: dict[str, dict[str, Any]] = {
    "traffic_flows": {"t": int, "flow_veh_per_interval": _NUM, "approach_id": str},
    "predicted_flows": {"t": int, "horizon_steps": int, "forecasts": list, "approach_id": str},
    "traffic_signal_decisions": {"cycle_start_t_s": _NUM, "greens_s": list, "cycle_length_s": _NUM,
                                 "cost_estimate_s": _NUM},
    "traffic_signal_status": {"applied": bool, "greens_s": list, "reason": str},
}


def validate_payload(topic: tuple[str, ...], payload: dict) -> None:
    """Check ``payload`` against the schema of the topic's root segment.

    Topics outside the control taxonomy carry free-form mappings.
    """
    if not isinstance(payload, dict):
        raise SchemaError(f"payload must be a mapping, got {type(payload).__name__}")
    schema = SCHEMAS.get(topic[0])
    if schema is None:
        return
    if set(payload) != set(schema):
        missing = sorted(set(schema) - set(payload))
        extra = sorted(set(payload) - set(schema))
        raise SchemaError(f"{'/'.join(topic)}: missing fields {missing}, unexpected fields {extra}")
    for key, typ in schema.items():
        value = payload[key]
        if typ is list:
            if not isinstance(value, list) or not all(
                    isinstance(v, _NUM) and not isinstance(v, bool) for v in value):
                raise SchemaError(f"{'/'.join(topic)}: field {key!r} must be a list of numbers")
        elif typ is bool:
            if not isinstance(value, bool):
                raise SchemaError(f"{'/'.join(topic)}: field {key!r} must be a boolean")
        elif isinstance(value, bool) or not isinstance(value, typ):
            raise SchemaError(f"{'/'.join(topic)}: field {key!r} has type {type(value).__name__}")


@dataclass(frozen=True)
class BusMessage:
    topic: str
    payload: dict
    publisher_id: str
    seq: int
    ts: float


@dataclass(frozen=True)
class ControlLoopConfig:
    reevaluation_period_s: float = 300.0
    forecast_steps: int = 1
    intersection_id: str = "i1"
    queue_size: int = DEFAULT_QUEUE_SIZE

    def __post_init__(self):
        if not self.reevaluation_period_s > 0:
            raise ValueError("reevaluation_period_s must be > 0")
        if self.forecast_steps < 1:
            raise ValueError("forecast_steps must be >= 1")
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")


class Subscription:
    """Bounded message stream; iterate with ``async for`` until cancelled or the bus closes."""

    def __init__(self, bus: "MessageBus", pattern: str, maxsize: int, track: bool = False):
        self.bus = bus
        self.track = track
        self.pattern = pattern
        self._segments = parse_topic(pattern, pattern=True)
        self._queue: deque[BusMessage] = deque()
        self._maxsize = maxsize
        self._wakeup = asyncio.Event()
        self._unfinished = 0
        self._idle = asyncio.Event()
        self._idle.set()
        self.delivered = 0
        self.dropped = 0
        self.active = True

    def _offer(self, msg: BusMessage) -> None:
        if len(self._queue) >= self._maxsize:
            self._queue.popleft()
            self.dropped += 1
            self._unfinished -= 1
        self._queue.append(msg)
        self.delivered += 1
        self._unfinished += 1
        self._idle.clear()
        self._wakeup.set()

    def task_done(self) -> None:
        """Mark the last received message as handled (used by :meth:`MessageBus.join`)."""
        self._unfinished -= 1
        if self._unfinished <= 0:
            self._unfinished = 0
            self._idle.set()

    def pending(self) -> int:
        return len(self._queue)

    async def get(self) -> BusMessage | None:
        """Next message, or None once cancelled/closed and drained."""
        while not self._queue:
            if not self.active or self.bus.closed:
                return None
            self._wakeup.clear()
            await self._wakeup.wait()
        return self._queue.popleft()

    def get_nowait(self) -> BusMessage | None:
        return self._queue.popleft() if self._queue else None

    def cancel(self) -> None:
        if self.active:
            self.active = False
            self.bus._remove(self)
            self._queue.clear()
            self._unfinished = 0
            self._idle.set()
            self._wakeup.set()

    def __aiter__(self) -> AsyncIterator[BusMessage]:
        return self

    async def __anext__(self) -> BusMessage:
        msg = await self.get()
        if msg is None:
            raise StopAsyncIteration
        return msg


class MessageBus:
    """Topic-routed fan-out inside one event loop.

    Delivery is exactly once per matching live subscription, in publish
    order, with no retention: a subscriber only sees messages published
    after it subscribed.
    """

    def __init__(self, queue_size: int = DEFAULT_QUEUE_SIZE, clock=None):
        self.queue_size = queue_size
        self.clock = clock or (lambda: 0.0)
        self.closed = False
        self._subs: list[Subscription] = []
        self._seq: dict[str, itertools.count] = {}
        self.published = Counter()
        self.log: list[BusMessage] | None = None

    def subscribe(self, pattern: str, maxsize: int | None = None, track: bool = False) -> Subscription:
        """Register ``pattern``. Tracked subscriptions must call ``task_done`` per message; :meth:`join` waits on them."""
        sub = Subscription(self, pattern, maxsize or self.queue_size, track)
        self._subs.append(sub)
        return sub

    def _remove(self, sub: Subscription) -> None:
        if sub in self._subs:
            self._subs.remove(sub)

    def publish(self, topic: str, payload: dict, publisher_id: str, ts: float | None = None) -> BusMessage:
        """Validate, stamp and fan out one message; returns the stamped message as acknowledgment."""
        if self.closed:
            raise RuntimeError("bus is closed")
        segments = parse_topic(topic)
        validate_payload(segments, payload)
        counter = self._seq.setdefault(publisher_id, itertools.count(1))
        msg = BusMessage(topic, payload, publisher_id, next(counter), self.clock() if ts is None else ts)
        self.published[segments[0]] += 1
        if self.log is not None:
            self.log.append(msg)
        for sub in tuple(self._subs):
            if topic_matches(sub._segments, segments):
                sub._offer(msg)
        return msg

    async def apublish(self, topic: str, payload: dict, publisher_id: str, ts: float | None = None) -> BusMessage:
        """:meth:`publish`, then yield to the event loop so subscribers can run."""
        msg = self.publish(topic, payload, publisher_id, ts)
        await asyncio.sleep(0)
        return msg

    async def join(self) -> None:
        """Wait until every live subscription has handled everything delivered to it."""
        while True:
            busy = [s for s in self._subs if s.track and not s._idle.is_set()]
            if not busy:
                # one extra turn so handlers that just finished can publish
                await asyncio.sleep(0)
                if all(s._idle.is_set() for s in self._subs if s.track):
                    return
                continue
            await busy[0]._idle.wait()

    def close(self) -> None:
        self.closed = True
        for sub in self._subs:
            sub._wakeup.set()

    @property
    def drops(self) -> int:
        return sum(s.dropped for s in self._subs)


# ---------------------------------------------------------------------------
# control-loop services
# ---------------------------------------------------------------------------


@dataclass
class LoopStats:
    rounds: int = 0
    decisions: int = 0
    statuses: int = 0
    rejected: int = 0
    stale_rounds: int = 0
    messages_by_topic: dict = field(default_factory=dict)
    drops: int = 0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "decisions": self.decisions,
            "statuses": self.statuses,
            "rejected": self.rejected,
            "stale_rounds": self.stale_rounds,
            "messages_by_topic": dict(sorted(self.messages_by_topic.items())),
            "drops": self.drops,
        }


async def prediction_service(bus: MessageBus, config, sub: Subscription, name: str = "prediction") -> None:
    """traffic_flows/* -> predicted_flows/<approach>."""
    from .control import forecast_approach

    models = {m.approach_id: m for m in config.models}
    history: dict[str, list[float]] = {a: [] for a in models}
    async for msg in sub:
        try:
            p = msg.payload
            aid = p["approach_id"]
            if aid not in models:
                logger.warning("no model for approach %s; ignoring", aid)
                continue
            history[aid].append(float(p["flow_veh_per_interval"]))
            t_next = p["t"] + 1
            fc = forecast_approach(models[aid], history[aid], config, t_next)
            await bus.apublish(f"predicted_flows/{aid}",
                               {"t": t_next, "horizon_steps": len(fc), "forecasts": fc, "approach_id": aid},
                               name, ts=msg.ts)
        finally:
            sub.task_done()


async def optimization_service(bus: MessageBus, config, sub: Subscription, stats: LoopStats,
                               name: str = "optimizer") -> None:
    """predicted_flows/* -> traffic_signal_decisions/<intersection>, one per complete forecast set."""
    from .control import optimize_round

    spec = config.intersection
    ids = spec.approach_ids
    per_round = max(1, int(round(config.loop.reevaluation_period_s / config.interval_s)))
    stale_after = 2 * per_round
    pending: dict[int, dict[str, list[float]]] = {}
    topic = f"traffic_signal_decisions/{config.loop.intersection_id}"
    async for msg in sub:
        try:
            p = msg.payload
            t = p["t"]
            if t % per_round:
                continue
            pending.setdefault(t, {})[p["approach_id"]] = p["forecasts"]
            for old in sorted(k for k in pending if k <= t - stale_after):
                missing = [a for a in ids if a not in pending[old]]
                text = f"stale data: forecasts for t={old} missing {missing}; keeping previous plan"
                logger.warning(text)
                stats.warnings.append(text)
                stats.stale_rounds += 1
                del pending[old]
            if t in pending and all(a in pending[t] for a in ids):
                got = pending.pop(t)
                forecasts = [got[a] for a in ids]
                result = optimize_round(forecasts, spec, config.anneal, t, config.interval_s)
                await bus.apublish(topic, {
                    "cycle_start_t_s": float(msg.ts),
                    "greens_s": list(result.best_plan.greens_s),
                    "cycle_length_s": spec.cycle_length_s,
                    "cost_estimate_s": result.best_cost,
                }, name, ts=msg.ts)
        finally:
            sub.task_done()
    for old in sorted(pending):
        text = f"stale data: forecasts for t={old} incomplete at shutdown"
        logger.warning(text)
        stats.warnings.append(text)
        stats.stale_rounds += 1


async def controller_service(bus: MessageBus, sim, sub: Subscription, intersection_id: str,
                             name: str = "controller") -> None:
    """traffic_signal_decisions/<id> -> plan staged in the plant + traffic_signal_status/<id>."""
    from .core import SignalPlan

    spec = sim.spec
    async for msg in sub:
        try:
            p = msg.payload
            plan = SignalPlan(tuple(p["greens_s"]), float(p["cycle_length_s"]), spec.lost_time_s)
            try:
                violations = sim.stage_plan(plan)
            except ValueError as exc:
                violations = [str(exc)]
                sim.faults += 1
            applied = not violations
            await bus.apublish(f"traffic_signal_status/{intersection_id}", {
                "applied": applied,
                "greens_s": list(plan.greens_s if applied else sim.plan.greens_s),
                "reason": "applied at next cycle start" if applied else "rejected: " + "; ".join(violations),
            }, name, ts=msg.ts)
        finally:
            sub.task_done()


async def metrics_service(sub: Subscription, seen: list) -> None:
    """Third-party observer: records every control-loop message it sees."""
    async for msg in sub:
        seen.append(msg)
        sub.task_done()


async def sensor_feeder(bus: MessageBus, sim, config, stats: LoopStats, settle=None,
                        name: str = "sensors") -> None:
    """Drive the plant and publish per-interval counts on traffic_flows/<approach>.

    After each reevaluation boundary the feeder awaits ``settle()`` (by
    default the bus going quiet), so a decision always reaches the plant
    before it moves on.
    """
    settle = settle or bus.join
    ids = config.intersection.approach_ids
    interval = config.interval_s
    period = config.loop.reevaluation_period_s
    t = period
    while t < config.duration_s - 1e-9:
        sim.advance_to(t)
        stats.rounds += 1
        # only intervals completed since the last round
        first = int(round((t - period) / interval))
        for k in range(first, len(sim.interval_arrivals)):
            counts = sim.interval_arrivals[k]
            for aid, c in zip(ids, counts):
                await bus.apublish(f"traffic_flows/{aid}",
                                   {"t": k, "flow_veh_per_interval": float(c), "approach_id": aid},
                                   name, ts=float(t))
        await settle()
        t += period
    sim.advance_to(config.duration_s)


async def run_control_loop(config, seed: int, sim=None, observers: list | None = None,
                           bus: MessageBus | None = None, feeder=None):
    """Close the sensor -> prediction -> optimisation -> controller loop over the bus.

    Returns ``(metrics, stats, sim)``; ``observers`` (if given) collects
    every message on the four control topics.
    """
    from .microsim import Simulation

    if sim is None:
        sim = Simulation(config.intersection, config.arrival_profile, config.fixed_plan(), config.duration_s,
                         seed=seed, dt=config.dt_s, emission_rate=config.emission_rate)
    bus = bus or MessageBus(config.loop.queue_size, clock=lambda: sim.state.clock_s)
    stats = LoopStats()
    iid = config.loop.intersection_id
    subs = {
        "prediction": bus.subscribe("traffic_flows/*", track=True),
        "optimizer": bus.subscribe("predicted_flows/*", track=True),
        "controller": bus.subscribe(f"traffic_signal_decisions/{iid}", track=True),
    }
    observer_subs = []
    if observers is not None:
        for pattern in ("traffic_flows/*", "predicted_flows/*", "traffic_signal_decisions/*",
                        "traffic_signal_status/*"):
            observer_subs.append(bus.subscribe(pattern, track=True))
    status_sub = bus.subscribe(f"traffic_signal_status/{iid}", track=True)

    async def count_status():
        async for msg in status_sub:
            stats.statuses += 1
            if not msg.payload["applied"]:
                stats.rejected += 1
            status_sub.task_done()

    tasks = [
        asyncio.create_task(prediction_service(bus, config, subs["prediction"])),
        asyncio.create_task(optimization_service(bus, config, subs["optimizer"], stats)),
        asyncio.create_task(controller_service(bus, sim, subs["controller"], iid)),
        asyncio.create_task(count_status()),
    ]
    tasks += [asyncio.create_task(metrics_service(s, observers)) for s in observer_subs]

    async def settle():
        # a crashed service would otherwise leave join() waiting forever
        join = asyncio.ensure_future(bus.join())
        done, _ = await asyncio.wait([join, *tasks], return_when=asyncio.FIRST_COMPLETED)
        if join not in done:
            join.cancel()
            for task in done:
                task.result()
            raise RuntimeError("a control-loop service stopped unexpectedly")

    try:
        await (feeder or sensor_feeder)(bus, sim, config, stats, settle)
        await settle()
    finally:
        bus.close()
        await asyncio.gather(*tasks)
    stats.decisions = bus.published["traffic_signal_decisions"]
    stats.messages_by_topic = dict(bus.published)
    stats.drops = sum(s.dropped for s in (*subs.values(), *observer_subs, status_sub))
    return sim.metrics(), stats, sim
