"""
Time-stepped simulation kernel.

Entity registry, counter-based random streams, message scheduling with a
one-step minimum latency, and the sequential executor that every parallel
configuration is checked against.

Entities only interact through EventMessages. A message sent at step s is
delivered at its deliver_step (>= s + 1); all entities of a step see the
states committed at the end of the previous step, so stepping order inside a
step cannot change results.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import time
from bisect import insort
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Callable, Iterable, Protocol

from melsim import codec
from melsim.errors import CausalityError, ConstructionError, ContractViolation, RoutingError
from melsim.trace import Trace, entity_digest

logger = logging.getLogger(__name__)

EntityId = int

MAX_ENTITY_ID = 2**64 - 1
# Same-level messages are delivered no earlier than the next step
MIN_LATENCY = 1

_STREAM_KEY = struct.Struct("<QQQQ")
_U64_MASK = 2**64 - 1
# 53-bit mantissa scaling for uniform floats in [0, 1)
_UNIFORM_SCALE = 2.0**-53


@dataclass(frozen=True, order=True)
class VirtualTime:
    """Timestep index at a given level."""

    step: int
    level: int = 0

    def seconds(self, step_size: Fraction | float) -> Fraction | float:
        """Model time of this index: step x step_size(level)."""
        return self.step * step_size


@codec.register
@dataclass(frozen=True)
class EventMessage:
    """Timestamped interaction between two simulated entities."""

    src: int
    dst: int
    send_step: int
    deliver_step: int
    seq: int
    payload: bytes = b""
    level: int = 0

    @property
    def send_time(self) -> VirtualTime:
        return VirtualTime(self.send_step, self.level)

    @property
    def deliver_time(self) -> VirtualTime:
        return VirtualTime(self.deliver_step, self.level)

    @property
    def order_key(self) -> tuple[int, int]:
        return (self.src, self.seq)


@codec.register
@dataclass(frozen=True)
class SimulatedEntity:
    """Unit of modeling, migration and level transfer. state must be codec-encodable."""

    id: int
    kind: str
    state: Any
    level: int = 0
    next_seq: int = 0


@codec.register
@dataclass(frozen=True)
class RegionUpdate:
    """A publish to a region made by one entity during one step."""

    region: str
    src: int
    step: int
    index: int
    payload: Any


@dataclass(frozen=True)
class RandomStream:
    """Counter-based stream: the n-th draw depends only on (seed, entity, step, n)."""

    seed: int
    entity: int
    step: int
    counter: int = 0


def draw(stream: RandomStream) -> tuple[int, RandomStream]:
    """Uniform 64-bit value for the stream position, plus the advanced stream."""
    key = _STREAM_KEY.pack(
        stream.seed & _U64_MASK,
        stream.entity & _U64_MASK,
        stream.step & _U64_MASK,
        stream.counter & _U64_MASK,
    )
    value = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return value, replace(stream, counter=stream.counter + 1)


def to_uniform(value: int) -> float:
    """Map a 64-bit draw to a float in [0, 1)."""
    return (value >> 11) * _UNIFORM_SCALE


@dataclass(frozen=True)
class StreamFault:
    """Test hook: XOR every draw made on `lp` at `step` so traces diverge."""

    step: int
    lp: int = 1
    mask: int = 0x5A5A5A5A5A5A5A5A


class StepContext:
    """Per-entity, per-step view handed to behaviors: random draws, sends, publishes."""

    __slots__ = ("entity_id", "step", "level", "seed", "_counter", "_next_seq", "_fault_mask", "outbox", "publishes")

    def __init__(
        self,
        entity_id: int,
        step: int,
        seed: int,
        *,
        level: int = 0,
        next_seq: int = 0,
        fault_mask: int = 0,
    ) -> None:
        self.entity_id = entity_id
        self.step = step
        self.level = level
        self.seed = seed
        self._counter = 0
        self._next_seq = next_seq
        self._fault_mask = fault_mask
        self.outbox: list[EventMessage] = []
        self.publishes: list[RegionUpdate] = []

    @property
    def next_seq(self) -> int:
        return self._next_seq

    def draw(self) -> int:
        """Next draw of this entity's stream for the current step."""
        value, _ = draw(RandomStream(self.seed, self.entity_id, self.step, self._counter))
        self._counter += 1
        return value ^ self._fault_mask

    def uniform(self) -> float:
        return to_uniform(self.draw())

    def draw_for(self, entity: int, step: int, counter: int) -> int:
        """Draw from another stream owned by this entity (e.g. a micro vehicle at a fine step)."""
        value, _ = draw(RandomStream(self.seed, entity, step, counter))
        return value ^ self._fault_mask

    def send(self, dst: int, payload: bytes = b"", delay: int = MIN_LATENCY) -> EventMessage:
        """Queue a message for dst, delivered `delay` steps from now."""
        msg = EventMessage(
            src=self.entity_id,
            dst=dst,
            send_step=self.step,
            deliver_step=self.step + delay,
            seq=self._next_seq,
            payload=payload,
            level=self.level,
        )
        self._next_seq += 1
        self.outbox.append(msg)
        return msg

    def publish(self, region: str, payload: Any) -> None:
        """Publish to a region; subscribers see the update at step + 1."""
        self.publishes.append(RegionUpdate(region, self.entity_id, self.step, len(self.publishes), payload))


Behavior = Callable[[SimulatedEntity, list[EventMessage], StepContext], Any]


class Model(Protocol):
    """What the kernel needs from a model family."""

    def initial_entities(self, config: Any) -> Iterable[SimulatedEntity]: ...

    def behavior(self, kind: str) -> Behavior: ...

    def observe(self, entity: SimulatedEntity) -> dict[str, float]: ...

    def position(self, entity_id: int) -> tuple[float, float] | None: ...


class BaseModel:
    """Defaults for the optional parts of the Model protocol."""

    def observe(self, entity: SimulatedEntity) -> dict[str, float]:
        return {}

    def position(self, entity_id: int) -> tuple[float, float] | None:
        return None


def entity_step(
    entity: SimulatedEntity,
    inbox: list[EventMessage],
    ctx: StepContext,
    behavior: Behavior,
) -> tuple[Any, list[EventMessage]]:
    """
    Run one entity for one step.

    Returns (new state, outbox). Every outbox message must be stamped with the
    current step and delivered strictly later.
    """
    new_state = behavior(entity, inbox, ctx)
    for msg in ctx.outbox:
        if msg.send_step != ctx.step or msg.deliver_step < ctx.step + MIN_LATENCY:
            logger.error("Entity %s emitted %s at step %s", entity.id, msg, ctx.step)
            raise ContractViolation(
                f"message to {msg.dst} has deliver_step {msg.deliver_step} "
                f"(sent at {msg.send_step}); minimum is {ctx.step + MIN_LATENCY}",
                step=ctx.step,
                entity=entity.id,
            )
    return new_state, list(ctx.outbox)


@dataclass
class StepOutput:
    outbox: list[EventMessage]
    publishes: list[RegionUpdate]
    stepped: int
    delivered: int


class EntityStore:
    """
    Entities resident in one execution context and their pending messages.

    Frozen entities (the level-0 side of a refined region) are not stepped;
    messages addressed to them are handed to the entity that replaces them.
    """

    def __init__(self) -> None:
        self.entities: dict[int, SimulatedEntity] = {}
        self.pending: dict[int, list[EventMessage]] = {}
        self.aliases: dict[int, int] = {}
        self._order: list[int] = []

    def __len__(self) -> int:
        return len(self.entities)

    def __contains__(self, entity_id: int) -> bool:
        return entity_id in self.entities

    def add(self, entity: SimulatedEntity) -> None:
        if not 0 <= entity.id <= MAX_ENTITY_ID:
            raise ConstructionError(f"entity id {entity.id} outside 64-bit range", entity=entity.id)
        if entity.id in self.entities:
            raise ConstructionError(f"duplicate entity id {entity.id}", entity=entity.id)
        self.entities[entity.id] = entity
        insort(self._order, entity.id)

    def remove(self, entity_id: int) -> SimulatedEntity:
        entity = self.entities.pop(entity_id)
        self._order.remove(entity_id)
        return entity

    def replace_state(self, entity_id: int, state: Any) -> None:
        self.entities[entity_id] = replace(self.entities[entity_id], state=state)

    def freeze(self, entity_ids: Iterable[int], stand_in: int) -> None:
        for eid in entity_ids:
            self.aliases[eid] = stand_in

    def thaw(self, entity_ids: Iterable[int]) -> None:
        for eid in entity_ids:
            self.aliases.pop(eid, None)

    def recipient(self, dst: int) -> int:
        return self.aliases.get(dst, dst)

    def enqueue(self, msg: EventMessage, current_step: int) -> None:
        """Buffer msg for its deliver_step; anything for a step already executed is a causality error."""
        if msg.deliver_step <= current_step:
            raise CausalityError(
                f"message {msg.src}->{msg.dst} seq {msg.seq} for step {msg.deliver_step} "
                f"arrived after step {current_step} executed",
                step=current_step,
                entity=msg.dst,
            )
        self.pending.setdefault(msg.deliver_step, []).append(msg)

    def take_pending_for(self, entity_id: int) -> list[EventMessage]:
        """Remove and return every pending message addressed to entity_id."""
        taken: list[EventMessage] = []
        for step in list(self.pending):
            keep = []
            for msg in self.pending[step]:
                (taken if msg.dst == entity_id else keep).append(msg)
            if keep:
                self.pending[step] = keep
            else:
                del self.pending[step]
        return taken

    def pending_count(self) -> int:
        return sum(len(msgs) for msgs in self.pending.values())

    def take_inboxes(self, step: int) -> tuple[dict[int, list[EventMessage]], int]:
        """Group step's messages by recipient, each inbox sorted by (src, seq)."""
        msgs = self.pending.pop(step, [])
        inboxes: dict[int, list[EventMessage]] = {}
        for msg in msgs:
            target = self.recipient(msg.dst)
            if target not in self.entities:
                raise RoutingError(f"no resident entity {msg.dst} for delivery", step=step, entity=msg.dst)
            inboxes.setdefault(target, []).append(msg)
        for inbox in inboxes.values():
            inbox.sort(key=lambda m: m.order_key)
        return inboxes, len(msgs)

    def step_all(self, step: int, model: Model, seed: int, fault_mask: int = 0) -> StepOutput:
        """Step every non-frozen entity once, ascending id; commit all states at the end."""
        inboxes, delivered = self.take_inboxes(step)
        updates: list[tuple[int, SimulatedEntity]] = []
        outbox: list[EventMessage] = []
        publishes: list[RegionUpdate] = []
        for eid in self._order:
            if eid in self.aliases:
                continue
            entity = self.entities[eid]
            ctx = StepContext(eid, step, seed, level=entity.level, next_seq=entity.next_seq, fault_mask=fault_mask)
            new_state, sent = entity_step(entity, inboxes.get(eid, []), ctx, model.behavior(entity.kind))
            updates.append((eid, replace(entity, state=new_state, next_seq=ctx.next_seq)))
            outbox.extend(sent)
            publishes.extend(ctx.publishes)
        for eid, entity in updates:
            self.entities[eid] = entity
        return StepOutput(outbox=outbox, publishes=publishes, stepped=len(updates), delivered=delivered)

    def digests(self) -> list[tuple[int, bytes]]:
        return [(eid, entity_digest(self.entities[eid])) for eid in self._order]

    def observe(self, model: Model) -> dict[str, float]:
        totals: dict[str, float] = {}
        for eid in self._order:
            if eid in self.aliases:
                continue
            for key, value in model.observe(self.entities[eid]).items():
                totals[key] = totals.get(key, 0) + value
        return totals


@dataclass(frozen=True)
class KernelConfig:
    """Minimal run configuration for synthetic models."""

    seed: int = 0
    entities: int = 0


@dataclass
class SimulationState:
    seed: int
    model: Model
    store: EntityStore
    clock: int = 0

    @property
    def registry(self) -> dict[int, SimulatedEntity]:
        return self.store.entities


def init_simulation(config: Any, model: Model) -> SimulationState:
    """Register every entity the model builds for config; clock 0, nothing pending."""
    store = EntityStore()
    for entity in model.initial_entities(config):
        store.add(entity)
    logger.info("Initialized %s entities (seed %s)", len(store), config.seed)
    return SimulationState(seed=int(config.seed), model=model, store=store)


@codec.register
@dataclass(frozen=True)
class StepSummary:
    """Per-step, per-execution-context accounting that feeds the metrics rows."""

    step: int
    lp: int
    resident: int
    stepped: int
    local_msgs: int
    remote_msgs: int
    bytes_remote: int
    observations: dict
    wall_ms: float


@dataclass
class RunCounters:
    sent: int = 0
    delivered: int = 0
    dropped_at_horizon: int = 0
    max_step_spread: int = 0


@dataclass
class RunReport:
    """Side products of a run; never part of trace equality."""

    summaries: list[StepSummary] = field(default_factory=list)
    session_rows: list[dict[str, Any]] = field(default_factory=list)
    migration_rows: list[dict[str, Any]] = field(default_factory=list)
    counters: RunCounters = field(default_factory=RunCounters)
    n_lps: int = 1
    wall_seconds: float = 0.0


class BoundaryHook(Protocol):
    """Work done between steps: the multi-level coordinator implements this."""

    feed_region: str | None

    def plan_boundary(self, step: int, updates: list[RegionUpdate], owner_of: Callable[[int], int]) -> Any: ...

    def pinned(self) -> set[int]: ...

    def open_session(self, session: Any, store: EntityStore, step: int) -> None: ...

    def close_session(self, session: Any, store: EntityStore, step: int) -> dict[str, Any] | None: ...


def apply_boundary(hook: BoundaryHook, actions: Any, store: EntityStore, step: int, lp: int | None = None) -> list[dict[str, Any]]:
    """Close then open the sessions owned by lp (all of them when lp is None)."""
    rows = []
    for session in actions.closes:
        if lp is None or session.owner == lp:
            row = hook.close_session(session, store, step)
            if row is not None:
                rows.append(row)
    for session in actions.opens:
        if lp is None or session.owner == lp:
            hook.open_session(session, store, step)
    return rows


def run_sequential(
    state: SimulationState,
    horizon: int,
    *,
    coordinator: BoundaryHook | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> Trace:
    """
    Execute the model step by step in ascending entity order.

    Returns the full Trace; the attached report carries per-step summaries,
    session rows and message counters (sent = delivered + dropped_at_horizon).
    """
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    store = state.store
    model = state.model
    report = RunReport(n_lps=1)
    counters = report.counters
    trace = Trace()
    trace.record_initial(store.digests())
    updates: list[RegionUpdate] = []
    started = time.perf_counter()

    for step in range(state.clock, horizon + 1):
        if coordinator is not None:
            actions = coordinator.plan_boundary(step, updates, lambda _eid: 0)
            report.session_rows.extend(apply_boundary(coordinator, actions, store, step))
        if step == horizon:
            break
        t0 = time.perf_counter()
        out = store.step_all(step, model, state.seed)
        counters.delivered += out.delivered
        for msg in out.outbox:
            if store.recipient(msg.dst) not in store.entities:
                raise RoutingError(f"unknown destination {msg.dst}", step=step, entity=msg.src)
            store.enqueue(msg, step)
        counters.sent += len(out.outbox)
        feed = coordinator.feed_region if coordinator is not None else None
        updates = [u for u in out.publishes if u.region == feed]
        state.clock = step + 1
        trace.record_step(step, store.digests())
        report.summaries.append(
            StepSummary(
                step=step,
                lp=0,
                resident=len(store),
                stepped=out.stepped,
                local_msgs=len(out.outbox),
                remote_msgs=0,
                bytes_remote=0,
                observations=store.observe(model),
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
        )
        if progress is not None:
            progress(step + 1, horizon)

    trace.record_closing(horizon, store.digests())
    counters.dropped_at_horizon = store.pending_count()
    report.wall_seconds = time.perf_counter() - started
    trace.report = report
    logger.info(
        "Sequential run: %s steps, %s sent, %s delivered, %s dropped at horizon",
        horizon, counters.sent, counters.delivered, counters.dropped_at_horizon,
    )
    return trace
