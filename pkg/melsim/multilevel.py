"""
Multi-level coordination: level registry, refinement sessions, boundary-only
cross-level exchange and the continuous level.

Level 0 is the coarse time-stepped model; level 1 refines regions of it with
a step size that divides the coarse one exactly (ratio R); level 2 is a
continuous model advanced on every level-1 step. A refinement session
freezes its region's level-0 entities for [s0, s1) and replaces them with
one level-1 session entity, created and destroyed at coarse boundaries.

The model-specific work (building the session entity from the frozen
states, writing coarsened states back) is done by the adapter handle of the
level-1 LevelSpec.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Callable, Iterable, Protocol

from melsim import codec
from melsim.errors import LevelConfigError, LevelProtocolError, RefinementError
from melsim.kernel import EntityStore, RegionUpdate, SimulatedEntity
from melsim.migration import Move

logger = logging.getLogger(__name__)

TIME_STEPPED = "time-stepped"
CONTINUOUS = "continuous"
LEVEL_KINDS = (TIME_STEPPED, CONTINUOUS)
MAX_LEVELS = 3

MANUAL = "manual"
AUTOMATIC = "automatic"

# Region fed by watched links when their vehicle count reaches the density threshold
HOTSPOT_REGION = "hotspots"

# Session entity ids live far above level-0 ids; each session owns a block of 2^32 ids
SESSION_ID_BASE = 2**40
SESSION_ID_STRIDE = 2**32


def session_entity_id(session_id: int) -> int:
    return SESSION_ID_BASE + session_id * SESSION_ID_STRIDE


class LevelAdapter(Protocol):
    """Model side of a refinement level."""

    def open_session(self, session: "RefinementSession", store: EntityStore, step: int) -> SimulatedEntity: ...

    def close_session(
        self, session: "RefinementSession", entity: SimulatedEntity, store: EntityStore, step: int
    ) -> dict[str, Any]: ...

    def region_for(self, key: Any) -> tuple[int, ...]: ...


@dataclass(frozen=True)
class LevelSpec:
    level: int
    step_size: Fraction
    kind: str = TIME_STEPPED
    adapter: Any = None


@dataclass(frozen=True)
class LevelHandle:
    level: int
    ratio: int | None  # coarse / fine step size against the parent level


def as_fraction(value: Any) -> Fraction:
    """Exact rational for a step size written as int, decimal float/str or Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


@codec.register
@dataclass(frozen=True)
class RefinementSession:
    session_id: int
    region: tuple  # level-0 entity ids, ascending
    s0: int
    s1: int
    trigger_mode: str = MANUAL
    owner: int = 0
    ratio: int = 1

    @property
    def entity_id(self) -> int:
        return session_entity_id(self.session_id)

    def overlaps(self, region: Iterable[int], s0: int, s1: int) -> bool:
        return bool(set(self.region) & set(region)) and s0 < self.s1 and self.s0 < s1


@dataclass(frozen=True)
class TriggerPolicy:
    mode: str = MANUAL
    density_threshold: int = 0
    watch: dict = field(default_factory=dict)  # watched level-0 entity -> region key
    min_session_steps: int = 10


class CrossLevelBuffer:
    """Cross-level messages produced between boundaries, held until the next one."""

    def __init__(self) -> None:
        # (deliver fine index, destination, payload)
        self.items: list[tuple[int, int, bytes]] = []

    def __len__(self) -> int:
        return len(self.items)

    def post(self, dst: int, payload: bytes, fine_index: int, ratio: int) -> int:
        """Stamp a message generated at fine_index with the next coarse boundary; returns that boundary."""
        boundary = fine_index // ratio + 1
        self.items.append((boundary * ratio, dst, payload))
        return boundary

    def post_raw(self, dst: int, payload: bytes, deliver_fine_index: int) -> None:
        self.items.append((deliver_fine_index, dst, payload))


def exchange_at_boundary(buffer: CrossLevelBuffer, step: int, ratio: int) -> list[tuple[int, bytes]]:
    """Release everything due at coarse boundary `step` as (destination, payload), in posting order."""
    due = []
    keep = []
    for deliver, dst, payload in buffer.items:
        if deliver % ratio != 0:
            raise LevelProtocolError(
                f"cross-level message for {dst} stamped with fine index {deliver}, not a coarse boundary (R={ratio})",
                step=step,
                entity=dst,
            )
        if deliver // ratio <= step:
            due.append((dst, payload))
        else:
            keep.append((deliver, dst, payload))
    buffer.items = keep
    return due


def step_continuous(model: Any, acc: Any, speed_pairs: Iterable[tuple[float, float]], dt: float) -> Any:
    """Advance a level-2 accumulator by one quadrature step for each (v_prev, v_now) pair."""
    for v_prev, v_now in speed_pairs:
        acc = model.advance(acc, v_prev, v_now, dt)
    return acc


@codec.register
@dataclass(frozen=True)
class BoundaryActions:
    step: int
    closes: tuple = ()
    opens: tuple = ()
    forced: tuple = ()  # Move entries co-locating opening regions


class Coordinator:
    """Level registry and session lifecycle; plan_boundary runs on the coordinating context only."""

    feed_region = HOTSPOT_REGION

    def __init__(self, horizon: int, policy: TriggerPolicy | None = None) -> None:
        self.horizon = horizon
        self.policy = policy or TriggerPolicy()
        self.levels: dict[int, LevelSpec] = {}
        self.handles: dict[int, LevelHandle] = {}
        self.sessions: list[RefinementSession] = []  # queued or active, by id
        self._next_session = 0
        self.rejected = 0

    # levels

    def register_level(self, spec: LevelSpec) -> LevelHandle:
        if spec.kind not in LEVEL_KINDS:
            raise LevelConfigError(f"levels[{spec.level}].kind: unknown kind {spec.kind!r}")
        if spec.level in self.levels:
            raise LevelConfigError(f"levels[{spec.level}]: level registered twice")
        if spec.level >= MAX_LEVELS:
            raise LevelConfigError(f"levels[{spec.level}]: at most {MAX_LEVELS} levels")
        if spec.step_size <= 0:
            raise LevelConfigError(f"levels[{spec.level}].step_size must be positive")
        ratio = None
        parent = self.levels.get(spec.level - 1)
        if spec.level > 0 and parent is None:
            raise LevelConfigError(f"levels[{spec.level}]: parent level {spec.level - 1} not registered")
        if parent is not None and parent.kind == TIME_STEPPED and spec.kind == TIME_STEPPED:
            exact = parent.step_size / spec.step_size
            if exact.denominator != 1:
                raise LevelConfigError(
                    f"levels[{spec.level}].step_size: {parent.step_size}/{spec.step_size} = {exact} is not an integer ratio"
                )
            ratio = int(exact)
        self.levels[spec.level] = spec
        handle = LevelHandle(spec.level, ratio)
        self.handles[spec.level] = handle
        logger.debug("Registered level %s (%s, step %s s, ratio %s)", spec.level, spec.kind, spec.step_size, ratio)
        return handle

    @property
    def ratio(self) -> int:
        handle = self.handles.get(1)
        return handle.ratio if handle is not None and handle.ratio else 1

    @property
    def adapter(self) -> LevelAdapter | None:
        spec = self.levels.get(1)
        return spec.adapter if spec is not None else None

    # sessions

    def trigger_refinement(self, region: Iterable[int], s0: int, s1: int, source: str = MANUAL) -> RefinementSession:
        region = tuple(sorted(set(region)))
        if not region:
            raise LevelConfigError("refinement region is empty")
        if not 0 <= s0 < s1:
            raise LevelConfigError(f"session needs 0 <= s0 < s1, got s0={s0}, s1={s1}")
        if s1 > self.horizon:
            raise LevelConfigError(f"session end s1={s1} lies beyond the horizon {self.horizon}")
        for other in self.sessions:
            if other.overlaps(region, s0, s1):
                self.rejected += 1
                raise LevelConfigError(
                    f"region overlaps session {other.session_id} ({other.s0}..{other.s1}); request rejected"
                )
        session = RefinementSession(
            session_id=self._next_session,
            region=region,
            s0=s0,
            s1=s1,
            trigger_mode=source,
            ratio=self.ratio,
        )
        self._next_session += 1
        self.sessions.append(session)
        logger.info("Session %s queued: %s entities, steps %s..%s (%s)", session.session_id, len(region), s0, s1, source)
        return session

    def pinned(self) -> set[int]:
        """Entities adaptive migration must leave alone: region members and session entities."""
        pinned: set[int] = set()
        for session in self.sessions:
            pinned.update(session.region)
            pinned.add(session.entity_id)
        return pinned

    def _automatic(self, step: int, updates: list[RegionUpdate]) -> None:
        if self.policy.mode != AUTOMATIC or self.adapter is None:
            return
        s1 = min(step + self.policy.min_session_steps, self.horizon)
        if s1 <= step:
            return
        for update in sorted(updates, key=lambda u: (u.src, u.index)):
            watched, count = update.payload
            if count < self.policy.density_threshold or watched not in self.policy.watch:
                continue
            region = self.adapter.region_for(self.policy.watch[watched])
            try:
                self.trigger_refinement(region, step, s1, AUTOMATIC)
            except LevelConfigError as exc:
                logger.debug("Automatic trigger at step %s for %s skipped: %s", step, watched, exc)

    def plan_boundary(self, step: int, updates: list[RegionUpdate], owner_of: Callable[[int], int]) -> BoundaryActions:
        """Sessions closing and opening at this boundary, with owners and co-location moves."""
        self._automatic(step, updates)
        closes = tuple(s for s in self.sessions if s.s1 == step)
        self.sessions = [s for s in self.sessions if s.s1 != step]
        opens = []
        forced: list[Move] = []
        for session in self.sessions:
            if session.s0 != step:
                continue
            owners = [owner_of(eid) for eid in session.region]
            tally: dict[int, int] = {}
            for lp in owners:
                tally[lp] = tally.get(lp, 0) + 1
            owner = min(tally, key=lambda lp: (-tally[lp], lp))
            forced.extend(
                Move(eid, lp, owner, 0.0, True) for eid, lp in zip(session.region, owners) if lp != owner
            )
            opens.append(replace(session, owner=owner))
        opened = {s.session_id: s for s in opens}
        self.sessions = [opened.get(s.session_id, s) for s in self.sessions]
        return BoundaryActions(step, closes, tuple(opens), tuple(forced))

    def open_session(self, session: RefinementSession, store: EntityStore, step: int) -> None:
        adapter = self.adapter
        try:
            entity = adapter.open_session(session, store, step)
        except RefinementError as exc:
            logger.warning("Session %s aborted before start at step %s: %s", session.session_id, step, exc)
            return
        store.add(entity)
        store.freeze(session.region, entity.id)
        logger.info("Opened session %s at step %s on LP %s", session.session_id, step, session.owner)

    def close_session(self, session: RefinementSession, store: EntityStore, step: int) -> dict[str, Any] | None:
        if session.entity_id not in store:
            store.thaw(session.region)
            return None
        entity = store.remove(session.entity_id)
        expected = session.ratio * (step - session.s0)
        fine_clock = entity.state.fine_clock
        if fine_clock != expected:
            raise LevelProtocolError(
                f"session {session.session_id} ran {fine_clock} fine steps, expected {expected} "
                f"(R={session.ratio} x {step - session.s0} coarse steps)",
                step=step,
                entity=entity.id,
            )
        row = self.adapter.close_session(session, entity, store, step)
        store.thaw(session.region)
        logger.info("Closed session %s at step %s", session.session_id, step)
        return row
