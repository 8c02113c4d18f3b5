"""
Self-clustering entity migration.

Every LP reports, per step, how many messages each of its entities sent to
each LP. The coordinator keeps a sliding window of those counts and, at a
step boundary, proposes moving an entity to the LP that receives a strict
majority (above theta) of its traffic, provided the move keeps every LP's
entity count within (1 + beta) x mean. Moved entities cool down for C steps.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping

from melsim import codec
from melsim.errors import ConfigError, ConfigIssue, MigrationError
from melsim.kernel import EntityStore, SimulatedEntity
from melsim.partition import Directory

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 10  # steps
DEFAULT_THETA = 0.6  # external majority threshold
DEFAULT_BETA = 0.2  # load imbalance bound
DEFAULT_COOLDOWN = 20  # steps per entity
DEFAULT_MAX_PER_BOUNDARY = 64


@dataclass(frozen=True)
class MigrationParams:
    window: int = DEFAULT_WINDOW
    theta: float = DEFAULT_THETA
    beta: float = DEFAULT_BETA
    cooldown: int = DEFAULT_COOLDOWN
    max_per_boundary: int = DEFAULT_MAX_PER_BOUNDARY

    def __post_init__(self) -> None:
        issues = []
        if self.window < 1:
            issues.append(ConfigIssue("migration.window", "must be >= 1"))
        if not 0.5 < self.theta <= 1.0:
            issues.append(ConfigIssue("migration.theta", "must satisfy 0.5 < theta <= 1"))
        if self.beta < 0:
            issues.append(ConfigIssue("migration.beta", "must be >= 0"))
        if self.cooldown < 0:
            issues.append(ConfigIssue("migration.cooldown", "must be >= 0"))
        if self.max_per_boundary < 0:
            issues.append(ConfigIssue("migration.max_per_boundary", "must be >= 0"))
        if issues:
            raise ConfigError(issues)


class InteractionMatrix:
    """Windowed per-entity counts of messages sent to each LP."""

    def __init__(self, window: int = DEFAULT_WINDOW) -> None:
        self.window = window
        self._steps: deque[tuple[int, dict[int, Counter]]] = deque()
        self._totals: dict[int, Counter] = {}
        self.current_step = 0

    def advance(self, step: int) -> None:
        if step > self.current_step:
            self.current_step = step
        horizon = self.current_step - self.window
        while self._steps and self._steps[0][0] <= horizon:
            _, counts = self._steps.popleft()
            for eid, per_lp in counts.items():
                total = self._totals[eid]
                total.subtract(per_lp)
                for lp in [lp for lp, n in total.items() if n <= 0]:
                    del total[lp]
                if not total:
                    del self._totals[eid]

    def record(self, src: int, dst_lp: int, step: int, count: int = 1) -> None:
        self.advance(step)
        if step <= self.current_step - self.window:
            return
        if not self._steps or self._steps[-1][0] != step:
            self._steps.append((step, {}))
        bucket = self._steps[-1][1]
        bucket.setdefault(src, Counter())[dst_lp] += count
        self._totals.setdefault(src, Counter())[dst_lp] += count

    def counts(self, entity: int, step: int | None = None) -> dict[int, int]:
        if step is not None:
            self.advance(step)
        return dict(self._totals.get(entity, {}))

    def entities(self) -> list[int]:
        return sorted(self._totals)


def record_interaction(matrix: InteractionMatrix, src: int, dst_lp: int, step: int) -> InteractionMatrix:
    matrix.record(src, dst_lp, step)
    return matrix


@codec.register
@dataclass(frozen=True)
class Move:
    entity: int
    from_lp: int
    to_lp: int
    external_ratio: float = 0.0
    forced: bool = False


@dataclass(frozen=True)
class MigrationPlan:
    moves: tuple[Move, ...]
    step: int

    def __bool__(self) -> bool:
        return bool(self.moves)

    def rows(self) -> list[dict]:
        return [
            {
                "step": self.step,
                "entity": m.entity,
                "from_lp": m.from_lp,
                "to_lp": m.to_lp,
                "external_ratio": round(m.external_ratio, 6),
            }
            for m in self.moves
        ]


def evaluate_migrations(
    matrix: InteractionMatrix,
    directory: Directory,
    loads: list[int],
    params: MigrationParams,
    step: int,
    last_moved: Mapping[int, int] | None = None,
    pinned: Iterable[int] = (),
) -> MigrationPlan:
    """Proposals ordered by external ratio (highest first, then lower id), within the balance bound."""
    last_moved = last_moved or {}
    pinned = set(pinned)
    n_lps = len(loads)
    total_entities = sum(loads)
    # count * n_lps <= (1 + beta) * total, kept exact
    bound = (1 + Fraction(str(params.beta))) * total_entities
    matrix.advance(step)

    candidates: list[tuple[Fraction, int, int, int]] = []
    for eid in matrix.entities():
        if eid in pinned or eid not in directory.owners:
            continue
        since = last_moved.get(eid)
        if since is not None and step - since < params.cooldown:
            continue
        per_lp = matrix.counts(eid)
        total = sum(per_lp.values())
        home = directory.owner(eid)
        for lp, n in per_lp.items():
            if lp != home and n > params.theta * total:
                candidates.append((Fraction(n, total), eid, home, lp))
    candidates.sort(key=lambda c: (-c[0], c[1]))

    projected = list(loads)
    moves: list[Move] = []
    for ratio, eid, home, target in candidates:
        if len(moves) >= params.max_per_boundary:
            break
        if (projected[target] + 1) * n_lps > bound:
            continue
        projected[target] += 1
        projected[home] -= 1
        moves.append(Move(eid, home, target, float(ratio)))
    if moves:
        logger.info("Step %s: %s migrations proposed (loads %s -> %s)", step, len(moves), loads, projected)
    return MigrationPlan(tuple(moves), step)


@codec.register
@dataclass(frozen=True)
class EntityTransfer:
    """Wire body for one migrated entity and the messages still waiting for it."""

    entity: SimulatedEntity
    pending: tuple


def pack_transfer(store: EntityStore, entity_id: int) -> bytes:
    """Remove an entity and its pending messages from store, serialized for the target LP."""
    entity = store.remove(entity_id)
    pending = tuple(store.take_pending_for(entity_id))
    try:
        return codec.encode(EntityTransfer(entity, pending))
    except codec.CodecError as exc:
        raise MigrationError(f"cannot serialize entity {entity_id}: {exc}", entity=entity_id) from exc


def unpack_transfer(store: EntityStore, blob: bytes, step: int) -> int:
    """Register a transferred entity and re-queue its pending messages; returns its id."""
    try:
        transfer = codec.decode(blob)
    except codec.CodecError as exc:
        raise MigrationError(f"corrupt entity transfer: {exc}", step=step) from exc
    if not isinstance(transfer, EntityTransfer):
        raise MigrationError(f"unexpected transfer body {type(transfer).__name__}", step=step)
    store.add(transfer.entity)
    for msg in transfer.pending:
        store.enqueue(msg, step - 1)
    return transfer.entity.id


def apply_migrations(
    plan: MigrationPlan,
    stores: Mapping[int, EntityStore],
    directory: Directory,
    last_moved: dict[int, int] | None = None,
) -> Directory:
    """Move every planned entity between stores and bump the directory version (non-empty plans only)."""
    if not plan.moves:
        return directory
    for move in plan.moves:
        if directory.owner(move.entity) != move.from_lp:
            raise MigrationError(
                f"entity {move.entity} expected on LP {move.from_lp}, directory says {directory.owner(move.entity)}",
                step=plan.step,
                entity=move.entity,
            )
        blob = pack_transfer(stores[move.from_lp], move.entity)
        unpack_transfer(stores[move.to_lp], blob, plan.step)
        if last_moved is not None and not move.forced:
            last_moved[move.entity] = plan.step
    directory.move((m.entity, m.to_lp) for m in plan.moves)
    return directory

