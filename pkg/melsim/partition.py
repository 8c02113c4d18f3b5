"""
Entity-to-LP assignment, the migration-aware directory, and message routing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

from melsim.errors import ConfigError, ConfigIssue, RoutingError

logger = logging.getLogger(__name__)

STRATEGIES = ("round-robin", "block", "geographic")


@dataclass(frozen=True)
class Partition:
    assignment: dict[int, int]
    strategy: str
    n_lps: int

    def resident(self, lp: int) -> list[int]:
        return sorted(eid for eid, owner in self.assignment.items() if owner == lp)

    def sizes(self) -> list[int]:
        counts = [0] * self.n_lps
        for owner in self.assignment.values():
            counts[owner] += 1
        return counts


def _block_sizes(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _assign_blocks(ordered: list[int], n_lps: int) -> dict[int, int]:
    assignment: dict[int, int] = {}
    start = 0
    for lp, size in enumerate(_block_sizes(len(ordered), n_lps)):
        for eid in ordered[start:start + size]:
            assignment[eid] = lp
        start += size
    return assignment


def make_partition(
    entities: Iterable[int],
    n_lps: int,
    strategy: str = "round-robin",
    position: Callable[[int], tuple[float, float] | None] | None = None,
) -> Partition:
    """
    Assign every entity to an LP.

    round-robin puts id i on i mod n_lps; block cuts the ascending id list
    into contiguous ranges whose sizes differ by at most one; geographic does
    the same over entities sorted west to east (then south to north), with
    entities lacking a position appended in id order.
    """
    if n_lps < 1:
        raise ConfigError([ConfigIssue("n_lps", f"must be >= 1, got {n_lps}")])
    if strategy not in STRATEGIES:
        raise ConfigError([ConfigIssue("partition", f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")])
    ids = sorted(entities)
    if strategy == "round-robin":
        assignment = {eid: eid % n_lps for eid in ids}
    elif strategy == "block":
        assignment = _assign_blocks(ids, n_lps)
    else:
        placed: list[tuple[float, float, int]] = []
        unplaced: list[int] = []
        for eid in ids:
            pos = position(eid) if position is not None else None
            if pos is None:
                unplaced.append(eid)
            else:
                placed.append((pos[0], pos[1], eid))
        ordered = [eid for _, _, eid in sorted(placed)] + unplaced
        assignment = _assign_blocks(ordered, n_lps)
    partition = Partition(assignment=assignment, strategy=strategy, n_lps=n_lps)
    logger.debug("Partition %s over %s LPs: sizes %s", strategy, n_lps, partition.sizes())
    return partition


@dataclass
class CommunicationStats:
    """Per-step message accounting for one LP."""

    local_msgs: int = 0
    remote_msgs: int = 0
    bytes_remote: int = 0
    entities_stepped: int = 0

    @property
    def total(self) -> int:
        return self.local_msgs + self.remote_msgs

    def reset(self) -> None:
        self.local_msgs = 0
        self.remote_msgs = 0
        self.bytes_remote = 0
        self.entities_stepped = 0


@dataclass
class Directory:
    """Current owner of every entity; version bumps once per applied migration batch."""

    owners: dict[int, int] = field(default_factory=dict)
    version: int = 0

    @classmethod
    def from_partition(cls, partition: Partition) -> "Directory":
        return cls(owners=dict(partition.assignment))

    def owner(self, entity_id: int) -> int:
        try:
            return self.owners[entity_id]
        except KeyError:
            raise RoutingError(f"entity {entity_id} not in directory (version {self.version})", entity=entity_id) from None

    def loads(self, n_lps: int) -> list[int]:
        counts = [0] * n_lps
        for lp in self.owners.values():
            counts[lp] += 1
        return counts

    def move(self, moves: Iterable[tuple[int, int]]) -> None:
        """Apply (entity, new owner) pairs as one batch; an empty batch keeps the version."""
        moves = list(moves)
        if not moves:
            return
        for eid, lp in moves:
            self.owners[eid] = lp
        self.version += 1

    def add(self, entity_id: int, lp: int) -> None:
        self.owners[entity_id] = lp

    def remove(self, entity_id: int) -> None:
        self.owners.pop(entity_id, None)


def route_message(
    directory: Directory,
    msg,
    sender_lp: int,
    stats: CommunicationStats | None = None,
    size: int = 0,
) -> int:
    """Owner LP of msg.dst; counts the message as local or remote for sender_lp."""
    owner = directory.owner(msg.dst)
    if stats is not None:
        if owner == sender_lp:
            stats.local_msgs += 1
        else:
            stats.remote_msgs += 1
            stats.bytes_remote += size
    return owner
