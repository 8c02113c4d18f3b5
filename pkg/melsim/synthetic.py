"""
Synthetic messaging models for exercising the kernel, the parallel runtime
and migration without a road network.
"""

from __future__ import annotations

import hashlib
from typing import Any

from melsim import codec
from melsim.kernel import BaseModel, EventMessage, SimulatedEntity, StepContext
from melsim.partition import Partition

COUNTER = "counter"
PING_PONG = "ping-pong"
CLIQUE = "clique"
RANDOM = "random"

# Two-clique workload
CLIQUE_SIZE = 50
CLIQUE_FANOUT = 4  # messages per entity per step
CLIQUE_INTERNAL = 0.95


class CounterModel(BaseModel):
    """Each entity's state counts the steps it has run."""

    def __init__(self, n: int) -> None:
        self.n = n

    def initial_entities(self, config: Any = None) -> list[SimulatedEntity]:
        return [SimulatedEntity(i, COUNTER, 0) for i in range(self.n)]

    def behavior(self, kind: str):
        return _count

    def observe(self, entity: SimulatedEntity) -> dict[str, float]:
        return {"count": entity.state}


def _count(entity: SimulatedEntity, inbox: list[EventMessage], ctx: StepContext) -> int:
    return entity.state + 1


class PingPongModel(BaseModel):
    """Two entities passing one ball back and forth; entity 0 serves at step 0."""

    def initial_entities(self, config: Any = None) -> list[SimulatedEntity]:
        return [SimulatedEntity(0, PING_PONG, (0, True)), SimulatedEntity(1, PING_PONG, (0, False))]

    def behavior(self, kind: str):
        return _ping_pong

    def observe(self, entity: SimulatedEntity) -> dict[str, float]:
        return {"received": entity.state[0]}


def _ping_pong(entity: SimulatedEntity, inbox: list[EventMessage], ctx: StepContext) -> tuple[int, bool]:
    received, serving = entity.state
    if serving or inbox:
        ctx.send(1 - entity.id, b"ball")
    return (received + len(inbox), False)


def _fold(state: bytes, inbox: list[EventMessage]) -> bytes:
    digest = hashlib.blake2b(state, digest_size=16)
    for msg in inbox:
        digest.update(codec.encode((msg.src, msg.seq, msg.payload)))
    return digest.digest()


class RandomMessagingModel(BaseModel):
    """n entities, each sending `fanout` messages per step to uniform destinations with delay 1..max_delay."""

    def __init__(self, n: int, fanout: int = 2, max_delay: int = 3) -> None:
        self.n = n
        self.fanout = fanout
        self.max_delay = max_delay

    def initial_entities(self, config: Any = None) -> list[SimulatedEntity]:
        return [SimulatedEntity(i, RANDOM, b"") for i in range(self.n)]

    def behavior(self, kind: str):
        return self._step

    def _step(self, entity: SimulatedEntity, inbox: list[EventMessage], ctx: StepContext) -> bytes:
        for k in range(self.fanout):
            dst = ctx.draw() % self.n
            delay = 1 + ctx.draw() % self.max_delay
            ctx.send(dst, codec.encode((ctx.step, k)), delay=delay)
        return _fold(entity.state, inbox)

    def observe(self, entity: SimulatedEntity) -> dict[str, float]:
        return {"entities": 1}


class TwoCliqueModel(BaseModel):
    """
    Two cliques of `size` entities; every message stays inside the sender's
    clique with probability `internal`, else goes to the other clique.
    """

    def __init__(self, size: int = CLIQUE_SIZE, fanout: int = CLIQUE_FANOUT, internal: float = CLIQUE_INTERNAL) -> None:
        self.size = size
        self.fanout = fanout
        self.internal = internal

    def clique_of(self, entity_id: int) -> int:
        return entity_id // self.size

    def initial_entities(self, config: Any = None) -> list[SimulatedEntity]:
        return [SimulatedEntity(i, CLIQUE, 0) for i in range(2 * self.size)]

    def behavior(self, kind: str):
        return self._step

    def _step(self, entity: SimulatedEntity, inbox: list[EventMessage], ctx: StepContext) -> int:
        home = self.clique_of(entity.id)
        for _ in range(self.fanout):
            clique = home if ctx.uniform() < self.internal else 1 - home
            offset = ctx.draw() % self.size
            dst = clique * self.size + offset
            if dst == entity.id:
                dst = clique * self.size + (offset + 1) % self.size
            ctx.send(dst, b"")
        return entity.state + len(inbox)

    def observe(self, entity: SimulatedEntity) -> dict[str, float]:
        return {"received": entity.state}


def two_clique_partition(size: int = CLIQUE_SIZE, major: float = 0.7) -> Partition:
    """2 LPs, 50/50 entity split: `major` of clique 0 on LP0 and `major` of clique 1 on LP1."""
    cut = round(size * major)
    assignment = {}
    for i in range(size):
        assignment[i] = 0 if i < cut else 1
        assignment[size + i] = 1 if i < cut else 0
    return Partition(assignment=assignment, strategy="block", n_lps=2)

