"""
Microscopic traffic: Nagel-Schreckenberg cellular automaton over arc lattices.

A lattice maps arc index -> vehicles sorted by ascending cell (one vehicle
per cell). All vehicles update in parallel from the previous lattice:
accelerate, brake to the gap ahead, random slowdown with probability
p_brake, advance. The vehicle closest to an arc end may cross it when the
crossing rules allow; at most one vehicle enters a given arc per fine step,
chosen by a priority that rotates with the fine step index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from melsim import codec
from melsim.errors import InvariantError

logger = logging.getLogger(__name__)

DEFAULT_VMAX = 5  # cells per fine step
DEFAULT_P_BRAKE = 0.2

# Crossing outcomes at an arc end
INSIDE = "inside"  # next arc is simulated in the same lattice set
EXIT = "exit"  # next arc lies outside (handed to the coarse level)
SINK = "sink"  # destination reached
BLOCKED = "blocked"

HOLD = -1  # candidate marker for vehicles waiting to enter an arc from outside

Lattices = dict[int, tuple["MicroVehicle", ...]]


@codec.register
@dataclass(frozen=True)
class MicroVehicle:
    id: int
    edge_id: int
    cell: int
    speed: int
    route: tuple  # node indices remaining after this arc's head node
    dest: int = -1  # destination node index, -1 while roaming
    coarse_vid: int = -1


@dataclass(frozen=True)
class NaschParams:
    vmax: int = DEFAULT_VMAX
    p_brake: float = DEFAULT_P_BRAKE


class CrossingRules(Protocol):
    def cells(self, arc: int) -> int: ...

    def next_target(self, vehicle: MicroVehicle) -> tuple[str, int | None]: ...

    def can_leave(self, vehicle: MicroVehicle, target: int | None) -> bool: ...

    def leave(self, vehicle: MicroVehicle, target: int | None) -> None: ...

    def advance(self, vehicle: MicroVehicle, arc: int, cell: int, speed: int) -> MicroVehicle: ...

    def waiting(self) -> list[int]: ...

    def admit(self, arc: int) -> MicroVehicle: ...


@dataclass
class FineStepResult:
    lattices: Lattices
    # (vehicle id, speed before, speed after) in cells per fine step
    speeds: list[tuple[int, int, int]] = field(default_factory=list)
    exited: list[tuple[MicroVehicle, int | None]] = field(default_factory=list)
    arrived: list[MicroVehicle] = field(default_factory=list)
    admitted: list[MicroVehicle] = field(default_factory=list)
    internal_moves: int = 0


def _entry_winners(
    lattices: Lattices,
    params: NaschParams,
    rules: CrossingRules,
    fine_step_index: int,
    targets: dict[int, tuple[str, int | None]],
) -> dict[int, int]:
    candidates: dict[int, list[int]] = {}
    for arc, vehicles in lattices.items():
        if not vehicles:
            continue
        lead = vehicles[-1]
        kind, target = targets[lead.id]
        reach = min(lead.speed + 1, params.vmax)
        if kind == INSIDE and reach > rules.cells(arc) - 1 - lead.cell:
            candidates.setdefault(target, []).append(arc)
    for arc in rules.waiting():
        candidates.setdefault(arc, []).append(HOLD)
    return {
        target: sorted(sources)[fine_step_index % len(sources)]
        for target, sources in candidates.items()
    }


def _velocities(
    vehicles: tuple[MicroVehicle, ...],
    lead_gap: int,
    params: NaschParams,
    uniform: Callable[[int], float],
) -> list[int]:
    """Accelerate, brake to the gap ahead and apply random slowdown for one arc at once."""
    n = len(vehicles)
    cells = np.fromiter((veh.cell for veh in vehicles), dtype=np.int64, count=n)
    speeds = np.fromiter((veh.speed for veh in vehicles), dtype=np.int64, count=n)
    gaps = np.empty(n, dtype=np.int64)
    gaps[:-1] = np.diff(cells) - 1
    gaps[-1] = lead_gap
    v = np.minimum(np.minimum(speeds + 1, params.vmax), gaps)
    if params.p_brake > 0:
        draws = np.fromiter((uniform(veh.id) for veh in vehicles), dtype=np.float64, count=n)
        v = np.where(draws < params.p_brake, np.maximum(v - 1, 0), v)
    return v.tolist()


def fine_step(
    lattices: Lattices,
    params: NaschParams,
    rules: CrossingRules,
    fine_step_index: int,
    uniform: Callable[[int], float],
) -> FineStepResult:
    """Advance every lattice by one fine step; uniform(vehicle id) draws that vehicle's slowdown variate."""
    targets = {
        vehicles[-1].id: rules.next_target(vehicles[-1])
        for vehicles in lattices.values()
        if vehicles
    }
    winners = _entry_winners(lattices, params, rules, fine_step_index, targets)
    result = FineStepResult(lattices={})
    placed: dict[int, list[MicroVehicle]] = {arc: [] for arc in lattices}

    for arc in sorted(lattices):
        vehicles = lattices[arc]
        if not vehicles:
            continue
        length = rules.cells(arc)
        lead = vehicles[-1]
        lead_gap = length - 1 - lead.cell
        kind, target = targets[lead.id]
        if kind == INSIDE and winners.get(target) == arc:
            ahead = lattices.get(target, ())
            lead_gap += ahead[0].cell if ahead else rules.cells(target)
        elif kind in (EXIT, SINK) and rules.can_leave(lead, target):
            lead_gap = params.vmax
        velocities = _velocities(vehicles, lead_gap, params, uniform)

        for veh, v in zip(vehicles, velocities):
            result.speeds.append((veh.id, veh.speed, v))
            position = veh.cell + v
            if position < length:
                placed[arc].append(replace(veh, cell=position, speed=v))
            elif veh is not lead:
                raise InvariantError(f"vehicle {veh.id} overran the end of arc {arc}", entity=veh.id)
            elif kind == INSIDE:
                moved = rules.advance(veh, target, position - length, v)
                placed.setdefault(target, []).append(moved)
                result.internal_moves += 1
            elif kind == EXIT:
                rules.leave(veh, target)
                result.exited.append((replace(veh, speed=v), target))
            elif kind == SINK:
                rules.leave(veh, None)
                result.arrived.append(replace(veh, speed=v))
            else:
                raise InvariantError(f"vehicle {veh.id} overran the end of arc {arc}", entity=veh.id)

    for target, source in sorted(winners.items()):
        if source != HOLD:
            continue
        ahead = lattices.get(target, ())
        if ahead and ahead[0].cell == 0:
            continue
        entrant = rules.admit(target)
        placed.setdefault(target, []).append(entrant)
        result.admitted.append(entrant)
        result.speeds.append((entrant.id, 0, 0))

    for arc, vehicles in placed.items():
        vehicles.sort(key=lambda m: m.cell)
        for a, b in zip(vehicles, vehicles[1:]):
            if a.cell == b.cell:
                raise InvariantError(f"cell collision on arc {arc} cell {a.cell}: vehicles {a.id} and {b.id}", entity=b.id)
        result.lattices[arc] = tuple(vehicles)
    return result

