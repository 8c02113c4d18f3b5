"""
State transfer between the link level and the cell level.

refine_state turns each LinkState of a region into a lattice of
MicroVehicles; coarsen_state aggregates lattices back into LinkStates.
Vehicle counts survive the round trip exactly and the mean speed within
one speed quantum (cell_length / fine step).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping

from melsim.errors import RefinementError
from melsim.macro import NO_DEST, LinkState, roam_options
from melsim.micro import MicroVehicle
from melsim.roadgraph import RoadGraph

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Quantum:
    """Speed unit of the cell level: one cell per fine step, in m/s."""

    cell_length: float
    fine_step_s: float
    vmax: int

    @property
    def mps(self) -> float:
        return self.cell_length / self.fine_step_s

    def to_cells(self, speed_mps: float) -> int:
        return min(max(math.floor(speed_mps / self.mps + 0.5), 0), self.vmax)

    def to_mps(self, cells: float) -> float:
        return cells * self.mps


def placement(n: int, cells: int) -> list[int]:
    """Cells occupied by n vehicles on a lattice of `cells`: floor(i * L / n)."""
    return [i * cells // n for i in range(n)]


def route_for(
    graph: RoadGraph,
    arc: int,
    dest: int,
    choose: Callable[[list[int]], int] | None,
) -> tuple:
    """Nodes after the arc's head toward dest; a roaming vehicle gets one chosen next node."""
    head = graph.arcs[arc].dst
    if dest != NO_DEST:
        return graph.route_nodes(head, dest)
    options = roam_options(graph, graph.arcs[arc])
    if not options:
        return ()
    pick = choose(options) if choose is not None else 0
    return (graph.arcs[options[pick]].dst,)


def refine_link(
    link: LinkState,
    arc: int,
    graph: RoadGraph,
    quantum: Quantum,
    first_id: int,
    choose: Callable[[int, list[int]], int] | None = None,
) -> tuple[MicroVehicle, ...]:
    """Lattice for one link, FIFO head on the highest occupied cell; ids first_id, first_id + 1, ..."""
    cells = graph.arcs[arc].cells
    n = link.count
    if n > cells:
        raise RefinementError(f"link {arc} holds {n} vehicles but has only {cells} cells", entity=arc)
    speed = quantum.to_cells(link.mean_speed)
    positions = placement(n, cells)
    lattice = []
    for i, (vid, dest, _) in enumerate(link.vehicles):
        mid = first_id + i
        pick = (lambda options, _m=mid: choose(_m, options)) if choose is not None else None
        lattice.append(
            MicroVehicle(
                id=mid,
                edge_id=arc,
                cell=positions[n - 1 - i],
                speed=speed,
                route=route_for(graph, arc, dest, pick),
                dest=dest,
                coarse_vid=vid,
            )
        )
    lattice.sort(key=lambda m: m.cell)
    return tuple(lattice)


def refine_state(
    links: Mapping[int, LinkState],
    graph: RoadGraph,
    quantum: Quantum,
    next_id: int,
    choose: Callable[[int, list[int]], int] | None = None,
) -> tuple[dict[int, tuple[MicroVehicle, ...]], dict[int, tuple[int, ...]], int]:
    """Lattices per arc, mapping arc -> micro ids, and the next unused id."""
    lattices: dict[int, tuple[MicroVehicle, ...]] = {}
    mapping: dict[int, tuple[int, ...]] = {}
    for arc in sorted(links):
        lattice = refine_link(links[arc], arc, graph, quantum, next_id, choose)
        lattices[arc] = lattice
        mapping[arc] = tuple(sorted(m.id for m in lattice))
        next_id += len(lattice)
    return lattices, mapping, next_id


def coarsen_link(
    lattice: tuple[MicroVehicle, ...],
    template: LinkState,
    arc: int,
    graph: RoadGraph,
    quantum: Quantum,
    step: int,
    waiting: tuple = (),
) -> LinkState:
    """
    Aggregate one lattice into template's link fields at boundary `step`.

    Vehicles within the last capacity_per_step cells are ready to leave now;
    the rest keep a share of the free-flow time proportional to the distance
    still to cover. `waiting` vehicles (arrived but not yet on the lattice)
    join the tail of the queue.
    """
    a = graph.arcs[arc]
    window = a.capacity_per_step
    vehicles = []
    for veh in sorted(lattice, key=lambda m: -m.cell):
        if veh.cell >= a.cells - window:
            ready = step
        else:
            ready = step + max(1, math.ceil(template.free_flow_steps * (a.cells - 1 - veh.cell) / a.cells))
        vehicles.append((veh.coarse_vid, veh.dest, ready))
    vehicles.extend((vid, dest, step + template.free_flow_steps) for vid, dest in waiting)
    queued = sum(1 for v in vehicles if v[2] <= step)
    mean_speed = quantum.to_mps(sum(m.speed for m in lattice) / len(lattice)) if lattice else 0.0
    return replace(template, vehicles=tuple(vehicles), queued=queued, mean_speed=mean_speed)


def coarsen_state(
    lattices: Mapping[int, tuple[MicroVehicle, ...]],
    templates: Mapping[int, LinkState],
    graph: RoadGraph,
    quantum: Quantum,
    step: int,
    waiting: Mapping[int, tuple] | None = None,
) -> dict[int, LinkState]:
    waiting = waiting or {}
    return {
        arc: coarsen_link(lattices.get(arc, ()), templates[arc], arc, graph, quantum, step, waiting.get(arc, ()))
        for arc in sorted(templates)
    }
