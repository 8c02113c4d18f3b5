"""
Macroscopic link model: point queue with free-flow delay and discharge capacity.

A link holds its vehicles in FIFO order. A vehicle that entered at step t
is ready to leave at t + free_flow_steps; at most capacity_per_step ready
vehicles leave per step, head of line first, and only into downstream links
that granted space. Each step a link grants its upstream links
cells - count - previous grant places, split evenly, so arrivals can never
push a link over its cell count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

from melsim import codec
from melsim.errors import InvariantError
from melsim.roadgraph import Arc, RoadGraph

logger = logging.getLogger(__name__)

NO_DEST = -1

# Payload kinds exchanged between links (and sessions standing in for them)
VEHICLES = "v"
GRANT = "g"


@codec.register
@dataclass(frozen=True)
class LinkState:
    edge_id: int
    vehicles: tuple = ()  # (vehicle id, dest node or -1, ready step), head first
    queued: int = 0
    mean_speed: float = 0.0
    free_flow_steps: int = 1
    granted: int = 0  # places promised to upstream links last step
    held: tuple = ()  # (vehicle id, dest) waiting at the source for space
    arrived: int = 0  # vehicles that reached their destination at this link's head
    in_transit: int = 0  # vehicles sent downstream this step, arriving next step
    budgets: dict = field(default_factory=dict)  # downstream arc -> latest grant received
    grants_out: dict = field(default_factory=dict)  # upstream arc -> last grant sent

    @property
    def count(self) -> int:
        return len(self.vehicles)


def free_flow_steps(length_m: float, speed_mps: float, step_s: float) -> int:
    return max(1, math.ceil(length_m / (speed_mps * step_s)))


def split_grant(total: int, upstream: list[int], step: int) -> dict[int, int]:
    """Even split; the remainder goes to upstream arcs in an order rotated by step."""
    if not upstream:
        return {}
    base, extra = divmod(total, len(upstream))
    shares = {}
    for pos, arc in enumerate(upstream):
        rank = (pos - step) % len(upstream)
        shares[arc] = base + (1 if rank < extra else 0)
    return shares


def roam_options(graph: RoadGraph, arc: Arc) -> list[int]:
    """Next arcs for a vehicle without destination: no U-turn unless it is the only way on."""
    options = graph.downstream(arc.index)
    forward = [a for a in options if graph.arcs[a].dst != arc.src]
    return forward or options


def vehicles_payload(vehicles: Iterable[tuple[int, int]]) -> bytes:
    return codec.encode((VEHICLES, tuple(vehicles)))


def grant_payload(arc: int, value: int) -> bytes:
    return codec.encode((GRANT, arc, value))


def parse_inbox(payloads: Iterable[bytes]) -> tuple[list[tuple[int, int]], dict[int, int]]:
    """Split message payloads into arriving vehicles and {downstream arc: grant}."""
    arrivals: list[tuple[int, int]] = []
    grants: dict[int, int] = {}
    for raw in payloads:
        body = codec.decode(raw)
        if body[0] == VEHICLES:
            arrivals.extend(tuple(v) for v in body[1])
        elif body[0] == GRANT:
            grants[body[1]] = body[2]
    return arrivals, grants


@dataclass
class LinkStepOutput:
    state: LinkState
    # downstream arc -> vehicles sent (vid, dest)
    sent: dict[int, list[tuple[int, int]]]
    # upstream arc -> new grant value (only changed values)
    grants: dict[int, int]


def link_step(
    state: LinkState,
    arc: Arc,
    graph: RoadGraph,
    step: int,
    arrivals: list[tuple[int, int]],
    grants_in: Mapping[int, int],
    demand: tuple = (),
    choose: Callable[[list[int]], int] | None = None,
    free_flow_speed: float = 15.0,
) -> LinkStepOutput:
    """One coarse step of one link; see the module docstring for the rules."""
    vehicles = list(state.vehicles)
    ready_at = step + state.free_flow_steps
    vehicles.extend((vid, dest, ready_at) for vid, dest in arrivals)
    budgets = dict(state.budgets)
    budgets.update(grants_in)

    sent: dict[int, list[tuple[int, int]]] = {}
    used: dict[int, int] = {}
    arrived = state.arrived
    discharged = 0
    while vehicles and discharged < arc.capacity_per_step and vehicles[0][2] <= step:
        vid, dest, _ = vehicles[0]
        if dest == arc.dst:
            vehicles.pop(0)
            arrived += 1
            discharged += 1
            continue
        if dest != NO_DEST:
            nxt = graph.next_arc(arc.dst, dest)
        else:
            options = roam_options(graph, arc)
            nxt = options[choose(options) if choose is not None else 0] if options else None
        if nxt is None:
            # dead end or unreachable destination: the vehicle leaves the network here
            vehicles.pop(0)
            arrived += 1
            discharged += 1
            continue
        if budgets.get(nxt, 0) - used.get(nxt, 0) <= 0:
            break
        used[nxt] = used.get(nxt, 0) + 1
        sent.setdefault(nxt, []).append((vid, dest))
        vehicles.pop(0)
        discharged += 1
    in_transit = sum(len(v) for v in sent.values())

    held = list(state.held) + list(demand)
    while held and len(vehicles) + state.granted < arc.cells:
        vid, dest = held.pop(0)
        vehicles.append((vid, dest, ready_at))

    total_grant = arc.cells - len(vehicles) - state.granted
    if total_grant < 0:
        raise InvariantError(
            f"link {arc.index} over-committed: {len(vehicles)} vehicles + {state.granted} granted > {arc.cells} cells",
            step=step,
            entity=arc.index,
        )
    shares = split_grant(total_grant, graph.upstream(arc.index), step)
    grants_out = dict(state.grants_out)
    changed = {}
    for up, value in shares.items():
        if grants_out.get(up, 0) != value:
            changed[up] = value
            grants_out[up] = value

    count = len(vehicles)
    if count > arc.cells:
        raise InvariantError(f"link {arc.index} holds {count} vehicles in {arc.cells} cells", step=step, entity=arc.index)
    queued = sum(1 for v in vehicles if v[2] <= step)
    mean_speed = free_flow_speed * (count - queued) / count if count else 0.0
    new_state = replace(
        state,
        vehicles=tuple(vehicles),
        queued=queued,
        mean_speed=mean_speed,
        granted=total_grant,
        held=tuple(held),
        arrived=arrived,
        in_transit=in_transit,
        budgets={k: v for k, v in budgets.items() if v},
        grants_out={k: v for k, v in grants_out.items() if v},
    )
    return LinkStepOutput(state=new_state, sent=sent, grants=changed)


def coarse_step(
    links: dict[int, LinkState],
    graph: RoadGraph,
    step: int,
    inflight: dict[int, tuple[list, dict]] | None = None,
    demand: Mapping[int, tuple] | None = None,
    choose: Callable[[int, list[int]], int] | None = None,
    free_flow_speed: float = 15.0,
) -> tuple[dict[int, LinkState], dict[int, tuple[list, dict]]]:
    """
    Step every link once, in memory.

    inflight holds what links sent each other last step (arc -> (vehicles,
    grants)); the returned dict is what they sent this step.
    """
    inflight = inflight or {}
    demand = demand or {}
    new_links: dict[int, LinkState] = {}
    outgoing: dict[int, tuple[list, dict]] = {}
    for idx in sorted(links):
        arrivals, grants = inflight.get(idx, ([], {}))
        pick = (lambda options, _i=idx: choose(_i, options)) if choose is not None else None
        out = link_step(
            links[idx], graph.arcs[idx], graph, step, arrivals, grants,
            demand.get(idx, ()), pick, free_flow_speed,
        )
        new_links[idx] = out.state
        for nxt, vehicles in out.sent.items():
            outgoing.setdefault(nxt, ([], {}))[0].extend(vehicles)
        for up, value in out.grants.items():
            outgoing.setdefault(up, ([], {}))[1][idx] = value
    return new_links, outgoing
