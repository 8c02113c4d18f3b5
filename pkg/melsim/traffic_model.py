"""
Traffic model family: one link entity per directed arc at level 0, one
session entity per refinement session at level 1, an emissions accumulator
at level 2.

Link entities run the point-queue model of melsim.macro. A session entity
stands in for the links of its region: it keeps a Nagel-Schreckenberg
lattice per region arc, runs R fine steps per coarse step, and talks to the
links around it with the same vehicle and grant payloads the links use, so
the rest of the network cannot tell the region is refined.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from melsim import codec
from melsim.emissions import EmissionAccumulator, EmissionModel
from melsim.errors import ConfigError, ConfigIssue, InvariantError
from melsim.kernel import (
    BaseModel,
    EntityStore,
    EventMessage,
    RandomStream,
    SimulatedEntity,
    StepContext,
    draw,
    to_uniform,
)
from melsim.macro import (
    GRANT,
    NO_DEST,
    VEHICLES,
    LinkState,
    free_flow_steps,
    grant_payload,
    link_step,
    parse_inbox,
    roam_options,
    split_grant,
    vehicles_payload,
)
from melsim.micro import BLOCKED, EXIT, INSIDE, SINK, MicroVehicle, NaschParams, fine_step
from melsim.multilevel import (
    HOTSPOT_REGION,
    CrossLevelBuffer,
    RefinementSession,
    exchange_at_boundary,
    step_continuous,
)
from melsim.refinement import Quantum, coarsen_state, refine_state, route_for
from melsim.roadgraph import RoadGraph
from melsim.v2v import DEFAULT_RANGE_M, flood_step, wireless_neighbors

logger = logging.getLogger(__name__)

LINK = "link"
SESSION = "session"

DEFAULT_FREE_FLOW_MPS = 15.0

# Counters of a micro vehicle's random stream at a fine step
_SLOWDOWN = 0
_ROUTE = 1


@dataclass(frozen=True)
class Injection:
    """count vehicles entering arc at step, bound for dest (-1 roams)."""

    step: int
    arc: int
    count: int
    dest: int = NO_DEST


@codec.register
@dataclass(frozen=True)
class SessionState:
    session_id: int
    region: tuple
    s0: int
    ratio: int
    lattices: dict  # arc -> tuple[MicroVehicle, ...]
    hold: dict  # arc -> ((vid, dest), ...) arrived, not yet on the lattice
    held: dict  # arc -> ((vid, dest), ...) source demand waiting for space
    templates: dict  # arc -> LinkState frozen at open
    budgets: dict  # arc -> {downstream arc: latest grant}
    granted: dict  # arc -> places promised to outside upstream links
    grants_out: dict  # arc -> {upstream arc: last grant sent}
    in_transit: dict  # arc -> vehicles handed downstream this step
    arrived: dict  # arc -> vehicles that reached their destination
    next_id: int
    fine_clock: int = 0
    emissions: EmissionAccumulator = field(default_factory=EmissionAccumulator)
    informed: dict = field(default_factory=dict)  # micro id -> fine step told of the hazard
    seen: int = 0  # micro vehicles that were ever on a lattice
    initial: int = 0
    entered: int = 0
    injected: int = 0
    exited: int = 0
    speed_in: float = 0.0

    @property
    def on_lattice(self) -> int:
        return sum(len(v) for v in self.lattices.values())

    @property
    def waiting(self) -> int:
        return sum(len(v) for v in self.hold.values())


class SessionRules:
    """Crossing rules for one coarse step of a session."""

    def __init__(self, model: "TrafficModel", state: SessionState, ctx: StepContext, hold: dict, budgets: dict) -> None:
        self.model = model
        self.graph = model.graph
        self.region = set(state.region)
        self.ratio = state.ratio
        self.ctx = ctx
        self.hold = hold
        self.budgets = budgets
        self.granted = state.granted
        self.next_id = state.next_id
        self.buffer = CrossLevelBuffer()
        self.used: dict[tuple[int, int], int] = {}
        self.exits: dict[int, int] = {}
        self.arrived: dict[int, int] = {}
        self.occupancy: dict[int, int] = {}
        self.fine_index = 0  # global fine index of the step being run
        self.session_fine = 0  # fine steps since the session opened

    def begin(self, lattices: dict, session_fine: int) -> None:
        self.session_fine = session_fine
        self.fine_index = self.ctx.step * self.ratio + session_fine % self.ratio
        self.occupancy = {arc: len(lattices[arc]) + len(self.hold[arc]) for arc in lattices}

    def cells(self, arc: int) -> int:
        return self.graph.arcs[arc].cells

    def next_target(self, vehicle: MicroVehicle) -> tuple[str, int | None]:
        head = self.graph.arcs[vehicle.edge_id].dst
        if vehicle.dest == head or not vehicle.route:
            return SINK, None
        target = self.graph.arc_between(head, vehicle.route[0])
        if target is None:
            return SINK, None
        if target not in self.region:
            return EXIT, target
        if self.occupancy[target] + self.granted.get(target, 0) >= self.cells(target):
            return BLOCKED, None
        return INSIDE, target

    def can_leave(self, vehicle: MicroVehicle, target: int | None) -> bool:
        if target is None:
            return True
        arc = vehicle.edge_id
        if self.exits.get(arc, 0) >= self.graph.arcs[arc].capacity_per_step:
            return False
        return self.budgets.get(arc, {}).get(target, 0) - self.used.get((arc, target), 0) > 0

    def leave(self, vehicle: MicroVehicle, target: int | None) -> None:
        arc = vehicle.edge_id
        if target is None:
            self.arrived[arc] = self.arrived.get(arc, 0) + 1
            return
        self.used[(arc, target)] = self.used.get((arc, target), 0) + 1
        self.exits[arc] = self.exits.get(arc, 0) + 1
        self.buffer.post(target, codec.encode((arc, vehicle.coarse_vid, vehicle.dest)), self.fine_index, self.ratio)

    def _choose(self, mid: int, options: list[int]) -> int:
        return self.ctx.draw_for(mid, self.session_fine, _ROUTE) % len(options)

    def advance(self, vehicle: MicroVehicle, arc: int, cell: int, speed: int) -> MicroVehicle:
        if vehicle.dest != NO_DEST:
            route = vehicle.route[1:]
        else:
            options = roam_options(self.graph, self.graph.arcs[arc])
            route = (self.graph.arcs[options[self._choose(vehicle.id, options)]].dst,) if options else ()
        return replace(vehicle, edge_id=arc, cell=cell, speed=speed, route=route)

    def waiting(self) -> list[int]:
        return sorted(arc for arc, queue in self.hold.items() if queue)

    def admit(self, arc: int) -> MicroVehicle:
        (vid, dest), rest = self.hold[arc][0], self.hold[arc][1:]
        self.hold[arc] = rest
        mid = self.next_id
        self.next_id += 1
        route = route_for(self.graph, arc, dest, lambda options: self._choose(mid, options))
        return MicroVehicle(id=mid, edge_id=arc, cell=0, speed=0, route=route, dest=dest, coarse_vid=vid)


class TrafficModel(BaseModel):
    """Links of a road graph, refinable into NaSch lattices for a session's duration."""

    def __init__(
        self,
        graph: RoadGraph,
        *,
        seed: int = 0,
        population: int = 0,
        roam: bool = True,
        demand: Iterable[Injection] = (),
        step_s: float = 3.0,
        ratio: int = 3,
        nasch: NaschParams | None = None,
        emission: EmissionModel | None = None,
        v2v_range_m: float = DEFAULT_RANGE_M,
        free_flow_mps: float = DEFAULT_FREE_FLOW_MPS,
        watch: dict[int, Any] | None = None,
        density_threshold: int = 0,
    ) -> None:
        self.graph = graph
        self.seed = seed
        self.population = population
        self.roam = roam
        self.step_s = step_s
        self.ratio = ratio
        self.nasch = nasch or NaschParams()
        self.emission = emission or EmissionModel()
        self.v2v_range_m = v2v_range_m
        self.free_flow_mps = free_flow_mps
        self.watch = dict(watch or {})
        self.density_threshold = density_threshold
        self.quantum = Quantum(graph.cell_length, step_s / ratio, self.nasch.vmax)
        projection = graph.projection()
        self._xy = [projection.to_xy(node) for node in graph.nodes]
        self.demand = self._demand_table(demand)

    # construction

    def _speed(self, arc: int) -> float:
        return self.graph.arcs[arc].maxspeed_mps or self.free_flow_mps

    def _demand_table(self, rows: Iterable[Injection]) -> dict[tuple[int, int], tuple]:
        table: dict[tuple[int, int], tuple] = {}
        next_vid = self.population
        issues = []
        for i, row in enumerate(rows):
            if not 0 <= row.arc < self.graph.arc_count:
                issues.append(ConfigIssue(f"demand[{i}].arc", f"no arc {row.arc}"))
                continue
            if row.count < 0 or row.step < 0:
                issues.append(ConfigIssue(f"demand[{i}]", "step and count must be >= 0"))
                continue
            if row.dest != NO_DEST and not 0 <= row.dest < self.graph.node_count:
                issues.append(ConfigIssue(f"demand[{i}].dest", f"no node {row.dest}"))
                continue
            vehicles = tuple((next_vid + k, row.dest) for k in range(row.count))
            next_vid += row.count
            key = (row.step, row.arc)
            table[key] = table.get(key, ()) + vehicles
        if issues:
            raise ConfigError(issues)
        return table

    def _population_dest(self, vid: int) -> int:
        if self.roam:
            return NO_DEST
        value, _ = draw(RandomStream(self.seed, vid, 0, 0))
        return value % self.graph.node_count

    def demand_at(self, step: int, arc: int) -> tuple:
        return self.demand.get((step, arc), ())

    def initial_entities(self, config: Any = None) -> list[SimulatedEntity]:
        """One link per arc; the population is placed round-robin over arcs with free cells."""
        arcs = self.graph.arcs
        capacity = sum(a.cells for a in arcs)
        if self.population > capacity:
            raise ConfigError(
                [ConfigIssue("scenario.population.vehicles", f"{self.population} vehicles exceed {capacity} cells")]
            )
        placed: list[list[tuple[int, int, int]]] = [[] for _ in arcs]
        vid = 0
        cursor = 0
        while vid < self.population:
            arc = arcs[cursor % len(arcs)]
            cursor += 1
            if len(placed[arc.index]) < arc.cells:
                placed[arc.index].append((vid, self._population_dest(vid), 0))
                vid += 1
        entities = []
        for arc in arcs:
            ffs = free_flow_steps(arc.length_m, self._speed(arc.index), self.step_s)
            vehicles = tuple(placed[arc.index])
            state = LinkState(
                edge_id=arc.index,
                vehicles=vehicles,
                queued=len(vehicles),
                mean_speed=0.0,
                free_flow_steps=ffs,
            )
            entities.append(SimulatedEntity(arc.index, LINK, state))
        logger.info("Traffic model: %s links, %s vehicles placed", len(entities), self.population)
        return entities

    def behavior(self, kind: str):
        if kind == LINK:
            return self._link_step
        if kind == SESSION:
            return self._session_step
        raise KeyError(f"no behavior for entity kind {kind!r}")

    # level 0

    def _link_step(self, entity: SimulatedEntity, inbox: list[EventMessage], ctx: StepContext) -> LinkState:
        arrivals, grants = parse_inbox(m.payload for m in inbox)
        arc = self.graph.arcs[entity.id]
        out = link_step(
            entity.state,
            arc,
            self.graph,
            ctx.step,
            arrivals,
            grants,
            self.demand_at(ctx.step, entity.id),
            lambda options: ctx.draw() % len(options),
            self._speed(entity.id),
        )
        for nxt, vehicles in sorted(out.sent.items()):
            ctx.send(nxt, vehicles_payload(vehicles))
        for up, value in sorted(out.grants.items()):
            ctx.send(up, grant_payload(entity.id, value))
        if entity.id in self.watch and out.state.count >= self.density_threshold > 0:
            ctx.publish(HOTSPOT_REGION, (entity.id, out.state.count))
        return out.state

    # level 1

    def region_for(self, node: Any) -> tuple[int, ...]:
        """Arcs incident to a node (by original node id)."""
        idx = self.graph.node_index(node)
        return tuple(sorted(set(self.graph.in_arcs[idx]) | set(self.graph.out_arcs[idx])))

    def open_session(self, session: RefinementSession, store: EntityStore, step: int) -> SimulatedEntity:
        templates = {arc: store.entities[arc].state for arc in session.region}

        def choose(mid: int, options: list[int]) -> int:
            value, _ = draw(RandomStream(self.seed, mid, 0, _ROUTE))
            return value % len(options)

        first = session.entity_id + 1
        lattices, _, next_id = refine_state(templates, self.graph, self.quantum, first, choose)
        vehicles = [m for lattice in lattices.values() for m in lattice]
        speed_in = self.quantum.to_mps(sum(m.speed for m in vehicles) / len(vehicles)) if vehicles else 0.0
        state = SessionState(
            session_id=session.session_id,
            region=session.region,
            s0=session.s0,
            ratio=session.ratio,
            lattices=lattices,
            hold={arc: () for arc in session.region},
            held={arc: templates[arc].held for arc in session.region},
            templates=templates,
            budgets={arc: dict(templates[arc].budgets) for arc in session.region},
            granted={arc: templates[arc].granted for arc in session.region},
            grants_out={arc: dict(templates[arc].grants_out) for arc in session.region},
            in_transit={arc: 0 for arc in session.region},
            arrived={arc: 0 for arc in session.region},
            next_id=next_id,
            informed={min(m.id for m in vehicles): 0} if vehicles else {},
            seen=len(vehicles),
            initial=len(vehicles),
            speed_in=speed_in,
        )
        logger.debug("Session %s refined %s links holding %s vehicles", session.session_id, len(templates), len(vehicles))
        return SimulatedEntity(session.entity_id, SESSION, state, level=1)

    def _positions(self, lattices: dict) -> dict[int, tuple[float, float]]:
        positions = {}
        for arc_index, lattice in lattices.items():
            arc = self.graph.arcs[arc_index]
            (x1, y1), (x2, y2) = self._xy[arc.src], self._xy[arc.dst]
            for veh in lattice:
                t = (veh.cell + 0.5) / arc.cells
                positions[veh.id] = (x1 + t * (x2 - x1), y1 + t * (y2 - y1))
        return positions

    def _session_step(self, entity: SimulatedEntity, inbox: list[EventMessage], ctx: StepContext) -> SessionState:
        state: SessionState = entity.state
        graph = self.graph
        step = ctx.step
        hold = {arc: tuple(q) for arc, q in state.hold.items()}
        held = {arc: tuple(q) for arc, q in state.held.items()}
        budgets = {arc: dict(b) for arc, b in state.budgets.items()}
        entered = 0
        for msg in inbox:
            body = codec.decode(msg.payload)
            if body[0] == VEHICLES:
                hold[msg.dst] = hold[msg.dst] + tuple(tuple(v) for v in body[1])
                entered += len(body[1])
            elif body[0] == GRANT:
                budgets[msg.dst][body[1]] = body[2]

        lattices = dict(state.lattices)
        injected = 0
        for arc in state.region:
            queue = list(held[arc]) + list(self.demand_at(step, arc))
            cells = graph.arcs[arc].cells
            while queue and len(lattices[arc]) + len(hold[arc]) + state.granted[arc] < cells:
                hold[arc] = hold[arc] + (queue.pop(0),)
                injected += 1
            held[arc] = tuple(queue)

        rules = SessionRules(self, state, ctx, hold, budgets)
        acc = state.emissions
        informed = dict(state.informed)
        seen = state.seen
        fine_dt = self.quantum.fine_step_s
        for f in range(state.ratio):
            session_fine = state.fine_clock + f
            rules.begin(lattices, session_fine)

            def uniform(vid: int, _f: int = session_fine) -> float:
                return to_uniform(ctx.draw_for(vid, _f, _SLOWDOWN))

            result = fine_step(lattices, self.nasch, rules, session_fine, uniform)
            lattices = result.lattices
            seen += len(result.admitted)
            pairs = [
                (self.quantum.to_mps(before), self.quantum.to_mps(after))
                for _, before, after in sorted(result.speeds)
            ]
            acc = step_continuous(self.emission, acc, pairs, fine_dt)
            positions = self._positions(lattices)
            if not informed and positions:
                informed[min(positions)] = session_fine
            adjacency = wireless_neighbors(positions, self.v2v_range_m) if positions else {}
            informed.update(flood_step(informed, adjacency, session_fine))

        exits_by_target: dict[int, list[tuple[int, int]]] = {}
        in_transit = {arc: 0 for arc in state.region}
        for dst, payload in exchange_at_boundary(rules.buffer, step + 1, state.ratio):
            source, vid, dest = codec.decode(payload)
            exits_by_target.setdefault(dst, []).append((vid, dest))
            in_transit[source] += 1
        for dst, vehicles in sorted(exits_by_target.items()):
            ctx.send(dst, vehicles_payload(vehicles))
        exited = sum(in_transit.values())

        granted = dict(state.granted)
        grants_out = {arc: dict(g) for arc, g in state.grants_out.items()}
        region = set(state.region)
        for arc in state.region:
            cells = graph.arcs[arc].cells
            total = cells - len(lattices[arc]) - len(hold[arc]) - state.granted[arc]
            if total < 0:
                raise InvariantError(
                    f"refined link {arc} over-committed: {len(lattices[arc]) + len(hold[arc])} vehicles "
                    f"+ {state.granted[arc]} granted > {cells} cells",
                    step=step,
                    entity=entity.id,
                )
            outside = [up for up in graph.upstream(arc) if up not in region]
            if not outside:
                granted[arc] = 0
                continue
            granted[arc] = total
            for up, value in sorted(split_grant(total, outside, step).items()):
                if grants_out[arc].get(up, 0) != value:
                    grants_out[arc][up] = value
                    ctx.send(up, grant_payload(arc, value))

        arrived = {arc: state.arrived[arc] + rules.arrived.get(arc, 0) for arc in state.region}
        return replace(
            state,
            lattices=lattices,
            hold=hold,
            held=held,
            budgets={arc: {k: v for k, v in b.items() if v} for arc, b in budgets.items()},
            granted=granted,
            grants_out={arc: {k: v for k, v in g.items() if v} for arc, g in grants_out.items()},
            in_transit=in_transit,
            arrived=arrived,
            next_id=rules.next_id,
            fine_clock=state.fine_clock + state.ratio,
            emissions=acc,
            informed=informed,
            seen=seen,
            entered=state.entered + entered,
            injected=state.injected + injected,
            exited=state.exited + exited,
        )

    def close_session(
        self, session: RefinementSession, entity: SimulatedEntity, store: EntityStore, step: int
    ) -> dict[str, Any]:
        """Write coarsened link states back and return the session's summary row."""
        state: SessionState = entity.state
        region = set(state.region)
        templates = {}
        for arc in state.region:
            templates[arc] = replace(
                state.templates[arc],
                granted=state.granted[arc],
                held=state.held[arc],
                arrived=state.templates[arc].arrived + state.arrived[arc],
                in_transit=state.in_transit[arc],
                # grants between region links are re-issued by the links themselves
                budgets={k: v for k, v in state.budgets[arc].items() if k not in region},
                grants_out={k: v for k, v in state.grants_out[arc].items() if k not in region},
            )
        links = coarsen_state(state.lattices, templates, self.graph, self.quantum, step, state.hold)
        for arc, link in links.items():
            store.replace_state(arc, link)

        arrived = sum(state.arrived.values())
        remaining = state.on_lattice + state.waiting
        vehicles_in = state.initial + state.entered + state.injected
        vehicles_out = state.exited + arrived + remaining
        if vehicles_in != vehicles_out:
            raise InvariantError(
                f"session {session.session_id} lost vehicles: {vehicles_in} in, {vehicles_out} out",
                step=step,
                entity=entity.id,
            )
        coarse_steps = max(step - session.s0, 1)
        on_lattice = [m for lattice in state.lattices.values() for m in lattice]
        speed_out = self.quantum.to_mps(sum(m.speed for m in on_lattice) / len(on_lattice)) if on_lattice else 0.0
        latencies = sorted(state.informed.values())
        origin = latencies[0] if latencies else 0
        return {
            "session_id": session.session_id,
            "region": ";".join(str(a) for a in session.region),
            "s0": session.s0,
            "s1": step,
            "trigger_mode": session.trigger_mode,
            "vehicles_in": vehicles_in,
            "vehicles_out": vehicles_out,
            "fine_steps": state.fine_clock,
            "emissions_g": state.emissions.grams,
            "fuel_l": state.emissions.liters,
            "v2v_coverage": len(state.informed) / state.seen if state.seen else 0.0,
            "v2v_latency": (latencies[-1] - origin) if latencies else 0,
            "speed_in": state.speed_in,
            "speed_out": speed_out,
            "throughput": (state.exited + arrived) / coarse_steps,
        }

    # observation

    def observe(self, entity: SimulatedEntity) -> dict[str, float]:
        state = entity.state
        if entity.kind == LINK:
            return {"vehicles": state.count + state.in_transit, "queued": state.queued}
        if entity.kind == SESSION:
            return {
                "vehicles": state.on_lattice + state.waiting + sum(state.in_transit.values()),
                "sessions": 1,
                "emissions_g": state.emissions.grams,
            }
        return {}

    def position(self, entity_id: int) -> tuple[float, float] | None:
        if 0 <= entity_id < self.graph.arc_count:
            arc = self.graph.arcs[entity_id]
            (x1, y1), (x2, y2) = self._xy[arc.src], self._xy[arc.dst]
            return ((x1 + x2) / 2, (y1 + y2) / 2)
        return None
