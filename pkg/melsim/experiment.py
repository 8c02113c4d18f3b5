"""
Wiring a Config into runnable pieces: road graph, traffic model, level
registry with its trigger policy, partition and the sequential or parallel
run. The CLI and the tests both go through these helpers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable

from melsim.centrality import betweenness, top_k_critical
from melsim.config import Config
from melsim.emissions import EmissionModel
from melsim.errors import ConfigError, ConfigIssue, GraphParseError, LevelConfigError
from melsim.kernel import StreamFault, init_simulation, run_sequential
from melsim.macro import NO_DEST
from melsim.micro import NaschParams
from melsim.migration import MigrationParams
from melsim.multilevel import AUTOMATIC, Coordinator, LevelSpec, TriggerPolicy
from melsim.pads import run_parallel
from melsim.partition import make_partition
from melsim.roadgraph import RoadGraph, grid_graph, load_graph_file, ring_graph
from melsim.trace import Divergence, Trace, first_divergence
from melsim.traffic_model import Injection, TrafficModel
from melsim.transport import JitterInjector

logger = logging.getLogger(__name__)

Progress = Callable[[int, int], None]


def build_graph(config: Config) -> RoadGraph:
    source = config.scenario.graph
    cell = config.scenario.cell_length_m
    if source.generator == "ring":
        return ring_graph(source.nodes, source.length_m, source.oneway, source.lanes, source.capacity_per_step, cell)
    if source.generator == "grid":
        return grid_graph(
            source.rows, source.cols, source.length_m, source.oneway, source.lanes, source.capacity_per_step, cell
        )
    return load_graph_file(source.path, source.format, cell)


def demand_injections(config: Config, graph: RoadGraph) -> list[Injection]:
    """
    Translate node-level demand rows into arc injections.

    With a destination the vehicles enter the first arc of the shortest route
    to it; without one they enter the origin's lowest-indexed out-arc and roam.
    """
    injections = []
    issues = []
    for i, row in enumerate(config.scenario.demand):
        where = f"scenario.demand[{i}]"
        try:
            origin = graph.node_index(row.origin)
            dest = graph.node_index(row.dest) if row.dest is not None else NO_DEST
        except GraphParseError as exc:
            issues.append(ConfigIssue(where, str(exc)))
            continue
        if dest == NO_DEST:
            out = sorted(graph.out_arcs[origin])
            arc = out[0] if out else None
        elif dest == origin:
            issues.append(ConfigIssue(f"{where}.dest", "equals the origin"))
            continue
        else:
            arc = graph.next_arc(origin, dest)
        if arc is None:
            issues.append(ConfigIssue(where, f"no arc leaves node {row.origin!r} toward {row.dest!r}"))
            continue
        injections.append(Injection(step=row.step, arc=arc, count=row.count, dest=dest))
    if issues:
        raise ConfigError(issues)
    return injections


def watched_links(config: Config, graph: RoadGraph) -> dict[int, Any]:
    """Arcs entering the top-k betweenness nodes, mapped to that node's id (automatic mode only)."""
    trigger = config.scenario.trigger
    if trigger.mode != AUTOMATIC or trigger.top_k == 0:
        return {}
    hotspots = top_k_critical(betweenness(graph), trigger.top_k)
    watch = {}
    for node_id in hotspots:
        for arc in graph.in_arcs[graph.node_index(node_id)]:
            watch[arc] = node_id
    logger.info("Watching %s links into %s hotspot nodes", len(watch), len(hotspots))
    return watch


def build_model(config: Config, graph: RoadGraph, watch: dict[int, Any] | None = None) -> TrafficModel:
    scenario = config.scenario
    return TrafficModel(
        graph,
        seed=config.seed,
        population=scenario.population.vehicles,
        roam=scenario.population.roam,
        demand=demand_injections(config, graph),
        step_s=config.coarse_step_s,
        ratio=config.ratio,
        nasch=NaschParams(scenario.nasch.vmax, scenario.nasch.p_brake),
        emission=EmissionModel(scenario.emissions.coeffs, scenario.emissions.substeps),
        v2v_range_m=scenario.v2v.range_m,
        free_flow_mps=scenario.free_flow_mps,
        watch=watch,
        density_threshold=scenario.trigger.density_threshold if watch else 0,
    )


def coordinator_factory(config: Config, model: TrafficModel) -> Callable[[], Coordinator] | None:
    """
    A fresh Coordinator per run, with every level registered and manual
    sessions queued. None when the configuration has nothing to refine.
    """
    trigger = config.scenario.trigger
    if not trigger.sessions and trigger.mode != AUTOMATIC:
        return None
    if len(config.levels) < 2:
        raise ConfigError([ConfigIssue("levels", "refinement sessions need a level-1 model")])
    for i, session in enumerate(trigger.sessions):
        bad = [a for a in session.arcs if not 0 <= a < model.graph.arc_count]
        if bad:
            raise ConfigError([ConfigIssue(f"scenario.trigger.sessions[{i}].arcs", f"no arcs {bad}")])
    policy = TriggerPolicy(
        mode=trigger.mode,
        density_threshold=trigger.density_threshold,
        watch=dict(model.watch),
        min_session_steps=trigger.min_session_steps,
    )

    def make() -> Coordinator:
        coordinator = Coordinator(config.horizon, policy)
        for level, spec in enumerate(config.levels):
            adapter = model if level == 1 else (model.emission if level == 2 else None)
            coordinator.register_level(LevelSpec(level, spec.step_size, spec.kind, adapter))
        for i, session in enumerate(trigger.sessions):
            region = session.arcs if session.arcs else model.region_for(session.node)
            try:
                coordinator.trigger_refinement(region, session.s0, session.s1)
            except (LevelConfigError, GraphParseError) as exc:
                raise ConfigError([ConfigIssue(f"scenario.trigger.sessions[{i}]", str(exc))]) from exc
        return coordinator

    make()  # surface configuration errors before any run starts
    return make


@dataclass
class Experiment:
    config: Config
    graph: RoadGraph
    model: TrafficModel
    coordinators: Callable[[], Coordinator] | None

    def run(
        self,
        n_lps: int | None = None,
        *,
        migration: MigrationParams | None = None,
        fault: StreamFault | None = None,
        progress: Progress | None = None,
        sequential: bool = False,
    ) -> Trace:
        """One run from a fresh initial state, on the parallel runtime unless sequential is set."""
        config = self.config
        n_lps = config.n_lps if n_lps is None else n_lps
        state = init_simulation(config, self.model)
        if sequential:
            coordinator = self.coordinators() if self.coordinators is not None else None
            return run_sequential(state, config.horizon, coordinator=coordinator, progress=progress)
        partition = make_partition(state.store.entities, n_lps, config.partition, position=self.model.position)
        jitter = JitterInjector(config.seed, config.jitter_ms / 1000.0) if config.jitter_ms > 0 else None
        return run_parallel(
            state,
            partition,
            config.horizon,
            migration=migration,
            coordinator_factory=self.coordinators,
            jitter=jitter,
            fault=fault,
            progress=progress,
        )


def prepare(config: Config) -> Experiment:
    graph = build_graph(config)
    model = build_model(config, graph, watched_links(config, graph))
    return Experiment(config, graph, model, coordinator_factory(config, model))


@dataclass(frozen=True)
class VerifyResult:
    n_lps: int
    migration: bool
    digest: str
    divergence: Divergence | None

    @property
    def match(self) -> bool:
        return self.divergence is None


def verify(experiment: Experiment, lp_counts: list[int], progress: Progress | None = None) -> tuple[str, list[VerifyResult]]:
    """
    Sequential oracle once, then a parallel run per LP count (with and
    without migration when the config enables it). Returns the oracle digest
    and one result per parallel run.
    """
    config = experiment.config
    oracle = experiment.run(1, progress=progress, sequential=True)
    fault = None
    results = []
    modes = [None] if config.migration is None else [None, config.migration.params()]
    for n_lps in lp_counts:
        if config.verify.fault_step is not None:
            fault = StreamFault(config.verify.fault_step, min(config.verify.fault_lp, n_lps - 1))
        for params in modes:
            if params is not None and n_lps == 1:
                continue
            trace = experiment.run(n_lps, migration=params, fault=fault, progress=progress)
            divergence = first_divergence(oracle, trace)
            results.append(VerifyResult(n_lps, params is not None, trace.hexdigest(), divergence))
            logger.info(
                "verify lps=%s migration=%s: %s", n_lps, params is not None, "match" if divergence is None else divergence
            )
    return oracle.hexdigest(), results


def analyze(config: Config, graph: RoadGraph | None = None) -> tuple[dict[Any, Any], list[Any], dict[str, Any]]:
    """Betweenness scores, the top-k ranking (full when output.top_k is unset) and summary statistics."""
    graph = graph or build_graph(config)
    scores = betweenness(graph)
    ranking = top_k_critical(scores, config.output.top_k)
    summary = {
        "nodes": graph.node_count,
        "arcs": graph.arc_count,
        "max_score": float(max(scores.values())) if scores else 0.0,
    }
    return scores, ranking, summary
