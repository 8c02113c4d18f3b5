"""
Parallel executor: one logical process (LP) per worker thread, synchronized
by distributed End-Of-Step (EOS) messages.

Every LP steps its resident entities, routes outgoing messages through its
copy of the directory (local ones are queued directly, remote ones travel as
tagged frames), then broadcasts EOS(s). An EOS frame tells the receiver how
many model and region frames the sender addressed to it for that step, so
frames overtaken by the EOS are still waited for. LP0 additionally receives
the state digests, step summaries, interaction counts and feed-region
updates of every LP; it records the trace and, at each boundary, decides
session closes, migrations and session opens for everybody.

Boundary s (before step s executes):
    LP0 plans and broadcasts the decision; every LP then closes its owned
    sessions, ships and receives migrated entities, updates its directory,
    opens its owned sessions.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

from melsim import codec
from melsim.codec import TAG_ABORT, TAG_EOS, TAG_MIGRATION, TAG_MODEL, TAG_REGION, decode_frame, encode_frame
from melsim.errors import MelsimError, ProtocolError
from melsim.kernel import (
    BoundaryHook,
    EntityStore,
    EventMessage,
    RegionUpdate,
    RunCounters,
    RunReport,
    SimulationState,
    StepSummary,
    StreamFault,
)
from melsim.migration import (
    InteractionMatrix,
    MigrationParams,
    MigrationPlan,
    Move,
    evaluate_migrations,
    pack_transfer,
    unpack_transfer,
)
from melsim.partition import CommunicationStats, Directory, Partition, route_message
from melsim.regions import RegionTable
from melsim.trace import Trace
from melsim.transport import DEFAULT_BARRIER_TIMEOUT, JitterInjector, Transport

logger = logging.getLogger(__name__)

COORDINATOR_LP = 0


@codec.register
@dataclass(frozen=True)
class EosMessage:
    sender: int
    step: int
    model_frames: int = 0  # model frames the sender addressed to the receiver this step
    region_frames: int = 0
    # Only on EOS frames addressed to the coordinator LP
    digests: tuple = ()
    summary: StepSummary | None = None
    interactions: dict = field(default_factory=dict)  # entity -> {lp: messages}


@codec.register
@dataclass(frozen=True)
class BoundaryDecision:
    step: int
    actions: Any = None  # BoundaryActions or None
    moves: tuple = ()


@codec.register
@dataclass(frozen=True)
class TransferFrame:
    step: int
    blob: bytes


class StepMonitor:
    """Shared instrument: largest gap between the steps any two LPs are executing."""

    def __init__(self, n_lps: int) -> None:
        self._steps = [0] * n_lps
        self._lock = threading.Lock()
        self.max_spread = 0

    def entered(self, lp: int, step: int) -> None:
        with self._lock:
            self._steps[lp] = step
            self.max_spread = max(self.max_spread, max(self._steps) - min(self._steps))


class Mailbox:
    """Frames received by one LP, filed by kind and step until the protocol asks for them."""

    def __init__(self, lp: int, transport: Transport) -> None:
        self.lp = lp
        self.transport = transport
        self.eos: dict[int, dict[int, EosMessage]] = {}
        self.model: dict[int, dict[int, list[EventMessage]]] = {}
        self.region: dict[int, dict[int, list[RegionUpdate]]] = {}
        self.decisions: dict[int, BoundaryDecision] = {}
        self.transfers: dict[int, list[bytes]] = {}

    def pump(self, waiting_for: str) -> None:
        src, frame = self.transport.receive(self.lp, waiting_for)
        tag, body = decode_frame(frame)
        if tag == TAG_MODEL:
            self.model.setdefault(body.send_step, {}).setdefault(src, []).append(body)
        elif tag == TAG_REGION:
            self.region.setdefault(body.step, {}).setdefault(src, []).append(body)
        elif tag == TAG_EOS:
            received = self.eos.setdefault(body.step, {})
            if body.sender in received:
                raise ProtocolError(f"duplicate EOS({body.step}) from LP {body.sender}", step=body.step)
            received[body.sender] = body
            logger.debug("LP %s got EOS(%s) from LP %s", self.lp, body.step, body.sender)
        elif tag == TAG_MIGRATION:
            if isinstance(body, BoundaryDecision):
                self.decisions[body.step] = body
            else:
                self.transfers.setdefault(body.step, []).append(body.blob)
        elif tag == TAG_ABORT:
            sender, reason = body
            raise ProtocolError(f"run aborted by LP {sender}: {reason}")

    def complete(self, step: int, peers: list[int]) -> bool:
        received = self.eos.get(step, {})
        for peer in peers:
            eos = received.get(peer)
            if eos is None:
                return False
            if len(self.model.get(step, {}).get(peer, ())) != eos.model_frames:
                return False
            if len(self.region.get(step, {}).get(peer, ())) != eos.region_frames:
                return False
        return True


class LogicalProcess:
    def __init__(
        self,
        lp_id: int,
        n_lps: int,
        transport: Transport,
        store: EntityStore,
        directory: Directory,
        *,
        model: Any = None,
        seed: int = 0,
        coordinator: BoundaryHook | None = None,
        migration: MigrationParams | None = None,
        fault: StreamFault | None = None,
        monitor: StepMonitor | None = None,
    ) -> None:
        self.lp_id = lp_id
        self.n_lps = n_lps
        self.transport = transport
        self.store = store
        self.directory = directory
        self.model = model
        self.seed = seed
        self.coordinator = coordinator
        self.migration = migration
        self.fault = fault
        self.monitor = monitor
        self.mailbox = Mailbox(lp_id, transport)
        self.peers = [p for p in range(n_lps) if p != lp_id]
        self.stats = CommunicationStats()
        self.counters = RunCounters()
        self.session_rows: list[dict[str, Any]] = []
        self.regions = RegionTable()
        feed = coordinator.feed_region if coordinator is not None else None
        if feed is not None:
            self.regions.declare(feed)
            self.regions.subscribe(COORDINATOR_LP, feed, 0)
        self._frames_out: dict[int, list[int]] = {}
        self._regions_out: dict[int, list[int]] = {}
        self._local_updates: list[RegionUpdate] = []
        # coordinator-only
        self.trace = Trace()
        self.summaries: list[StepSummary] = []
        self.migration_rows: list[dict[str, Any]] = []
        self.matrix = InteractionMatrix(migration.window) if migration is not None else None
        self.last_moved: dict[int, int] = {}
        self.feed_updates: list[RegionUpdate] = []

    @property
    def is_coordinator(self) -> bool:
        return self.lp_id == COORDINATOR_LP

    @property
    def resident(self) -> list[int]:
        return sorted(self.store.entities)

    # sending

    def _send(self, dst_lp: int, tag: int, body: Any) -> int:
        frame = encode_frame(tag, body)
        self.transport.send(self.lp_id, dst_lp, frame)
        return len(frame)

    def _count_out(self, table: dict[int, list[int]], step: int, dst_lp: int) -> None:
        table.setdefault(step, [0] * self.n_lps)[dst_lp] += 1

    def _deliver_update(self, receiver: int, update: RegionUpdate, step: int) -> None:
        if receiver == self.lp_id:
            self._local_updates.append(update)
        else:
            self._send(receiver, TAG_REGION, update)
            self._count_out(self._regions_out, step, receiver)

    def abort(self, reason: str) -> None:
        frame = encode_frame(TAG_ABORT, (self.lp_id, reason))
        for peer in self.peers:
            self.transport.send(self.lp_id, peer, frame)

    # synchronization

    def sync_end_of_step(self, step: int, report: EosMessage | None = None) -> None:
        """
        Broadcast EOS(step) and block until every peer's EOS(step) and all
        frames it announced have arrived; then queue those frames locally.
        """
        frames = self._frames_out.pop(step, [0] * self.n_lps)
        regions = self._regions_out.pop(step, [0] * self.n_lps)
        for peer in self.peers:
            if peer == COORDINATOR_LP and report is not None:
                body = EosMessage(
                    self.lp_id, step, frames[peer], regions[peer],
                    report.digests, report.summary, report.interactions,
                )
            else:
                body = EosMessage(self.lp_id, step, frames[peer], regions[peer])
            self._send(peer, TAG_EOS, body)
        while not self.mailbox.complete(step, self.peers):
            self.mailbox.pump(f"EOS({step})")
        for msgs in self.mailbox.model.pop(step, {}).values():
            for msg in msgs:
                self.store.enqueue(msg, step)
        received = self.mailbox.region.pop(step, {})
        if self.is_coordinator:
            updates = list(self._local_updates)
            for batch in received.values():
                updates.extend(batch)
            self.feed_updates = sorted(updates, key=lambda u: (u.src, u.index))
        self._local_updates = []

    def _collected(self, step: int) -> list[EosMessage]:
        return [self.mailbox.eos[step][p] for p in self.peers] if self.peers else []

    def _forget_eos(self, step: int) -> None:
        self.mailbox.eos.pop(step, None)

    # boundary

    def _plan(self, step: int) -> BoundaryDecision:
        actions = None
        moves: list[Move] = []
        if self.coordinator is not None:
            actions = self.coordinator.plan_boundary(step, self.feed_updates, self.directory.owner)
            moves.extend(actions.forced)
        # adaptive moves only once a full window of interactions is on record
        if self.migration is not None and self.matrix is not None and step >= self.migration.window:
            pinned = set(self.coordinator.pinned()) if self.coordinator is not None else set()
            pinned.update(m.entity for m in moves)
            loads = self.directory.loads(self.n_lps)
            for m in moves:
                loads[m.from_lp] -= 1
                loads[m.to_lp] += 1
            plan = evaluate_migrations(self.matrix, self.directory, loads, self.migration, step, self.last_moved, pinned)
            moves.extend(plan.moves)
        if moves:
            self.migration_rows.extend(MigrationPlan(tuple(moves), step).rows())
        self.feed_updates = []
        return BoundaryDecision(step, actions, tuple(moves))

    def boundary(self, step: int) -> None:
        if self.is_coordinator:
            decision = self._plan(step)
            for peer in self.peers:
                self._send(peer, TAG_MIGRATION, decision)
        else:
            while step not in self.mailbox.decisions:
                self.mailbox.pump(f"boundary decision {step}")
            decision = self.mailbox.decisions.pop(step)
        actions = decision.actions

        if actions is not None:
            for session in actions.closes:
                if session.owner == self.lp_id:
                    row = self.coordinator.close_session(session, self.store, step)
                    if row is not None:
                        self.session_rows.append(row)
                self.directory.remove(session.entity_id)

        self._migrate(step, decision.moves)

        if actions is not None:
            for session in actions.opens:
                if session.owner == self.lp_id:
                    self.coordinator.open_session(session, self.store, step)
                self.directory.add(session.entity_id, session.owner)

    def _migrate(self, step: int, moves: tuple) -> None:
        if not moves:
            return
        for move in moves:
            if move.from_lp == self.lp_id:
                blob = pack_transfer(self.store, move.entity)
                if move.to_lp == self.lp_id:
                    unpack_transfer(self.store, blob, step)
                else:
                    self._send(move.to_lp, TAG_MIGRATION, TransferFrame(step, blob))
        expected = sum(1 for m in moves if m.to_lp == self.lp_id and m.from_lp != self.lp_id)
        while len(self.mailbox.transfers.get(step, ())) < expected:
            self.mailbox.pump(f"entity transfers at boundary {step}")
        for blob in self.mailbox.transfers.pop(step, []):
            unpack_transfer(self.store, blob, step)
        self.directory.move((m.entity, m.to_lp) for m in moves)
        if self.is_coordinator:
            for m in moves:
                if not m.forced:
                    self.last_moved[m.entity] = step
        logger.debug("LP %s applied %s moves at boundary %s (directory v%s)", self.lp_id, len(moves), step, self.directory.version)

    # execution

    def execute(self, step: int) -> EosMessage:
        if self.monitor is not None:
            self.monitor.entered(self.lp_id, step)
        t0 = time.perf_counter()
        mask = self.fault.mask if self.fault is not None and self.fault.step == step and self.fault.lp == self.lp_id else 0
        out = self.store.step_all(step, self.model, self.seed, mask)
        self.stats.reset()
        self.stats.entities_stepped = out.stepped
        self.counters.delivered += out.delivered
        self.counters.sent += len(out.outbox)
        interactions: dict[int, dict[int, int]] = {}
        for msg in out.outbox:
            owner = self.directory.owner(msg.dst)
            if owner == self.lp_id:
                route_message(self.directory, msg, self.lp_id, self.stats)
                self.store.enqueue(msg, step)
            else:
                frame = encode_frame(TAG_MODEL, msg)
                route_message(self.directory, msg, self.lp_id, self.stats, len(frame))
                self.transport.send(self.lp_id, owner, frame)
                self._count_out(self._frames_out, step, owner)
            per_lp = interactions.setdefault(msg.src, {})
            per_lp[owner] = per_lp.get(owner, 0) + 1
        for update in out.publishes:
            if update.region not in self.regions.regions:
                continue
            self.regions.publish(update.region, update, step, lambda receiver, u: self._deliver_update(receiver, u, step))
        summary = StepSummary(
            step=step,
            lp=self.lp_id,
            resident=len(self.store),
            stepped=out.stepped,
            local_msgs=self.stats.local_msgs,
            remote_msgs=self.stats.remote_msgs,
            bytes_remote=self.stats.bytes_remote,
            observations=self.store.observe(self.model),
            wall_ms=(time.perf_counter() - t0) * 1000.0,
        )
        return EosMessage(
            self.lp_id, step,
            digests=tuple(self.store.digests()),
            summary=summary,
            interactions=interactions,
        )

    def _absorb(self, step: int, own: EosMessage, record: Callable[[int, list], None]) -> None:
        """Coordinator: fold every LP's report for `step` into trace, summaries and the interaction window."""
        reports = [own] + self._collected(step)
        digests = sorted(d for r in reports for d in r.digests)
        record(step, digests)
        for r in sorted(reports, key=lambda r: r.sender):
            if r.summary is not None:
                self.summaries.append(r.summary)
            if self.matrix is not None:
                for eid, per_lp in sorted(r.interactions.items()):
                    for lp, count in sorted(per_lp.items()):
                        self.matrix.record(eid, lp, step, count)
        self._forget_eos(step)

    def run(self, start: int, horizon: int, progress: Callable[[int, int], None] | None = None) -> None:
        own = EosMessage(self.lp_id, start - 1, digests=tuple(self.store.digests()))
        self.sync_end_of_step(start - 1, own)
        if self.is_coordinator:
            self._absorb(start - 1, own, lambda _s, d: self.trace.record_initial(d))
        else:
            self._forget_eos(start - 1)

        for step in range(start, horizon + 1):
            self.boundary(step)
            if step == horizon:
                break
            report = self.execute(step)
            self.sync_end_of_step(step, report)
            if self.is_coordinator:
                self._absorb(step, report, self.trace.record_step)
                if progress is not None:
                    progress(step + 1, horizon)
            else:
                self._forget_eos(step)

        final = EosMessage(self.lp_id, horizon, digests=tuple(self.store.digests()))
        self.sync_end_of_step(horizon, final)
        if self.is_coordinator:
            self._absorb(horizon, final, self.trace.record_closing)
        self.counters.dropped_at_horizon = self.store.pending_count()


def sync_end_of_step(lp: LogicalProcess, step: int, report: EosMessage | None = None) -> None:
    lp.sync_end_of_step(step, report)


def run_parallel(
    state: SimulationState,
    partition: Partition,
    horizon: int,
    *,
    migration: MigrationParams | None = None,
    coordinator_factory: Callable[[], BoundaryHook] | None = None,
    jitter: JitterInjector | None = None,
    fault: StreamFault | None = None,
    timeout: float = DEFAULT_BARRIER_TIMEOUT,
    progress: Callable[[int, int], None] | None = None,
) -> Trace:
    """
    Run state's model on partition.n_lps logical processes, one worker thread each.

    The returned Trace equals run_sequential's for the same state regardless
    of LP count, migration policy or frame interleaving. The first error
    raised in any LP is re-raised here after all workers stopped.
    """
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    n_lps = partition.n_lps
    missing = set(state.store.entities) - set(partition.assignment)
    if missing:
        raise ProtocolError(f"{len(missing)} entities have no LP (e.g. {min(missing)})")
    transport = Transport(n_lps, jitter=jitter, timeout=timeout)
    monitor = StepMonitor(n_lps)
    stores = [EntityStore() for _ in range(n_lps)]
    for eid in sorted(state.store.entities):
        stores[partition.assignment[eid]].add(state.store.entities[eid])
    for msgs in state.store.pending.values():
        for msg in msgs:
            stores[partition.assignment[msg.dst]].enqueue(msg, state.clock - 1)
    lps = [
        LogicalProcess(
            lp,
            n_lps,
            transport,
            stores[lp],
            Directory.from_partition(partition),
            model=state.model,
            seed=state.seed,
            coordinator=coordinator_factory() if coordinator_factory is not None else None,
            migration=migration,
            fault=fault,
            monitor=monitor,
        )
        for lp in range(n_lps)
    ]
    errors: list[BaseException] = []
    lock = threading.Lock()

    def work(lp: LogicalProcess) -> None:
        try:
            lp.run(start, horizon, progress if lp.is_coordinator else None)
        except BaseException as exc:
            with lock:
                errors.append(exc)
            reason = exc.diagnostic() if isinstance(exc, MelsimError) else repr(exc)
            logger.error("LP %s failed: %s", lp.lp_id, reason)
            lp.abort(reason)

    start = state.clock
    started = time.perf_counter()
    try:
        with ThreadPoolExecutor(max_workers=n_lps, thread_name_prefix="lp") as pool:
            for future in [pool.submit(work, lp) for lp in lps]:
                future.result()
    finally:
        transport.close()
    if errors:
        raise errors[0]

    head = lps[COORDINATOR_LP]
    trace = head.trace
    report = RunReport(n_lps=n_lps)
    report.summaries = head.summaries
    report.migration_rows = head.migration_rows
    report.session_rows = sorted(
        (row for lp in lps for row in lp.session_rows),
        key=lambda row: (row["s1"], row["session_id"]),
    )
    counters = report.counters
    for lp in lps:
        counters.sent += lp.counters.sent
        counters.delivered += lp.counters.delivered
        counters.dropped_at_horizon += lp.counters.dropped_at_horizon
    counters.max_step_spread = monitor.max_spread
    report.wall_seconds = time.perf_counter() - started
    trace.report = report
    state.clock = horizon
    logger.info(
        "Parallel run on %s LPs: %s steps, %s sent, %s remote frames, max step spread %s",
        n_lps, horizon - start, counters.sent, sum(s.remote_msgs for s in report.summaries), counters.max_step_spread,
    )
    return trace
