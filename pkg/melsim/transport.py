"""
In-process transport between logical processes.

Every LP owns one inbound queue of (sender lp, frame) pairs. An optional
jitter injector delays individual frames by a seeded amount so that frames
overtake each other; the synchronization protocol must not depend on
arrival order.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass

from melsim.errors import ProtocolError
from melsim.kernel import RandomStream, draw, to_uniform

logger = logging.getLogger(__name__)

# Seconds a blocked receive waits before declaring the barrier lost
DEFAULT_BARRIER_TIMEOUT = 60.0


@dataclass(frozen=True)
class JitterInjector:
    """Delay each frame by up to max_delay seconds, drawn from (seed, src, dst, frame number)."""

    seed: int = 0
    max_delay: float = 0.002

    def delay(self, src_lp: int, dst_lp: int, counter: int) -> float:
        value, _ = draw(RandomStream(self.seed, src_lp, dst_lp, counter))
        return to_uniform(value) * self.max_delay


class Transport:
    def __init__(
        self,
        n_lps: int,
        jitter: JitterInjector | None = None,
        timeout: float = DEFAULT_BARRIER_TIMEOUT,
    ) -> None:
        self.n_lps = n_lps
        self.jitter = jitter
        self.timeout = timeout
        self._queues: list[queue.Queue] = [queue.Queue() for _ in range(n_lps)]
        self._sent = [[0] * n_lps for _ in range(n_lps)]
        self._timers: set[threading.Timer] = set()
        self._lock = threading.Lock()

    def send(self, src_lp: int, dst_lp: int, frame: bytes) -> None:
        counter = self._sent[src_lp][dst_lp]
        self._sent[src_lp][dst_lp] = counter + 1
        if self.jitter is None or src_lp == dst_lp:
            self._queues[dst_lp].put((src_lp, frame))
            return
        timer = threading.Timer(self.jitter.delay(src_lp, dst_lp, counter), lambda: self._deliver(timer, dst_lp, src_lp, frame))
        timer.daemon = True
        with self._lock:
            self._timers.add(timer)
        timer.start()

    def _deliver(self, timer: threading.Timer, dst_lp: int, src_lp: int, frame: bytes) -> None:
        self._queues[dst_lp].put((src_lp, frame))
        with self._lock:
            self._timers.discard(timer)

    def in_flight(self) -> int:
        """Jittered frames not yet handed to their destination queue."""
        with self._lock:
            return len(self._timers)

    def receive(self, lp: int, waiting_for: str = "frame") -> tuple[int, bytes]:
        try:
            return self._queues[lp].get(timeout=self.timeout)
        except queue.Empty:
            logger.error("LP %s timed out after %.1fs waiting for %s", lp, self.timeout, waiting_for)
            raise ProtocolError(f"LP {lp} timed out waiting for {waiting_for}") from None

    def close(self) -> None:
        with self._lock:
            for timer in self._timers:
                timer.cancel()
            self._timers.clear()
