"""
Publish-subscribe regions: updates go only to the LPs that subscribed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from melsim.errors import RoutingError

logger = logging.getLogger(__name__)


@dataclass
class Region:
    region_id: str
    members: frozenset[int] = frozenset()
    # lp -> first step whose publishes it receives
    subscribers: dict[int, int] = field(default_factory=dict)

    def receivers(self, step: int) -> list[int]:
        return sorted(lp for lp, since in self.subscribers.items() if since <= step)


class RegionTable:
    def __init__(self) -> None:
        self.regions: dict[str, Region] = {}
        self.deliveries = 0

    def declare(self, region_id: str, members: frozenset[int] = frozenset()) -> Region:
        return self.regions.setdefault(region_id, Region(region_id, members))

    def _get(self, region_id: str) -> Region:
        try:
            return self.regions[region_id]
        except KeyError:
            raise RoutingError(f"unknown region {region_id!r}") from None

    def subscribe(self, lp: int, region_id: str, step: int = 0) -> Region:
        """Subscribe lp to region_id for publishes made at `step` or later."""
        region = self._get(region_id)
        region.subscribers.setdefault(lp, step)
        logger.debug("LP %s subscribed to %s from step %s", lp, region_id, step)
        return region

    def publish(self, region_id: str, update: Any, step: int, deliver: Callable[[int, Any], None]) -> int:
        """Hand update to deliver(lp, update) for every subscribed LP (received at step + 1); returns the delivery count."""
        receivers = self._get(region_id).receivers(step)
        for lp in receivers:
            deliver(lp, update)
        self.deliveries += len(receivers)
        return len(receivers)
