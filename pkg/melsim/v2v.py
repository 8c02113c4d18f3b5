"""
Unit-disk V2V connectivity and a hazard flood over it.
"""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Hashable, Mapping

DEFAULT_RANGE_M = 300.0


def wireless_neighbors(positions: Mapping[Hashable, tuple[float, float]], range_m: float) -> dict[Hashable, list]:
    """
    Adjacency under the closed unit-disk rule: connected iff distance <= range_m.

    Positions are bucketed in a grid of range_m cells so only the 3x3 block
    around each vehicle is compared.
    """
    if range_m <= 0:
        raise ValueError(f"range must be > 0, got {range_m}")
    buckets: dict[tuple[int, int], list] = defaultdict(list)
    for vid, (x, y) in positions.items():
        buckets[(math.floor(x / range_m), math.floor(y / range_m))].append(vid)
    limit = range_m * range_m
    adjacency: dict[Hashable, list] = {vid: [] for vid in positions}
    for (bx, by), members in buckets.items():
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for other in buckets.get((bx + dx, by + dy), ()):
                    ox, oy = positions[other]
                    for vid in members:
                        if vid == other:
                            continue
                        x, y = positions[vid]
                        if (x - ox) ** 2 + (y - oy) ** 2 <= limit:
                            adjacency[vid].append(other)
    for vid in adjacency:
        adjacency[vid].sort()
    return adjacency


def flood_step(
    informed: Mapping[int, int],
    adjacency: Mapping[int, list[int]],
    step: int,
) -> dict[int, int]:
    """
    Vehicles informed at `step` rebroadcast once; neighbors not yet informed
    receive the hazard at step + 1. Returns the newly informed {vehicle: step + 1}.
    """
    fresh: dict[int, int] = {}
    for sender in sorted(v for v, at in informed.items() if at == step):
        for neighbor in adjacency.get(sender, ()):
            if neighbor not in informed and neighbor not in fresh:
                fresh[neighbor] = step + 1
    return fresh
