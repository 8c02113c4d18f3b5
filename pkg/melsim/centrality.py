"""
Betweenness centrality over the road graph (directed, length-weighted).

Scores are raw sums over ordered pairs (x, y), x != y != n, of
sigma_xy(n) / sigma_xy; no normalization. With exact=True the dependency
accumulation runs on Fractions so small-graph results compare exactly
against brute-force enumeration.
"""

from __future__ import annotations

import heapq
import logging
from fractions import Fraction
from itertools import count
from typing import Any, Hashable

from melsim.roadgraph import RoadGraph, id_key

logger = logging.getLogger(__name__)

Adjacency = dict[Hashable, list[tuple[Hashable, float]]]


def _shortest_path_dag(adjacency: Adjacency, source: Hashable) -> tuple[list, dict, dict]:
    """Dijkstra from source: settle order, predecessor lists, shortest-path counts."""
    order: list = []
    preds: dict = {v: [] for v in adjacency}
    sigma: dict = dict.fromkeys(adjacency, 0)
    settled: dict = {}
    seen = {source: 0}
    sigma[source] = 1
    tie = count()
    heap = [(0, next(tie), source, source)]
    while heap:
        dist, _, pred, v = heapq.heappop(heap)
        if v in settled:
            continue
        if v != source:
            sigma[v] += sigma[pred]
        order.append(v)
        settled[v] = dist
        for w, weight in adjacency[v]:
            vw = dist + weight
            if w not in settled and (w not in seen or vw < seen[w]):
                seen[w] = vw
                heapq.heappush(heap, (vw, next(tie), v, w))
                sigma[w] = 0
                preds[w] = [v]
            elif w not in settled and vw == seen[w]:
                sigma[w] += sigma[v]
                preds[w].append(v)
    return order, preds, sigma


def brandes(adjacency: Adjacency, exact: bool = False) -> dict[Hashable, float | Fraction]:
    """Raw directed betweenness for a weighted digraph given as node -> [(neighbor, weight)]."""
    one: float | Fraction = Fraction(1) if exact else 1.0
    scores = {v: one * 0 for v in adjacency}
    for source in adjacency:
        order, preds, sigma = _shortest_path_dag(adjacency, source)
        delta = {v: one * 0 for v in order}
        for w in reversed(order):
            coeff = (one + delta[w]) / sigma[w]
            for v in preds[w]:
                delta[v] += sigma[v] * coeff
            if w != source:
                scores[w] += delta[w]
    return scores


def betweenness(graph: RoadGraph, exact: bool = False) -> dict[Any, float | Fraction]:
    """Scores keyed by original node id; parallel arcs collapse to the shortest one."""
    raw = brandes(graph.simple_adjacency(), exact=exact)
    scores = {graph.nodes[i].id: raw[i] for i in range(graph.node_count)}
    if scores:
        logger.info("Betweenness over %s nodes, max score %s", len(scores), max(scores.values()))
    return scores


def top_k_critical(scores: dict[Any, float | Fraction], k: int | None) -> list[Any]:
    """k node ids by descending score, ties by ascending id; None or k >= n returns the full ranking."""
    if k is not None and k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    ranked = sorted(scores, key=lambda node: (-scores[node], id_key(node)))
    return ranked if k is None else ranked[:k]
