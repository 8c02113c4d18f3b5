"""
Road network model: nodes with coordinates, directed arcs with a cell lattice.

Two loaders produce the same RoadGraph: the native JSON document
({"nodes": [...], "edges": [...]}) and the element-array form of an
OpenStreetMap extract. Two-way edges expand into two directed arcs, one-way
edges into one. Arcs are numbered 0..A-1 in expansion order; that index is
also the id of the link entity simulating the arc.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import networkx as nx

from melsim.errors import GraphParseError

logger = logging.getLogger(__name__)

CELL_LENGTH_M = 7.5
EARTH_RADIUS_M = 6_371_000.0
DEFAULT_LANES = 1
# Vehicles a lane can discharge per coarse step
DEFAULT_CAPACITY_PER_LANE = 2

FORMATS = ("native", "osm-extract")

_ONEWAY_FORWARD = {"yes", "true", "1"}
_ONEWAY_REVERSE = {"-1", "reverse"}
_MPH_TO_KMH = 1.609344


@dataclass(frozen=True)
class Node:
    id: Any
    lat: float
    lon: float


@dataclass(frozen=True)
class Arc:
    index: int
    edge_id: Any
    src: int  # node index
    dst: int  # node index
    length_m: float
    lanes: int
    capacity_per_step: int
    cells: int
    maxspeed_mps: float | None = None


def cell_count(length_m: float, cell_length: float = CELL_LENGTH_M) -> int:
    """round(length / cell_length), at least one cell."""
    return max(1, math.floor(length_m / cell_length + 0.5))


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters."""
    phi1 = math.radians(lat1)
    phi2 = math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def id_key(value: Any) -> tuple:
    """Sort key for node ids that may be ints or strings."""
    if isinstance(value, bool) or not isinstance(value, int):
        return (1, 0, str(value))
    return (0, value, "")


@dataclass
class RoadGraph:
    nodes: list[Node]
    arcs: list[Arc]
    cell_length: float = CELL_LENGTH_M
    out_arcs: list[list[int]] = field(init=False)
    in_arcs: list[list[int]] = field(init=False)
    _index: dict[Any, int] = field(init=False)
    _best: dict[tuple[int, int], int] = field(init=False)
    _next_hop: dict[int, dict[int, int]] = field(init=False, default_factory=dict)
    _digraph: nx.DiGraph | None = field(init=False, default=None, repr=False)

    def __post_init__(self) -> None:
        self._index = {node.id: i for i, node in enumerate(self.nodes)}
        self.out_arcs = [[] for _ in self.nodes]
        self.in_arcs = [[] for _ in self.nodes]
        self._best = {}
        for arc in self.arcs:
            self.out_arcs[arc.src].append(arc.index)
            self.in_arcs[arc.dst].append(arc.index)
            key = (arc.src, arc.dst)
            best = self._best.get(key)
            if best is None or arc.length_m < self.arcs[best].length_m:
                self._best[key] = arc.index

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def arc_count(self) -> int:
        return len(self.arcs)

    def node_index(self, node_id: Any) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise GraphParseError(f"unknown node {node_id!r}") from None

    def arc_between(self, src: int, dst: int) -> int | None:
        """Shortest arc from node index src to dst (lowest index on equal length)."""
        return self._best.get((src, dst))

    def simple_adjacency(self) -> dict[int, list[tuple[int, float]]]:
        """Node index -> [(neighbor, length)] keeping the shortest arc per ordered pair."""
        adjacency: dict[int, list[tuple[int, float]]] = {i: [] for i in range(len(self.nodes))}
        for (src, dst), idx in sorted(self._best.items()):
            if src != dst:
                adjacency[src].append((dst, self.arcs[idx].length_m))
        return adjacency

    def upstream(self, arc_index: int) -> list[int]:
        """Arcs whose vehicles can continue onto arc_index."""
        return sorted(self.in_arcs[self.arcs[arc_index].src])

    def downstream(self, arc_index: int) -> list[int]:
        return sorted(self.out_arcs[self.arcs[arc_index].dst])

    def next_arc(self, node: int, dest: int) -> int | None:
        """First arc of the shortest route from node to dest (None when unreachable or already there)."""
        table = self._next_hop.get(dest)
        if table is None:
            table = self._build_next_hop(dest)
        return table.get(node)

    def route_nodes(self, node: int, dest: int) -> tuple[int, ...]:
        """Node indices after `node` along the shortest route to dest."""
        path = []
        current = node
        while current != dest:
            arc = self.next_arc(current, dest)
            if arc is None:
                return ()
            current = self.arcs[arc].dst
            path.append(current)
        return tuple(path)

    def reachable(self, src: int, dest: int) -> bool:
        return src == dest or self.next_arc(src, dest) is not None

    def _build_next_hop(self, dest: int) -> dict[int, int]:
        # Distances to dest on the reversed graph; ties resolved by lower arc index
        dist = nx.single_source_dijkstra_path_length(self.digraph().reverse(copy=False), dest, weight="length_m")
        hop: dict[int, int] = {}
        for node in dist:
            if node == dest:
                continue
            candidates = [
                (self.arcs[idx].length_m + dist[self.arcs[idx].dst], idx)
                for idx in self.out_arcs[node]
                if self.arcs[idx].dst != node and self.arcs[idx].dst in dist
            ]
            hop[node] = min(candidates)[1]
        self._next_hop[dest] = hop
        return hop

    def digraph(self) -> nx.DiGraph:
        """Node-index digraph with the shortest arc per ordered pair, weighted by `length_m`."""
        if self._digraph is None:
            graph = nx.DiGraph()
            graph.add_nodes_from(range(len(self.nodes)))
            for (src, dst), idx in sorted(self._best.items()):
                if src != dst:
                    graph.add_edge(src, dst, length_m=self.arcs[idx].length_m, arc=idx)
            self._digraph = graph
        return self._digraph

    def projection(self) -> "Projection":
        if not self.nodes:
            return Projection(0.0, 0.0)
        return Projection(
            lat0=min(n.lat for n in self.nodes),
            lon0=min(n.lon for n in self.nodes),
        )


@dataclass(frozen=True)
class Projection:
    """Equirectangular projection to meters around (lat0, lon0)."""

    lat0: float
    lon0: float

    def to_xy(self, node: Node) -> tuple[float, float]:
        x = math.radians(node.lon - self.lon0) * math.cos(math.radians(self.lat0)) * EARTH_RADIUS_M
        y = math.radians(node.lat - self.lat0) * EARTH_RADIUS_M
        return (x, y)


def _expand(
    nodes: list[Node],
    edges: Iterable[dict[str, Any]],
    cell_length: float,
) -> RoadGraph:
    index = {}
    for node in nodes:
        if node.id in index:
            raise GraphParseError(f"duplicate node id {node.id!r}")
        index[node.id] = len(index)
    arcs: list[Arc] = []
    seen_edges: set = set()
    for edge in edges:
        eid = edge["id"]
        if eid in seen_edges:
            raise GraphParseError(f"duplicate edge id {eid!r}")
        seen_edges.add(eid)
        for end in ("from", "to"):
            if edge[end] not in index:
                raise GraphParseError(f"edge {eid!r} references missing node {edge[end]!r}")
        try:
            length = float(edge["length_m"])
            lanes = int(edge.get("lanes") or DEFAULT_LANES)
            capacity = int(edge.get("capacity_per_step") or lanes * DEFAULT_CAPACITY_PER_LANE)
            maxspeed = float(edge["maxspeed_mps"]) if edge.get("maxspeed_mps") else None
        except (TypeError, ValueError) as exc:
            raise GraphParseError(f"edge {eid!r}: {exc}") from exc
        if not length > 0:
            raise GraphParseError(f"edge {eid!r} has non-positive length {edge['length_m']!r}")
        if lanes < 1:
            raise GraphParseError(f"edge {eid!r} has invalid lane count {edge.get('lanes')!r}")
        if capacity < 1:
            raise GraphParseError(f"edge {eid!r} has invalid capacity_per_step {edge.get('capacity_per_step')!r}")
        ends = [(edge["from"], edge["to"])]
        if not edge.get("oneway", False):
            ends.append((edge["to"], edge["from"]))
        for src, dst in ends:
            arcs.append(
                Arc(
                    index=len(arcs),
                    edge_id=eid,
                    src=index[src],
                    dst=index[dst],
                    length_m=length,
                    lanes=lanes,
                    capacity_per_step=capacity,
                    cells=cell_count(length, cell_length),
                    maxspeed_mps=maxspeed,
                )
            )
    graph = RoadGraph(nodes=nodes, arcs=arcs, cell_length=cell_length)
    logger.info("Road graph: %s nodes, %s arcs", graph.node_count, graph.arc_count)
    return graph


def _native(doc: dict[str, Any], cell_length: float) -> RoadGraph:
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise GraphParseError("native graph needs top-level 'nodes' and 'edges' arrays")
    nodes = []
    for raw in doc["nodes"]:
        try:
            nodes.append(Node(raw["id"], float(raw["lat"]), float(raw["lon"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphParseError(f"node {raw.get('id') if isinstance(raw, dict) else raw!r}: {exc}") from exc
    edges = []
    for raw in doc["edges"]:
        if not isinstance(raw, dict) or any(k not in raw for k in ("id", "from", "to", "length_m")):
            raise GraphParseError(f"edge {raw.get('id') if isinstance(raw, dict) else raw!r}: missing id/from/to/length_m")
        edges.append(raw)
    return _expand(nodes, edges, cell_length)


def _parse_maxspeed(tag: Any) -> float | None:
    if tag is None:
        return None
    text = str(tag).strip().lower()
    factor = 1.0
    if text.endswith("mph"):
        factor = _MPH_TO_KMH
        text = text[:-3].strip()
    try:
        return float(text) * factor / 3.6
    except ValueError:
        return None


def _osm(doc: dict[str, Any], cell_length: float) -> RoadGraph:
    elements = doc.get("elements") if isinstance(doc, dict) else None
    if not isinstance(elements, list):
        raise GraphParseError("osm extract needs an 'elements' array")
    coords: dict[Any, tuple[float, float]] = {}
    ways = []
    for position, el in enumerate(elements):
        if not isinstance(el, dict):
            raise GraphParseError(f"element {position}: expected an object, got {el!r}")
        kind = el.get("type")
        try:
            if kind == "node":
                if el["id"] in coords:
                    raise GraphParseError(f"duplicate node id {el['id']!r}")
                coords[el["id"]] = (float(el["lat"]), float(el["lon"]))
            elif kind == "way" and "highway" in (el.get("tags") or {}):
                if "id" not in el:
                    raise KeyError("id")
                ways.append(el)
        except KeyError as exc:
            raise GraphParseError(f"{kind} element {el.get('id', position)!r}: missing {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise GraphParseError(f"{kind} element {el.get('id', position)!r}: {exc}") from exc

    # Junctions: endpoints plus nodes shared between ways (or repeated within one)
    usage: dict[Any, int] = {}
    for way in ways:
        refs = way.get("nodes") or []
        for ref in refs:
            if ref not in coords:
                raise GraphParseError(f"way {way['id']!r} references missing node {ref!r}")
            usage[ref] = usage.get(ref, 0) + 1
    junctions = set()
    for way in ways:
        refs = way.get("nodes") or []
        if len(refs) >= 2:
            junctions.add(refs[0])
            junctions.add(refs[-1])
    junctions.update(ref for ref, n in usage.items() if n > 1)

    edges = []
    for way in ways:
        refs = list(way.get("nodes") or [])
        if len(refs) < 2:
            continue
        tags = way.get("tags") or {}
        oneway = str(tags.get("oneway", "no")).lower()
        if oneway in _ONEWAY_REVERSE:
            refs.reverse()
        lanes = tags.get("lanes")
        try:
            lanes = int(str(lanes).split(";")[0]) if lanes is not None else DEFAULT_LANES
        except ValueError:
            lanes = DEFAULT_LANES
        maxspeed = _parse_maxspeed(tags.get("maxspeed"))
        start = 0
        segment = 0
        for i in range(1, len(refs)):
            if refs[i] in junctions or i == len(refs) - 1:
                length = sum(
                    haversine_m(*coords[refs[j]], *coords[refs[j + 1]]) for j in range(start, i)
                )
                if length > 0:
                    edges.append(
                        {
                            "id": f"{way['id']}:{segment}",
                            "from": refs[start],
                            "to": refs[i],
                            "length_m": length,
                            "oneway": oneway in _ONEWAY_FORWARD or oneway in _ONEWAY_REVERSE,
                            "lanes": max(1, lanes),
                            "maxspeed_mps": maxspeed,
                        }
                    )
                    segment += 1
                start = i
    used = sorted({e["from"] for e in edges} | {e["to"] for e in edges}, key=id_key)
    nodes = [Node(ref, coords[ref][0], coords[ref][1]) for ref in used]
    return _expand(nodes, edges, cell_length)


def load_graph(source: bytes | str | dict, fmt: str = "native", cell_length: float = CELL_LENGTH_M) -> RoadGraph:
    """Parse and validate a road graph document."""
    if fmt not in FORMATS:
        raise GraphParseError(f"unknown graph format {fmt!r}; expected one of {FORMATS}")
    if isinstance(source, dict):
        doc = source
    else:
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise GraphParseError(f"graph document is not valid JSON: {exc}") from exc
    return _native(doc, cell_length) if fmt == "native" else _osm(doc, cell_length)


def load_graph_file(path: str | Path, fmt: str = "native", cell_length: float = CELL_LENGTH_M) -> RoadGraph:
    path = Path(path)
    try:
        return load_graph(path.read_bytes(), fmt, cell_length)
    except GraphParseError as exc:
        raise GraphParseError(f"{path}: {exc}") from exc


def _meters_to_latlon(x: float, y: float, lat0: float = 45.0, lon0: float = 9.0) -> tuple[float, float]:
    lat = lat0 + math.degrees(y / EARTH_RADIUS_M)
    lon = lon0 + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return lat, lon


def ring_graph(
    n_nodes: int,
    length_m: float = 75.0,
    oneway: bool = True,
    lanes: int = DEFAULT_LANES,
    capacity_per_step: int | None = None,
    cell_length: float = CELL_LENGTH_M,
) -> RoadGraph:
    """Closed ring of n_nodes junctions spaced length_m apart."""
    if n_nodes < 2:
        raise GraphParseError("ring needs at least 2 nodes")
    radius = n_nodes * length_m / (2 * math.pi)
    nodes = []
    for i in range(n_nodes):
        angle = 2 * math.pi * i / n_nodes
        nodes.append(Node(i, *_meters_to_latlon(radius * math.cos(angle), radius * math.sin(angle))))
    edges = [
        {
            "id": f"r{i}",
            "from": i,
            "to": (i + 1) % n_nodes,
            "length_m": length_m,
            "oneway": oneway,
            "lanes": lanes,
            "capacity_per_step": capacity_per_step,
        }
        for i in range(n_nodes)
    ]
    return _expand(nodes, edges, cell_length)


def grid_graph(
    rows: int,
    cols: int,
    length_m: float = 150.0,
    oneway: bool = False,
    lanes: int = DEFAULT_LANES,
    capacity_per_step: int | None = None,
    cell_length: float = CELL_LENGTH_M,
) -> RoadGraph:
    """Manhattan grid; node id = row * cols + col."""
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise GraphParseError("grid needs at least 2 nodes")
    nodes = [
        Node(r * cols + c, *_meters_to_latlon(c * length_m, r * length_m))
        for r in range(rows)
        for c in range(cols)
    ]
    edges = []
    for r in range(rows):
        for c in range(cols):
            here = r * cols + c
            if c + 1 < cols:
                edges.append({"id": f"h{r}_{c}", "from": here, "to": here + 1, "length_m": length_m,
                              "oneway": oneway, "lanes": lanes, "capacity_per_step": capacity_per_step})
            if r + 1 < rows:
                edges.append({"id": f"v{r}_{c}", "from": here, "to": here + cols, "length_m": length_m,
                              "oneway": oneway, "lanes": lanes, "capacity_per_step": capacity_per_step})
    return _expand(nodes, edges, cell_length)
