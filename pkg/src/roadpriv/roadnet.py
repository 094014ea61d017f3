"""Road network graph, geometry, shortest paths and time-bounded reachability."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import (
    DanglingEdge,
    DuplicateNode,
    EmptyGraph,
    EmptyResult,
    FormatError,
    InvalidCoordinate,
    NonPositiveWeight,
    UnknownNode,
)
from .units import (
    DEFAULT_SPEED_LIMIT_KMH,
    EARTH_RADIUS_KM,
    SECONDS_PER_DAY,
    travel_radius_km,
)

# Slack when comparing summed float travel times against a horizon.
REACH_TOL_S = 1e-9
# Distances closer than this are treated as ties when snapping.
SNAP_TIE_KM = 1e-12


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise InvalidCoordinate(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise InvalidCoordinate(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise InvalidCoordinate(f"longitude {self.lon} out of range")


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; broadcasts over numpy arrays."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine distance between two points in km."""
    if a == b:
        return 0.0
    return float(haversine_km(a.lat, a.lon, b.lat, b.lon))


@dataclass(frozen=True)
class BucketSchedule:
    """Maps wall-clock time to a weight bucket.

    ``windows`` holds ``(start_s, end_s, bucket)`` in seconds of the UTC day,
    half-open. Times outside every window fall into ``default``.
    """

    windows: tuple[tuple[float, float, int], ...] = ()
    default: int = 0

    def bucket_at(self, timestamp: float) -> int:
        tod = float(timestamp) % SECONDS_PER_DAY
        for start, end, bucket in self.windows:
            if start <= tod < end:
                return bucket
        return self.default


@dataclass(frozen=True)
class ShortestPathTree:
    root: int
    cost: np.ndarray
    parent: np.ndarray

    def path_to(self, target: int) -> list[int]:
        if not math.isfinite(self.cost[target]):
            return []
        path = [int(target)]
        while path[-1] != self.root:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]


@dataclass(frozen=True)
class ReachableSet:
    origin: int
    horizon: float
    members: frozenset

    def __contains__(self, node) -> bool:
        return node in self.members

    def __len__(self) -> int:
        return len(self.members)

    def sorted(self) -> np.ndarray:
        return np.array(sorted(self.members), dtype=np.int64)


@dataclass(frozen=True, eq=False)
class RoadGraph:
    """Immutable directed road graph with dense node ids ``0..L-1``.

    Adjacency is stored as CSR with neighbor lists sorted by target id.
    ``weights`` has shape ``(n_buckets, n_edges)`` aligned with ``indices``.
    """

    lat: np.ndarray
    lon: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    bucket_names: tuple[str, ...] = ("default",)
    schedule: BucketSchedule = field(default_factory=BucketSchedule)
    external_ids: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.lat)

    @property
    def n_edges(self) -> int:
        return len(self.indices)

    @property
    def n_buckets(self) -> int:
        return self.weights.shape[0]

    def point(self, i: int) -> GeoPoint:
        self._check(i)
        return GeoPoint(float(self.lat[i]), float(self.lon[i]))

    def neighbors(self, i: int) -> list[int]:
        self._check(i)
        return self.indices[self.indptr[i]:self.indptr[i + 1]].tolist()

    def adjacency(self) -> dict[int, list[int]]:
        return {i: self.neighbors(i) for i in range(self.n_nodes)}

    def edges(self, bucket: int = 0):
        """Yield ``(from, to, weight)`` in CSR order."""
        src = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        for u, v, w in zip(src.tolist(), self.indices.tolist(), self.weights[bucket].tolist()):
            yield u, v, w

    def bucket_index(self, bucket) -> int:
        if isinstance(bucket, str):
            try:
                return self.bucket_names.index(bucket)
            except ValueError:
                raise KeyError(f"unknown bucket {bucket!r}") from None
        b = int(bucket)
        if not 0 <= b < self.n_buckets:
            raise KeyError(f"bucket index {b} out of range")
        return b

    def distances_from(self, i: int) -> np.ndarray:
        self._check(i)
        return haversine_km(self.lat[i], self.lon[i], self.lat, self.lon)

    def distance_matrix(self) -> np.ndarray:
        return haversine_km(self.lat[:, None], self.lon[:, None], self.lat[None, :], self.lon[None, :])

    def _check(self, i) -> None:
        if not isinstance(i, (int, np.integer)) or not 0 <= int(i) < self.n_nodes:
            raise UnknownNode(i)


def build_graph(
    nodes: Iterable,
    edges: Iterable,
    bucket_names: Sequence[str] = ("default",),
    schedule: BucketSchedule | None = None,
) -> RoadGraph:
    """Build a graph from ``(node_id, GeoPoint | (lat, lon))`` pairs and
    ``(from, to, weight)`` triples.

    ``weight`` is either a scalar (applied to every bucket) or a sequence with
    one entry per bucket. Ids that are already ``0..L-1`` are kept; any other
    unique integer ids are densified in sorted order and kept in
    ``external_ids``.
    """
    ids: list[int] = []
    lat: list[float] = []
    lon: list[float] = []
    seen: set[int] = set()
    for nid, pt in nodes:
        nid = int(nid)
        if nid in seen:
            raise DuplicateNode(nid)
        seen.add(nid)
        if not isinstance(pt, GeoPoint):
            pt = GeoPoint(float(pt[0]), float(pt[1]))
        ids.append(nid)
        lat.append(pt.lat)
        lon.append(pt.lon)
    n = len(ids)
    order = np.argsort(ids, kind="stable")
    sorted_ids = np.asarray(ids, dtype=np.int64)[order]
    dense = bool(n == 0 or (sorted_ids[0] == 0 and sorted_ids[-1] == n - 1))
    remap = {int(e): k for k, e in enumerate(sorted_ids.tolist())}
    lat_arr = np.asarray(lat, dtype=float)[order] if n else np.zeros(0)
    lon_arr = np.asarray(lon, dtype=float)[order] if n else np.zeros(0)

    n_buckets = len(bucket_names)
    src, dst, wts = [], [], []
    for u, v, w in edges:
        u, v = int(u), int(v)
        if u not in remap:
            raise DanglingEdge(f"edge ({u}, {v}): unknown node {u}")
        if v not in remap:
            raise DanglingEdge(f"edge ({u}, {v}): unknown node {v}")
        wv = np.broadcast_to(np.asarray(w, dtype=float), (n_buckets,))
        if not np.all(np.isfinite(wv)) or np.any(wv <= 0):
            raise NonPositiveWeight(f"edge ({u}, {v}) has weight {w!r}")
        src.append(remap[u])
        dst.append(remap[v])
        wts.append(wv)
    src_a = np.asarray(src, dtype=np.int64)
    dst_a = np.asarray(dst, dtype=np.int64)
    w_a = np.asarray(wts, dtype=float).reshape(-1, n_buckets).T.copy()
    perm = np.lexsort((dst_a, src_a))
    indptr = np.zeros(n + 1, dtype=np.int64)
    if len(src_a):
        np.add.at(indptr, src_a + 1, 1)
    indptr = np.cumsum(indptr)
    return RoadGraph(
        lat=lat_arr,
        lon=lon_arr,
        indptr=indptr,
        indices=dst_a[perm],
        weights=np.ascontiguousarray(w_a[:, perm]),
        bucket_names=tuple(bucket_names),
        schedule=schedule or BucketSchedule(),
        external_ids=None if dense else sorted_ids,
    )


def _subgraph(g: RoadGraph, keep: np.ndarray) -> tuple[RoadGraph, np.ndarray]:
    remap = np.full(g.n_nodes, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    src = np.repeat(np.arange(g.n_nodes), np.diff(g.indptr))
    ok = (remap[src] >= 0) & (remap[g.indices] >= 0)
    new_src = remap[src[ok]]
    indptr = np.zeros(len(keep) + 1, dtype=np.int64)
    np.add.at(indptr, new_src + 1, 1)
    ext = None if g.external_ids is None else g.external_ids[keep]
    sub = RoadGraph(
        lat=g.lat[keep].copy(),
        lon=g.lon[keep].copy(),
        indptr=np.cumsum(indptr),
        indices=remap[g.indices[ok]],
        weights=np.ascontiguousarray(g.weights[:, ok]),
        bucket_names=g.bucket_names,
        schedule=g.schedule,
        external_ids=ext,
    )
    return sub, remap


def crop_graph(g: RoadGraph, center: GeoPoint, radius: float) -> tuple[RoadGraph, np.ndarray]:
    """Keep nodes within ``radius`` km of ``center``.

    Returns the cropped graph and ``remap`` with ``remap[old] = new`` (``-1``
    for dropped nodes).
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    d = haversine_km(center.lat, center.lon, g.lat, g.lon)
    keep = np.flatnonzero(d <= radius)
    if len(keep) == 0:
        raise EmptyResult(f"no node within {radius} km of {center}")
    return _subgraph(g, keep)


def snap_to_node(g: RoadGraph, p: GeoPoint) -> int:
    """Nearest node to ``p``; ties go to the smallest id."""
    if g.n_nodes == 0:
        raise EmptyGraph("cannot snap onto an empty graph")
    d = haversine_km(p.lat, p.lon, g.lat, g.lon)
    return int(np.flatnonzero(d <= d.min() + SNAP_TIE_KM)[0])


def prune_by_speed(g: RoadGraph, i: int, dt: float, s_limit: float = DEFAULT_SPEED_LIMIT_KMH) -> np.ndarray:
    """Sorted ids of nodes within straight-line reach ``dt * s_limit`` of ``i``."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if not s_limit > 0:
        raise ValueError("s_limit must be positive")
    d = g.distances_from(i)
    inside = d <= travel_radius_km(dt, s_limit)
    inside[i] = True
    return np.flatnonzero(inside)


def dijkstra_spt(g: RoadGraph, root: int, bucket=0) -> ShortestPathTree:
    g._check(root)
    b = g.bucket_index(bucket)
    cost, parent = kernels.dijkstra(g.indptr, g.indices, g.weights[b], int(root))
    return ShortestPathTree(int(root), cost, parent)


def reachable_set(
    g: RoadGraph, i: int, dt: float, s_limit: float = DEFAULT_SPEED_LIMIT_KMH, bucket=0
) -> ReachableSet:
    """Nodes reachable from ``i`` within ``dt`` seconds.

    Searches only the subgraph induced by the speed ball around ``i``; the
    result is the same as thresholding full-graph travel times, because any
    node on a path of cost at most ``dt`` lies inside that ball.
    """
    ball = prune_by_speed(g, i, dt, s_limit)
    mask = np.zeros(g.n_nodes, dtype=np.uint8)
    mask[ball] = 1
    b = g.bucket_index(bucket)
    cost, _ = kernels.dijkstra(g.indptr, g.indices, g.weights[b], int(i), mask, float(dt) + REACH_TOL_S)
    members = np.flatnonzero(cost <= dt + REACH_TOL_S)
    return ReachableSet(int(i), float(dt), frozenset(members.tolist()))


def travel_cost(g: RoadGraph, i: int, j: int, bucket=0) -> float:
    g._check(j)
    return float(dijkstra_spt(g, i, bucket).cost[j])


def travel_cost_matrix(g: RoadGraph, bucket=0, sources: Sequence[int] | None = None) -> np.ndarray:
    """Rows of all-pairs travel times for ``sources`` (default: every node)."""
    b = g.bucket_index(bucket)
    src = range(g.n_nodes) if sources is None else sources
    out = np.empty((len(src), g.n_nodes))
    for r, s in enumerate(src):
        out[r], _ = kernels.dijkstra(g.indptr, g.indices, g.weights[b], int(s))
    return out


class ReachabilityIndex:
    """Memoized reachable sets keyed by ``(node, dt, bucket)``."""

    DENSE_MAX_NODES = 4096      # above this, unions fall back to per-node sets

    def __init__(self, g: RoadGraph, s_limit: float = DEFAULT_SPEED_LIMIT_KMH):
        self.g = g
        self.s_limit = s_limit
        self._cache: dict[tuple[int, float, int], np.ndarray] = {}
        self._ball: dict[tuple[int, float], np.ndarray] = {}
        self._dense: dict[tuple[float, int], tuple[np.ndarray, np.ndarray]] = {}

    def members(self, i: int, dt: float, bucket: int = 0) -> np.ndarray:
        key = (int(i), round(float(dt), 6), int(bucket))
        hit = self._cache.get(key)
        if hit is None:
            hit = reachable_set(self.g, int(i), float(dt), self.s_limit, bucket).sorted()
            self._cache[key] = hit
        return hit

    def union(self, nodes, dt: float, bucket: int = 0) -> np.ndarray:
        """Sorted ids reachable from any of ``nodes`` within ``dt``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        L = self.g.n_nodes
        if L > self.DENSE_MAX_NODES:
            return np.unique(np.concatenate([self.members(int(v), dt, bucket) for v in nodes]))
        key = (round(float(dt), 6), int(bucket))
        tab = self._dense.get(key)
        if tab is None:
            tab = self._dense[key] = (np.zeros((L, L), dtype=bool), np.zeros(L, dtype=bool))
        rows, done = tab
        for v in nodes[~done[nodes]].tolist():
            rows[v, self.members(v, dt, bucket)] = True
            done[v] = True
        return np.flatnonzero(rows[nodes].any(axis=0))

    def ball(self, i: int, dt: float) -> np.ndarray:
        key = (int(i), round(float(dt), 6))
        hit = self._ball.get(key)
        if hit is None:
            hit = prune_by_speed(self.g, int(i), float(dt), self.s_limit)
            self._ball[key] = hit
        return hit


# ---------------------------------------------------------------- CSV I/O

def read_nodes_csv(path) -> list[tuple[int, GeoPoint]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"node_id", "lat", "lon"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: node file needs header node_id,lat,lon")
        try:
            return [(int(r["node_id"]), GeoPoint(float(r["lat"]), float(r["lon"]))) for r in reader]
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: {exc}") from exc


def read_edges_csv(path) -> tuple[list[tuple[int, int, list[float]]], tuple[str, ...]]:
    """Parse an edge file into per-bucket weights.

    With a ``bucket`` column, each ``(from, to)`` pair may appear once per
    bucket. Buckets are ordered by first appearance; a pair missing a bucket
    inherits the weight of the first bucket listed for it.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        if not {"from", "to", "weight_seconds"} <= cols:
            raise FormatError(f"{path}: edge file needs header from,to,weight_seconds[,bucket]")
        has_bucket = "bucket" in cols
        buckets: list[str] = []
        table: dict[tuple[int, int], dict[str, float]] = {}
        order: list[tuple[int, int]] = []
        try:
            for r in reader:
                name = (r.get("bucket") or "default") if has_bucket else "default"
                if name not in buckets:
                    buckets.append(name)
                key = (int(r["from"]), int(r["to"]))
                if key not in table:
                    table[key] = {}
                    order.append(key)
                elif not has_bucket or name in table[key]:
                    # parallel edge in the same bucket: keep it as a separate edge
                    key = key + (len(order),)  # type: ignore[assignment]
                    table[key] = {}
                    order.append(key)
                table[key][name] = float(r["weight_seconds"])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if not buckets:
        buckets = ["default"]
    edges = []
    for key in order:
        per = table[key]
        first = next(iter(per.values()))
        edges.append((key[0], key[1], [per.get(b, first) for b in buckets]))
    return edges, tuple(buckets)


def load_graph(nodes_path, edges_path, schedule: BucketSchedule | None = None) -> RoadGraph:
    edges, buckets = read_edges_csv(edges_path)
    return build_graph(read_nodes_csv(nodes_path), edges, buckets, schedule)


def write_graph(g: RoadGraph, nodes_path, edges_path) -> None:
    ext = g.external_ids if g.external_ids is not None else np.arange(g.n_nodes)
    Path(nodes_path).parent.mkdir(parents=True, exist_ok=True)
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "lat", "lon"])
        for k in range(g.n_nodes):
            w.writerow([int(ext[k]), repr(float(g.lat[k])), repr(float(g.lon[k]))])
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        multi = g.n_buckets > 1
        w.writerow(["from", "to", "weight_seconds"] + (["bucket"] if multi else []))
        for b, name in enumerate(g.bucket_names):
            for u, v, wt in g.edges(b):
                row = [int(ext[u]), int(ext[v]), repr(wt)]
                w.writerow(row + ([name] if multi else []))


def grid_graph(
    rows: int,
    cols: int,
    cell_km: float = 0.1,
    origin: GeoPoint = GeoPoint(41.9028, 12.4964),
    speed_kmh: float | Mapping[str, float] | None = None,
    arterial_every: int = 0,
    arterial_kmh: float = 50.0,
) -> RoadGraph:
    """4-connected grid with bidirectional edges and row-major ids.

    Edge weight is the haversine length at ``speed_kmh`` (default 25 km/h);
    every ``arterial_every``-th row and column runs at ``arterial_kmh``.
    """
    speed = 25.0 if speed_kmh is None else float(speed_kmh)  # type: ignore[arg-type]
    dlat = cell_km / (EARTH_RADIUS_KM * math.pi / 180.0)
    dlon = dlat / math.cos(math.radians(origin.lat))
    nodes = []
    for r in range(rows):
        for c in range(cols):
            nodes.append((r * cols + c, GeoPoint(origin.lat + r * dlat, origin.lon + c * dlon)))

    def arterial(k: int) -> bool:
        return arterial_every > 0 and k % arterial_every == 0

    edges = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            for dr, dc in ((0, 1), (1, 0)):
                rr, cc = r + dr, c + dc
                if rr >= rows or cc >= cols:
                    continue
                v = rr * cols + cc
                fast = arterial(r) if dr == 0 else arterial(c)
                s = arterial_kmh if fast else speed
                length = haversine(nodes[u][1], nodes[v][1])
                t = length / s * 3600.0
                edges.append((u, v, t))
                edges.append((v, u, t))
    return build_graph(nodes, edges)
