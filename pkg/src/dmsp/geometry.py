"""Spatial K-nearest-neighbor graphs and the raw edge geometry (distance, angle).

Every node of a graph receives exactly ``k`` directed edges, one from each of its
``k`` nearest other nodes.  Ties in distance are broken by the smaller node id so
that graph construction is reproducible.

Two construction paths share one contract:

* :func:`build_knn_graph` materialises the whole graph by full pairwise scan.
* :class:`NeighborIndex` + :func:`receptive_field` extract only the part of the
  graph that can influence the target node after ``L`` message-passing layers,
  which is what training and prediction actually need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * math.pi

# Key used for the query node in tie-breaking; sorts before every sample index.
TARGET_KEY = -1


class GeometryError(ValueError):
    """Raised for invalid coordinates, infeasible neighbor counts or bad edges."""


@dataclass(frozen=True)
class GeoPoint:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"invalid geometry: non-finite coordinate ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


class EdgeGeometry(NamedTuple):
    distance: float
    angle: float


class NodeRecord(NamedTuple):
    node_id: int
    location: GeoPoint
    attributes: np.ndarray


def as_points(points) -> np.ndarray:
    """Coerce GeoPoints / pairs / an (n, 2) array to a validated float array."""
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=float)
    else:
        rows = [p.as_array() if isinstance(p, GeoPoint) else p for p in points]
        arr = np.asarray(rows, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"invalid geometry: expected (n, 2) coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("invalid geometry: non-finite coordinate")
    return arr


def _distance(dx, dy):
    # One formula everywhere so both construction paths agree bit for bit.
    return np.sqrt(dx * dx + dy * dy)


def knn_indices(points, query_index: int, k: int) -> list[int]:
    """Return the ``k`` nearest other points to ``points[query_index]``.

    Exhaustive scan.  The result is sorted by distance, ties by smaller index.
    """
    pts = as_points(points)
    n = len(pts)
    if not 0 <= query_index < n:
        raise GeometryError(f"invalid geometry: query index {query_index} out of range")
    if k < 1 or k > n - 1:
        raise GeometryError(f"insufficient neighbors: k={k} with {n - 1} other points")
    d = _distance(pts[:, 0] - pts[query_index, 0], pts[:, 1] - pts[query_index, 1])
    ids = np.arange(n)
    keep = ids != query_index
    order = np.lexsort((ids[keep], d[keep]))
    return [int(i) for i in ids[keep][order[:k]]]


def clockwise_angles(src_xy: np.ndarray, dst_xy: np.ndarray,
                     nbr_xy: np.ndarray, nbr_mask: np.ndarray) -> np.ndarray:
    """Vectorised edge angle for E edges.

    For edge ``u -> o`` the angle is the clockwise rotation at ``u`` from the ray
    ``u -> o`` to the first other neighbor ray of ``u`` met while rotating,
    wrapped into ``[-pi, pi)``.  ``nbr_xy`` has shape (E, m, 2) and holds the
    positions of ``u``'s neighbors; ``nbr_mask`` marks the usable ones.  Edges
    with a zero-length ray or no usable neighbor get angle 0.
    """
    ray = dst_xy - src_xy
    rel = nbr_xy - src_xy[:, None, :]
    ray_len = _distance(ray[:, 0], ray[:, 1])
    rel_len = _distance(rel[..., 0], rel[..., 1])
    mask = nbr_mask & (rel_len > 0.0)
    theta_ray = np.arctan2(ray[:, 1], ray[:, 0])
    theta_nbr = np.arctan2(rel[..., 1], rel[..., 0])
    # arctan2 is counter-clockwise, so clockwise rotation is ray minus neighbor.
    delta = np.mod(theta_ray[:, None] - theta_nbr, TWO_PI)
    delta = np.where(mask, delta, np.inf)
    best = delta.min(axis=1) if delta.shape[1] else np.full(len(ray), np.inf)
    ok = np.isfinite(best) & (ray_len > 0.0)
    out = np.mod(np.where(ok, best, 0.0) + math.pi, TWO_PI) - math.pi
    out = np.where(ok, out, 0.0)
    # mod can round up to exactly 2*pi; keep the half-open interval honest.
    return np.where(out >= math.pi, -math.pi, out)


@dataclass
class SpatialKnnGraph:
    """Directed KNN graph; node 0 is the target, edges grouped by receiving node.

    ``edges[r*k:(r+1)*k]`` are the ``k`` in-edges of node ``r`` ordered by
    neighbor rank, so per-node quantities can be reshaped to ``(n, k, ...)``.
    """

    points: np.ndarray
    attributes: np.ndarray
    edges: np.ndarray
    distances: np.ndarray
    angles: np.ndarray
    k: int
    target_node: int = 0

    @property
    def num_nodes(self) -> int:
        return len(self.points)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def nodes(self) -> Iterator[NodeRecord]:
        for i, (x, y) in enumerate(self.points):
            yield NodeRecord(i, GeoPoint(float(x), float(y)), self.attributes[i])

    def in_neighbors(self, node: int) -> np.ndarray:
        return self.edges[node * self.k:(node + 1) * self.k, 0]

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.num_nodes)

    def edge_index(self, src: int, dst: int) -> int:
        if not 0 <= dst < self.num_nodes:
            raise GeometryError(f"edge not in graph: ({src}, {dst})")
        hits = np.flatnonzero(self.in_neighbors(dst) == src)
        if len(hits) == 0:
            raise GeometryError(f"edge not in graph: ({src}, {dst})")
        return dst * self.k + int(hits[0])

    def geometry(self, src: int, dst: int) -> EdgeGeometry:
        e = self.edge_index(src, dst)
        return EdgeGeometry(float(self.distances[e]), float(self.angles[e]))


def _edge_angles_from_neighbors(points: np.ndarray, nbr: np.ndarray,
                                src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Angles for edges src->dst given every node's in-neighbor table ``nbr``."""
    src_nbrs = nbr[src]
    return clockwise_angles(points[src], points[dst], points[src_nbrs], src_nbrs != dst[:, None])


def build_knn_graph(target_location, samples: Sequence, k: int,
                    target_attributes=None) -> SpatialKnnGraph:
    """Build the full KNN graph over the target location and the samples.

    ``samples`` is a sequence of ``(location, attribute_vector)`` pairs.  The target
    gets node id 0 and samples ids ``1..n`` in the order given.  The target's
    attribute row is ``target_attributes`` or zeros of the sample width.
    """
    if len(samples) == 0:
        raise GeometryError("insufficient neighbors: no samples")
    locs = [loc for loc, _ in samples]
    attrs = np.asarray([np.asarray(a, dtype=float) for _, a in samples], dtype=float)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    target = as_points([target_location])
    points = np.vstack([target, as_points(locs)])
    n = len(points)
    if k < 1 or k > n - 1:
        raise GeometryError(f"insufficient neighbors: k={k} with {n} nodes")
    if target_attributes is None:
        target_attributes = np.zeros(attrs.shape[1])
    node_attrs = np.vstack([np.asarray(target_attributes, dtype=float)[None, :], attrs])

    dx = points[:, 0][None, :] - points[:, 0][:, None]
    dy = points[:, 1][None, :] - points[:, 1][:, None]
    dist = _distance(dx, dy)
    np.fill_diagonal(dist, np.inf)
    # Stable sort keeps the smaller id first among equal distances.
    nbr = np.argsort(dist, axis=1, kind="stable")[:, :k]

    dst = np.repeat(np.arange(n), k)
    src = nbr.ravel()
    edges = np.stack([src, dst], axis=1)
    distances = dist[dst, src]
    angles = _edge_angles_from_neighbors(points, nbr, src, dst)
    return SpatialKnnGraph(points, node_attrs, edges, distances, angles, k)


def edge_angle(graph: SpatialKnnGraph, edge: tuple[int, int]) -> float:
    """Clockwise angle of ``edge = (src, dst)`` measured at ``src``."""
    src, dst = int(edge[0]), int(edge[1])
    graph.edge_index(src, dst)
    nbr = graph.in_neighbors(src)
    ang = clockwise_angles(graph.points[[src]], graph.points[[dst]],
                           graph.points[nbr][None, :, :], (nbr != dst)[None, :])
    return float(ang[0])


class NeighborIndex:
    """Exact KNN over a fixed point set plus an optional extra query node.

    Backed by a KD-tree, but returns exactly what an exhaustive scan with
    (distance, key) ordering would.  Sample ``i`` has key ``i``; the target has
    :data:`TARGET_KEY`, so it wins distance ties, matching node id 0 in
    :func:`build_knn_graph`.
    """

    def __init__(self, points) -> None:
        self.points = as_points(points)
        self.tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def query(self, positions: np.ndarray, self_keys: np.ndarray, k: int,
              extra_point: np.ndarray | None = None,
              target_index: int | None = None) -> np.ndarray:
        """k nearest neighbor keys for each query row, excluding the query itself.

        ``extra_point`` adds a target node (key TARGET_KEY) that is not in the tree.
        ``target_index`` instead marks an existing sample as the target, giving it
        TARGET_KEY.  Returned keys index samples, with TARGET_KEY for the target.
        """
        n_tree = len(self.points)
        n_total = n_tree + (extra_point is not None)
        if k < 1 or k > n_total - 1:
            raise GeometryError(f"insufficient neighbors: k={k} with {n_total} nodes")
        positions = np.atleast_2d(positions)
        kq = min(k + 1, n_tree)
        d, _ = self.tree.query(positions, kq)
        d = np.asarray(d).reshape(len(positions), kq)
        radius = d[:, -1] * (1.0 + 1e-9) + 1e-12
        balls = self.tree.query_ball_point(positions, radius)

        out = np.empty((len(positions), k), dtype=np.int64)
        for row, (pos, cand, me) in enumerate(zip(positions, balls, self_keys)):
            cand = np.asarray(cand, dtype=np.int64)
            cand_xy = self.points[cand]
            keys = cand.copy()
            if target_index is not None:
                keys[cand == target_index] = TARGET_KEY
            if extra_point is not None:
                keys = np.append(keys, TARGET_KEY)
                cand_xy = np.vstack([cand_xy, extra_point[None, :]])
            keep = keys != me
            keys, cand_xy = keys[keep], cand_xy[keep]
            dist = _distance(cand_xy[:, 0] - pos[0], cand_xy[:, 1] - pos[1])
            order = np.lexsort((keys, dist))
            out[row] = keys[order[:k]]
        return out


@dataclass
class ReceptiveField:
    """The part of a KNN graph that reaches the target within ``depth`` hops.

    Local node 0 is the target; nodes are in BFS order so the nodes within ``h``
    hops are a prefix of length ``level_sizes[h]``.  ``nbr[r]`` lists local ids
    of node ``r``'s in-neighbors for every node within ``depth`` hops.
    ``distances``/``angles`` cover the in-edges of the nodes within
    ``depth - 1`` hops, grouped by receiving node like :class:`SpatialKnnGraph`.
    """

    keys: np.ndarray
    points: np.ndarray
    nbr: np.ndarray
    level_sizes: list[int]
    distances: np.ndarray
    angles: np.ndarray
    k: int
    depth: int
    meta: dict = field(default_factory=dict)


def receptive_field(index: NeighborIndex, k: int, depth: int,
                    target_location=None, target_index: int | None = None) -> ReceptiveField:
    """Extract the ``depth``-hop in-neighborhood of the target node.

    Exactly one of ``target_location`` (a new node at that position) or
    ``target_index`` (an existing sample acting as the target) must be given.
    """
    if (target_location is None) == (target_index is None):
        raise ValueError("give exactly one of target_location or target_index")
    extra = None
    if target_location is not None:
        extra = as_points([target_location])[0]
        target_pos = extra
    else:
        target_pos = index.points[target_index]

    def pos_of(key: int) -> np.ndarray:
        if key == TARGET_KEY:
            return target_pos
        return index.points[key]

    keys = [TARGET_KEY]
    local = {TARGET_KEY: 0}
    level_sizes = [1]
    nbr_rows: list[np.ndarray] = []
    frontier = [TARGET_KEY]
    for _ in range(depth):
        if not frontier:
            # Closed neighborhood: every in-neighbor was already reached.
            level_sizes.append(len(keys))
            continue
        qpos = np.array([pos_of(key) for key in frontier])
        qkeys = np.array(frontier, dtype=np.int64)
        if target_index is not None:
            # The target sample keeps its tree index; map its key back for self-exclusion.
            res = index.query(qpos, qkeys, k, extra_point=None, target_index=target_index)
        else:
            res = index.query(qpos, qkeys, k, extra_point=extra)
        nxt = []
        for row in res:
            for key in row:
                key = int(key)
                if key not in local:
                    local[key] = len(keys)
                    keys.append(key)
                    nxt.append(key)
            nbr_rows.append(np.array([local[int(key)] for key in row], dtype=np.int64))
        level_sizes.append(len(keys))
        frontier = nxt

    n_with_nbr = len(nbr_rows)
    # nbr rows exist for nodes within depth-1 hops; the edges feeding them start
    # at nodes up to depth hops away, whose own neighbors define their angles.
    n_dst = level_sizes[depth - 1] if depth >= 1 else 0
    dst = np.repeat(np.arange(n_dst), k)
    src = np.concatenate(nbr_rows[:n_dst]) if n_dst else np.zeros(0, dtype=np.int64)

    missing = [m for m in np.unique(src) if m >= n_with_nbr]
    if missing:
        qpos = np.array([pos_of(keys[m]) for m in missing])
        qkeys = np.array([keys[m] for m in missing], dtype=np.int64)
        if target_index is not None:
            res = index.query(qpos, qkeys, k, target_index=target_index)
        else:
            res = index.query(qpos, qkeys, k, extra_point=extra)
        extra_rows = {}
        for m, row in zip(missing, res):
            ids = []
            for key in row:
                key = int(key)
                if key not in local:
                    local[key] = len(keys)
                    keys.append(key)
                ids.append(local[key])
            extra_rows[int(m)] = ids

    keys_arr = np.array(keys, dtype=np.int64)
    points = np.array([pos_of(key) for key in keys])
    nbr = np.full((len(keys), k), -1, dtype=np.int64)
    if n_with_nbr:
        nbr[:n_with_nbr] = np.vstack(nbr_rows)
    if missing:
        for m, ids in extra_rows.items():
            nbr[m] = ids

    src_nbrs = nbr[src]
    distances = _distance(points[src, 0] - points[dst, 0], points[src, 1] - points[dst, 1])
    angles = clockwise_angles(points[src], points[dst], points[np.maximum(src_nbrs, 0)],
                              (src_nbrs != dst[:, None]) & (src_nbrs >= 0))
    return ReceptiveField(keys_arr, points, nbr, level_sizes, distances, angles, k, depth)
