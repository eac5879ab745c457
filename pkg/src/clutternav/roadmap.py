"""Visibility roadmap over buffered obstacles, with two-tier link clearance.

Graph nodes are the vertices of obstacles inflated by (link_clearance +
margin); graph edges avoid every inflated interior. Queries connect the start
under a relaxed rule (the raw segment keeps link_clearance from the original
obstacles), because a previously optimized steady state may hug the buffer
boundary; the target and all interior links use the inflated-obstacle rule.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .geometry import AabbIndex, Polytope2, WorkspaceBox, batch_hull_distance, inflate

__all__ = ["NoPath", "Roadmap", "build_roadmap", "shortest_path"]

_NODE_DEDUP = 1e-7


class NoPath(RuntimeError):
    """No admissible waypoint sequence connects the query endpoints."""


@dataclass
class Roadmap:
    """Precomputed visibility graph plus the data needed to answer queries."""

    nodes: np.ndarray  # (n, 2)
    indptr: np.ndarray  # CSR adjacency
    indices: np.ndarray
    weights: np.ndarray
    obstacles: list
    inflated: list
    workspace: WorkspaceBox
    link_clearance: float
    margin: float
    obstacle_index: AabbIndex = field(repr=False, default=None)


def _poly_blocks(poly: Polytope2, p0, p1):
    """True where segments pass through the polygon's interior.

    Segments that only touch the boundary (including sliding along an edge)
    do not count as blocked.
    """
    V = poly.vertices
    e = np.roll(V, -1, axis=0) - V
    nrm = np.stack([e[:, 1], -e[:, 0]], axis=1)  # outward for CCW
    off = np.einsum("ej,ej->e", nrm, V)
    d = p1 - p0
    A = d @ nrm.T  # (m, E)
    C = off - p0 @ nrm.T
    small = np.abs(A) <= 1e-14
    # rows fully outside one half-plane can never reach the interior
    dead = np.any(small & (C < -1e-14), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = C / A
    lo = np.where(~small & (A < 0), ratio, -np.inf)
    hi = np.where(~small & (A > 0), ratio, np.inf)
    t0 = np.maximum(lo.max(axis=1), 0.0)
    t1 = np.minimum(hi.min(axis=1), 1.0)
    enters = (t1 - t0) > 1e-12
    tm = 0.5 * (t0 + t1)
    mid = p0 + tm[:, None] * d
    margin = mid @ nrm.T - off
    interior = np.all(margin < -1e-9, axis=1)
    return enters & interior & ~dead


def _visible(inflated, p0, p1):
    """True where segments avoid every inflated interior (boundary contact ok)."""
    ok = np.ones(len(p0), dtype=bool)
    for poly in inflated:
        lo, hi = poly.aabb
        slo = np.minimum(p0, p1)
        shi = np.maximum(p0, p1)
        near = ok & ~(np.any(slo > hi[None, :], axis=1) | np.any(shi < lo[None, :], axis=1))
        if not near.any():
            continue
        idx = np.flatnonzero(near)
        blocked = _poly_blocks(poly, p0[idx], p1[idx])
        ok[idx[blocked]] = False
    return ok


def _clearance_ok(obstacles, p0, p1, clearance):
    """True where raw segments keep at least `clearance` from every obstacle."""
    ok = np.ones(len(p0), dtype=bool)
    if not obstacles:
        return ok
    for i, poly in enumerate(obstacles):
        lo, hi = poly.aabb
        slo = np.minimum(p0, p1) - clearance
        shi = np.maximum(p0, p1) + clearance
        near = ok & ~(np.any(slo > hi[None, :], axis=1) | np.any(shi < lo[None, :], axis=1))
        if not near.any():
            continue
        idx = np.flatnonzero(near)
        segs = np.stack([p0[idx], p1[idx]], axis=1)
        V = np.broadcast_to(poly.vertices, (len(idx),) + poly.vertices.shape)
        dist, _, _ = batch_hull_distance(segs, np.ascontiguousarray(V))
        ok[idx[dist < clearance - 1e-9]] = False
    return ok


def build_roadmap(obstacles, workspace: WorkspaceBox, link_clearance, margin=0.01, sides=8):
    """Build the visibility graph over obstacles inflated by clearance + margin.

    Inflated vertices outside the workspace, or strictly inside another
    inflated obstacle, are dropped. Edges connect every mutually visible node
    pair; sliding along an inflated boundary is allowed.
    """
    inflated = [inflate(o, link_clearance + margin, sides) for o in obstacles]
    pts = []
    for i, poly in enumerate(inflated):
        for v in poly.vertices:
            if not workspace.contains(v):
                continue
            buried = any(
                other.contains(v, tol=-1e-9)
                for j, other in enumerate(inflated)
                if j != i
            )
            if not buried:
                pts.append(v)
    if pts:
        arr = np.array(pts)
        _, keep = np.unique(np.round(arr / _NODE_DEDUP).astype(np.int64), axis=0, return_index=True)
        nodes = arr[np.sort(keep)]
    else:
        nodes = np.zeros((0, 2))

    n = len(nodes)
    rows = np.zeros(0, dtype=np.int64)
    cols = np.zeros(0, dtype=np.int64)
    lens = np.zeros(0)
    if n >= 2:
        iu, ju = np.triu_indices(n, k=1)
        p0, p1 = nodes[iu], nodes[ju]
        vis = _visible(inflated, p0, p1)
        iu, ju = iu[vis], ju[vis]
        d = np.linalg.norm(nodes[iu] - nodes[ju], axis=1)
        rows = np.concatenate([iu, ju])
        cols = np.concatenate([ju, iu])
        lens = np.concatenate([d, d])
        order = np.lexsort((cols, rows))
        rows, cols, lens = rows[order], cols[order], lens[order]
    counts = np.zeros(n + 1, dtype=np.int64)
    np.add.at(counts[1:], rows, 1)
    indptr = np.cumsum(counts)
    return Roadmap(
        nodes=nodes,
        indptr=indptr,
        indices=cols.astype(np.int64),
        weights=lens,
        obstacles=list(obstacles),
        inflated=inflated,
        workspace=workspace,
        link_clearance=float(link_clearance),
        margin=float(margin),
        obstacle_index=AabbIndex.from_polytopes(list(obstacles)),
    )


def shortest_path(rm: Roadmap, start, target):
    """Shortest admissible waypoint sequence from start to target.

    The first link keeps link_clearance from the original obstacles (relaxed
    rule); every other link avoids the inflated interiors. Returns an (m, 2)
    array beginning at start and ending at target; raises NoPath when no
    sequence exists. Ties are broken by node index, so queries on identical
    inputs return identical paths.
    """
    start = np.asarray(start, dtype=float)
    target = np.asarray(target, dtype=float)
    if not (rm.workspace.contains(start) and rm.workspace.contains(target)):
        raise NoPath("query endpoint outside the workspace")
    n = len(rm.nodes)
    s_id, t_id = n, n + 1

    # candidate first links: start to every node, and straight to the target
    ends = np.vstack([rm.nodes, target[None, :]]) if n else target[None, :]
    starts = np.broadcast_to(start, ends.shape)
    first_ok = _clearance_ok(rm.obstacles, np.ascontiguousarray(starts), ends, rm.link_clearance)
    # target links from every node, under the inflated rule
    if n:
        tstarts = rm.nodes
        tends = np.broadcast_to(target, tstarts.shape)
        target_ok = _visible(rm.inflated, tstarts, np.ascontiguousarray(tends))
    else:
        target_ok = np.zeros(0, dtype=bool)

    dist = np.full(n + 2, np.inf)
    parent = np.full(n + 2, -1, dtype=int)
    dist[s_id] = 0.0
    heap = [(0.0, s_id)]
    visited = np.zeros(n + 2, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if visited[u]:
            continue
        visited[u] = True
        if u == t_id:
            break
        if u == s_id:
            nbrs = np.flatnonzero(first_ok)
            for v in nbrs:
                vid = t_id if v == n else v
                w = float(np.linalg.norm(ends[v] - start))
                if d + w < dist[vid] - 1e-15:
                    dist[vid] = d + w
                    parent[vid] = u
                    heapq.heappush(heap, (dist[vid], vid))
            continue
        # graph neighbors
        for k in range(rm.indptr[u], rm.indptr[u + 1]):
            v = int(rm.indices[k])
            w = float(rm.weights[k])
            if d + w < dist[v] - 1e-15:
                dist[v] = d + w
                parent[v] = u
                heapq.heappush(heap, (dist[v], v))
        if target_ok[u]:
            w = float(np.linalg.norm(target - rm.nodes[u]))
            if d + w < dist[t_id] - 1e-15:
                dist[t_id] = d + w
                parent[t_id] = u
                heapq.heappush(heap, (dist[t_id], t_id))
    if not np.isfinite(dist[t_id]):
        raise NoPath("no admissible route to the target")
    chain = [t_id]
    while chain[-1] != s_id:
        chain.append(int(parent[chain[-1]]))
    chain.reverse()
    out = [start]
    for vid in chain[1:]:
        out.append(target if vid == t_id else rm.nodes[vid])
    return np.array(out)
