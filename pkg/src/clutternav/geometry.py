"""Convex 2-D geometry primitives: hulls, distances, inflation, broad-phase index."""

from __future__ import annotations

import numpy as np

__all__ = [
    "DegenerateInput",
    "Polytope2",
    "WorkspaceBox",
    "AabbIndex",
    "convex_hull",
    "min_distance",
    "vertex_set_distance",
    "segment_polytope_distance",
    "batch_hull_distance",
    "inflate",
    "robot_footprint",
    "footprint_vertices",
    "FOOTPRINT_LENGTH",
    "FOOTPRINT_WIDTH",
    "FOOTPRINT_CIRCUMRADIUS",
]

# Rectangular vehicle hull, axis-aligned in the body frame and centered on the
# tracked position. The circumradius is what clearance margins must cover.
FOOTPRINT_LENGTH = 0.128
FOOTPRINT_WIDTH = 0.071
FOOTPRINT_CIRCUMRADIUS = float(np.hypot(FOOTPRINT_LENGTH / 2, FOOTPRINT_WIDTH / 2))

_DUP_TOL = 1e-9


class DegenerateInput(ValueError):
    """Geometric input that violates a primitive's preconditions."""


def _cross(a, b):
    """z-component of the 2-D cross product, broadcasting over leading dims."""
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class Polytope2:
    """Convex polygon stored as an (m, 2) array of CCW vertices.

    Vertices must be strictly convex (no collinear triples), free of
    duplicates within 1e-9, and finite. The vertex array is frozen.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        V = np.array(vertices, dtype=float)
        if V.ndim != 2 or V.shape[1] != 2 or V.shape[0] < 3:
            raise DegenerateInput("need an (m, 2) array with m >= 3")
        if not np.all(np.isfinite(V)):
            raise DegenerateInput("non-finite vertex")
        d = V - np.roll(V, 1, axis=0)
        if np.any(np.hypot(d[:, 0], d[:, 1]) < _DUP_TOL):
            raise DegenerateInput("duplicate vertices within 1e-9")
        e = np.roll(V, -1, axis=0) - V
        turn = _cross(e, np.roll(e, -1, axis=0))
        if np.any(turn <= 0.0):
            raise DegenerateInput("vertices must be strictly convex in CCW order")
        V.flags.writeable = False
        self.vertices = V

    def __len__(self):
        return self.vertices.shape[0]

    def __repr__(self):
        return f"Polytope2({self.vertices.tolist()!r})"

    @property
    def aabb(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def centroid(self):
        return self.vertices.mean(axis=0)

    def edge_normals(self):
        """Outward unit normals, one per CCW edge."""
        e = np.roll(self.vertices, -1, axis=0) - self.vertices
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def contains(self, points, tol=0.0):
        """True where points lie inside (or within tol of) the polygon."""
        p = np.asarray(points, dtype=float)
        squeeze = p.ndim == 1
        p = np.atleast_2d(p)
        n = self.edge_normals()
        off = np.einsum("ej,ej->e", n, self.vertices)
        margin = p @ n.T - off  # positive outside each edge half-plane
        inside = np.all(margin <= tol, axis=1)
        return bool(inside[0]) if squeeze else inside


class WorkspaceBox:
    """Axis-aligned workspace rectangle, the admissible region for outputs."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != (2,) or self.hi.shape != (2,):
            raise DegenerateInput("bounds must be 2-vectors")
        if np.any(self.hi <= self.lo):
            raise DegenerateInput("empty workspace box")

    def contains(self, points, tol=0.0):
        p = np.asarray(points, dtype=float)
        squeeze = p.ndim == 1
        p = np.atleast_2d(p)
        ok = np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=1)
        return bool(ok[0]) if squeeze else ok

    def as_polytope(self):
        (x0, y0), (x1, y1) = self.lo, self.hi
        return Polytope2([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])

    def __repr__(self):
        return f"WorkspaceBox({self.lo.tolist()}, {self.hi.tolist()})"


def convex_hull(points):
    """Strict convex hull in CCW order via the monotone chain.

    Collinear boundary points are dropped. Raises DegenerateInput when fewer
    than three hull vertices remain (all points collinear or coincident).
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 2:
        raise DegenerateInput("need an (n, 2) point array")
    order = np.lexsort((P[:, 1], P[:, 0]))
    P = P[order]
    keep = np.ones(len(P), dtype=bool)
    keep[1:] = np.any(np.abs(np.diff(P, axis=0)) > 0.0, axis=1)
    P = P[keep]
    if len(P) < 3:
        raise DegenerateInput("hull needs 3 non-collinear points")

    def half(pts):
        out = []
        for p in pts:
            while len(out) >= 2 and _cross(out[-1] - out[-2], p - out[-2]) <= 0.0:
                out.pop()
            out.append(p)
        return out

    lower = half(P)
    upper = half(P[::-1])
    V = np.array(lower[:-1] + upper[:-1])
    if len(V) < 3:
        raise DegenerateInput("hull needs 3 non-collinear points")
    return Polytope2(V)


def _support(V, d):
    return int(np.argmax(V @ d))


def _simplex_origin_closest(W):
    """Closest point to the origin on a simplex of 1 to 3 points.

    Returns (point, lambdas, kept_indices) where lambdas are convex weights
    over the kept simplex vertices.
    """
    m = len(W)
    if m == 1:
        return W[0], np.array([1.0]), [0]
    if m == 2:
        a, b = W
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom <= 0.0 else float(-(a @ ab) / denom)
        if t <= 0.0:
            return a, np.array([1.0]), [0]
        if t >= 1.0:
            return b, np.array([1.0]), [1]
        return a + t * ab, np.array([1.0 - t, t]), [0, 1]
    a, b, c = W
    ab, ac = b - a, c - a
    d1, d2 = float(-(a @ ab)), float(-(a @ ac))
    if d1 <= 0.0 and d2 <= 0.0:
        return a, np.array([1.0]), [0]
    d3, d4 = float(-(b @ ab)), float(-(b @ ac))
    if d3 >= 0.0 and d4 <= d3:
        return b, np.array([1.0]), [1]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return a + t * ab, np.array([1.0 - t, t]), [0, 1]
    d5, d6 = float(-(c @ ab)), float(-(c @ ac))
    if d6 >= 0.0 and d5 <= d6:
        return c, np.array([1.0]), [2]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return a + t * ac, np.array([1.0 - t, t]), [0, 2]
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + t * (c - b), np.array([1.0 - t, t]), [1, 2]
    # origin inside the triangle
    denom = va + vb + vc
    lam = np.array([va, vb, vc]) / denom
    return np.zeros(2), lam, [0, 1, 2]


def vertex_set_distance(V1, V2):
    """Distance between the convex hulls of two vertex sets, with witnesses.

    Runs GJK with barycentric witness recovery; falls back to complete
    edge-pair enumeration (exact in 2-D) if GJK fails to settle. Returns
    (distance, point_on_hull1, point_on_hull2); distance is 0.0 iff the
    hulls intersect, in which case the witness points coincide.
    """
    V1 = np.atleast_2d(np.asarray(V1, dtype=float))
    V2 = np.atleast_2d(np.asarray(V2, dtype=float))
    v = V1.mean(axis=0) - V2.mean(axis=0)
    if float(v @ v) < 1e-30:
        v = np.array([1.0, 0.0])
    scale = max(1.0, float(np.abs(V1).max()), float(np.abs(V2).max()))
    idx = []  # simplex as (i1, i2) support index pairs
    W = np.zeros((0, 2))
    lam = np.array([1.0])
    for _ in range(64):
        i1, i2 = _support(V1, -v), _support(V2, v)
        w = V1[i1] - V2[i2]
        vv = float(v @ v)
        if vv - float(v @ w) <= 1e-14 * scale * scale or (i1, i2) in idx:
            break
        idx.append((i1, i2))
        W = np.vstack([W, w])
        v, lam, kept = _simplex_origin_closest(W)
        idx = [idx[j] for j in kept]
        W = W[kept]
        if float(v @ v) <= (1e-14 * scale) ** 2:
            p = sum(l * V1[i1] for l, (i1, _) in zip(lam, idx))
            return 0.0, np.asarray(p, dtype=float), np.asarray(p, dtype=float)
    else:
        return _edge_pair_distance(V1, V2)
    if not idx:  # first support already optimal (touching centroid direction)
        return _edge_pair_distance(V1, V2)
    p1 = sum(l * V1[i1] for l, (i1, _) in zip(lam, idx))
    p2 = sum(l * V2[i2] for l, (_, i2) in zip(lam, idx))
    return float(np.linalg.norm(v)), np.asarray(p1, dtype=float), np.asarray(p2, dtype=float)


def _boundary_edges(V):
    """Boundary edge endpoint pairs for a vertex set (wraps only when m >= 3)."""
    m = len(V)
    if m == 1:
        return V, V
    if m == 2:
        return V[:1], V[1:2]
    return V, np.roll(V, -1, axis=0)


def _segment_closest_params(p0, p1, q0, q1):
    """Closest-point parameters (s, t) between segment batches, broadcast."""
    u = p1 - p0
    w = q1 - q0
    r = p0 - q0
    a = np.einsum("...i,...i->...", u, u)
    b = np.einsum("...i,...i->...", u, w)
    c = np.einsum("...i,...i->...", w, w)
    d = np.einsum("...i,...i->...", u, r)
    e = np.einsum("...i,...i->...", w, r)
    den = a * c - b * b
    safe = np.where(den > 1e-30, den, 1.0)
    s = np.where(den > 1e-30, np.clip((b * e - c * d) / safe, 0.0, 1.0), 0.0)
    ca = np.where(a > 1e-30, a, 1.0)
    cc = np.where(c > 1e-30, c, 1.0)
    t = np.clip((b * s + e) / cc, 0.0, 1.0)
    s = np.clip((b * t - d) / ca, 0.0, 1.0)
    return s, t


def _hull_contains(V, points, tol=0.0):
    """Half-plane membership for hulls with >= 3 CCW vertices."""
    if len(V) < 3:
        return np.zeros(np.atleast_2d(points).shape[0], dtype=bool)
    e = np.roll(V, -1, axis=0) - V
    p = np.atleast_2d(points)
    rel = p[:, None, :] - V[None, :, :]
    return np.all(_cross(e[None, :, :], rel) >= -tol, axis=1)


def _edge_pair_distance(V1, V2):
    """Exact hull distance by complete boundary enumeration plus containment."""
    a0, a1 = _boundary_edges(V1)
    b0, b1 = _boundary_edges(V2)
    P0 = a0[:, None, :]
    P1 = a1[:, None, :]
    Q0 = b0[None, :, :]
    Q1 = b1[None, :, :]
    s, t = _segment_closest_params(P0, P1, Q0, Q1)
    pa = P0 + s[..., None] * (P1 - P0)
    pb = Q0 + t[..., None] * (Q1 - Q0)
    d2 = np.einsum("...i,...i->...", pa - pb, pa - pb)
    flat = int(np.argmin(d2))
    i, j = np.unravel_index(flat, d2.shape)
    dist = float(np.sqrt(d2[i, j]))
    w1, w2 = pa[i, j].copy(), pb[i, j].copy()
    if _hull_contains(V2, V1[:1])[0] or _hull_contains(V1, V2[:1])[0]:
        p = V1[0] if _hull_contains(V2, V1[:1])[0] else V2[0]
        return 0.0, p.astype(float).copy(), p.astype(float).copy()
    if dist == 0.0:
        return 0.0, w1, w2
    return dist, w1, w2


def min_distance(P, Q):
    """Euclidean distance between two convex polygons, with witness points."""
    return vertex_set_distance(P.vertices, Q.vertices)


def segment_polytope_distance(p0, p1, P):
    """Distance from segment [p0, p1] to polygon P (0 when they intersect)."""
    seg = np.array([np.asarray(p0, float), np.asarray(p1, float)])
    d, _, _ = vertex_set_distance(seg, P.vertices)
    return d


def batch_hull_distance(A, B):
    """Vectorized hull-pair distances over matched batches.

    A is (n, ma, 2) and B is (n, mb, 2); each row pairs hull A[i] with hull
    B[i]. Vertex counts of 1 (point) and 2 (segment) are allowed. Returns
    (dist, pa, pb) with dist (n,) and witness points (n, 2). Rows with
    intersecting hulls get dist 0 and coincident witnesses.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, ma, _ = A.shape
    mb = B.shape[1]
    a0 = A
    a1 = np.roll(A, -1, axis=1) if ma >= 3 else (A[:, 1:2] if ma == 2 else A)
    if ma == 2:
        a0 = A[:, :1]
    b0 = B
    b1 = np.roll(B, -1, axis=1) if mb >= 3 else (B[:, 1:2] if mb == 2 else B)
    if mb == 2:
        b0 = B[:, :1]
    P0 = a0[:, :, None, :]
    P1 = a1[:, :, None, :]
    Q0 = b0[:, None, :, :]
    Q1 = b1[:, None, :, :]
    s, t = _segment_closest_params(P0, P1, Q0, Q1)
    pa = P0 + s[..., None] * (P1 - P0)
    pb = Q0 + t[..., None] * (Q1 - Q0)
    d2 = np.einsum("...i,...i->...", pa - pb, pa - pb)
    d2f = d2.reshape(n, -1)
    flat = np.argmin(d2f, axis=1)
    rows = np.arange(n)
    dist = np.sqrt(d2f[rows, flat])
    paf = pa.reshape(n, -1, 2)[rows, flat]
    pbf = pb.reshape(n, -1, 2)[rows, flat]

    def _batch_inside(H, pts):
        # pts (n, 2) against hulls H (n, m, 2); only meaningful for m >= 3
        if H.shape[1] < 3:
            return np.zeros(n, dtype=bool)
        e = np.roll(H, -1, axis=1) - H
        rel = pts[:, None, :] - H
        return np.all(_cross(e, rel) >= 0.0, axis=1)

    inside = _batch_inside(B, A[:, 0, :]) | _batch_inside(A, B[:, 0, :])
    dist = np.where(inside, 0.0, dist)
    return dist, paf, pbf


def inflate(P, radius, sides=8):
    """Outer polygonal buffer: Minkowski sum with a circumscribed regular k-gon.

    The k-gon's inradius equals `radius`, so the result contains every point
    within `radius` of P. Vertex count is at most len(P) + sides.
    """
    if radius <= 0.0:
        raise DegenerateInput("radius must be positive")
    if sides < 3:
        raise DegenerateInput("need at least 3 sides")
    R = radius / np.cos(np.pi / sides)
    ang = 2.0 * np.pi * np.arange(sides) / sides + np.pi / sides
    gon = R * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    sums = (P.vertices[:, None, :] + gon[None, :, :]).reshape(-1, 2)
    return convex_hull(sums)


def footprint_vertices(pos, heading):
    """Vehicle hull corners for a batch of poses; returns (..., 4, 2) CCW."""
    pos = np.asarray(pos, dtype=float)
    heading = np.asarray(heading, dtype=float)
    hl, hw = FOOTPRINT_LENGTH / 2.0, FOOTPRINT_WIDTH / 2.0
    body = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = np.cos(heading), np.sin(heading)
    rot = np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)
    return pos[..., None, :] + np.einsum("...ij,vj->...vi", rot, body)


def robot_footprint(state):
    """Vehicle hull polygon at a state whose leading entries are (p_x, p_y, heading)."""
    x = np.asarray(state, dtype=float)
    V = footprint_vertices(x[:2], x[2])
    order = np.argsort(np.arctan2(V[:, 1] - x[1], V[:, 0] - x[0]))
    return Polytope2(V[order])


class AabbIndex:
    """Static axis-aligned bounding-box tree for broad-phase candidate lookup."""

    __slots__ = ("_lo", "_hi", "_nodes")

    def __init__(self, lo, hi):
        self._lo = np.atleast_2d(np.asarray(lo, dtype=float))
        self._hi = np.atleast_2d(np.asarray(hi, dtype=float))
        if self._lo.shape != self._hi.shape or self._lo.shape[1] != 2:
            raise DegenerateInput("need matching (n, 2) box corner arrays")
        n = self._lo.shape[0]
        self._nodes = []
        if n:
            self._build(np.arange(n))

    @classmethod
    def from_polytopes(cls, polys):
        if not polys:
            return cls(np.zeros((0, 2)), np.zeros((0, 2)))
        lo = np.array([p.aabb[0] for p in polys])
        hi = np.array([p.aabb[1] for p in polys])
        return cls(lo, hi)

    def _build(self, items):
        lo = self._lo[items].min(axis=0)
        hi = self._hi[items].max(axis=0)
        node = [lo, hi, -1, -1, -1]
        self._nodes.append(node)
        me = len(self._nodes) - 1
        if len(items) == 1:
            node[4] = int(items[0])
            return me
        centers = (self._lo[items] + self._hi[items]) / 2.0
        axis = int(np.argmax(hi - lo))
        order = np.argsort(centers[:, axis], kind="stable")
        mid = len(items) // 2
        node[2] = self._build(items[order[:mid]])
        node[3] = self._build(items[order[mid:]])
        return me

    def query(self, lo, hi):
        """Ids of stored boxes overlapping the query box [lo, hi]."""
        if not self._nodes:
            return []
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        out = []
        stack = [0]
        while stack:
            nlo, nhi, left, right, item = self._nodes[stack.pop()]
            if np.any(nlo > hi) or np.any(nhi < lo):
                continue
            if item >= 0:
                out.append(item)
            else:
                stack.append(left)
                stack.append(right)
        return sorted(out)
