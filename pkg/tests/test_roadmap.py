"""Roadmap tests.

The shortest-path oracle rebuilds the query graph with shapely (independent
segment/polygon predicates) and searches it with scipy's csgraph dijkstra; on
small instances an exhaustive branch-and-bound over simple paths confirms the
csgraph result, so optimality is checked against a genuinely independent
chain. Geometry of returned paths is re-verified edge by edge.
"""

import time

import numpy as np
import pytest
import shapely.geometry as sg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as cs_dijkstra

from clutternav.geometry import Polytope2, WorkspaceBox, vertex_set_distance
from clutternav.roadmap import NoPath, Roadmap, build_roadmap, shortest_path

CLEAR = 0.113
MARGIN = 0.01
WS = WorkspaceBox(np.array([0.0, 0.0]), np.array([3.0, 2.0]))


def rhombus(cx, cy, dx, dy, angle):
    base = np.array([[dx / 2, 0.0], [0.0, dy / 2], [-dx / 2, 0.0], [0.0, -dy / 2]])
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return Polytope2(base @ R.T + np.array([cx, cy]))


def square(cx, cy, half):
    return Polytope2(
        np.array([[cx - half, cy - half], [cx + half, cy - half],
                  [cx + half, cy + half], [cx - half, cy + half]])
    )


def path_length(path):
    return float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))


# ---------------------------------------------------------------- oracle


def oracle_blocked(p0, p1, shrunk_polys):
    line = sg.LineString([p0, p1])
    return any(line.intersection(sp).length > 1e-9 for sp in shrunk_polys)


def oracle_first_ok(p0, p1, orig_shapes, clearance):
    line = sg.LineString([p0, p1])
    return all(line.distance(shp) >= clearance - 1e-9 for shp in orig_shapes)


def oracle_graph(rm: Roadmap, start, target):
    """Directed weight matrix over [nodes..., start, target], inf = no edge."""
    shrunk = [sg.Polygon(p.vertices).buffer(-1e-9) for p in rm.inflated]
    origs = [sg.Polygon(p.vertices) for p in rm.obstacles]
    n = len(rm.nodes)
    s_id, t_id = n, n + 1
    W = np.full((n + 2, n + 2), np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            if not oracle_blocked(rm.nodes[i], rm.nodes[j], shrunk):
                w = float(np.linalg.norm(rm.nodes[i] - rm.nodes[j]))
                W[i, j] = W[j, i] = w
    for j in range(n):
        if oracle_first_ok(start, rm.nodes[j], origs, rm.link_clearance):
            W[s_id, j] = float(np.linalg.norm(rm.nodes[j] - start))
        if not oracle_blocked(rm.nodes[j], target, shrunk):
            W[j, t_id] = float(np.linalg.norm(target - rm.nodes[j]))
    if oracle_first_ok(start, target, origs, rm.link_clearance):
        W[s_id, t_id] = float(np.linalg.norm(target - start))
    return W


def oracle_shortest(W):
    rows, cols = np.where(np.isfinite(W))
    n = W.shape[0]
    mat = csr_matrix((W[rows, cols], (rows, cols)), shape=(n, n))
    d = cs_dijkstra(mat, directed=True, indices=n - 2)
    return float(d[n - 1])


def exhaustive_shortest(W, s, t):
    """Branch-and-bound over all simple paths; exact because pruning is sound."""
    n = W.shape[0]
    nbrs = [np.flatnonzero(np.isfinite(W[i])) for i in range(n)]
    best = [np.inf]
    visited = np.zeros(n, dtype=bool)

    def rec(u, acc):
        if acc >= best[0] - 1e-15:
            return
        if u == t:
            best[0] = acc
            return
        visited[u] = True
        for v in nbrs[u]:
            if not visited[v]:
                rec(int(v), acc + W[u, v])
        visited[u] = False

    rec(s, 0.0)
    return best[0]


def random_instance(rng, n_obs):
    for _ in range(200):
        polys = []
        while len(polys) < n_obs:
            cand = rhombus(
                rng.uniform(0.6, 2.4), rng.uniform(0.3, 1.7),
                0.235, 0.155, rng.uniform(0, np.pi),
            )
            if all(vertex_set_distance(cand.vertices, p.vertices)[0] > 0.02 for p in polys):
                polys.append(cand)
        start = np.array([rng.uniform(0.1, 0.45), rng.uniform(0.2, 1.8)])
        target = np.array([rng.uniform(2.55, 2.9), rng.uniform(0.2, 1.8)])
        pts_ok = all(
            vertex_set_distance(q[None, :], p.vertices)[0] > 0.16
            for p in polys for q in (start, target)
        )
        if pts_ok:
            return polys, start, target
    raise AssertionError("instance sampling failed")


# ---------------------------------------------------------------- tests


class TestBuild:
    def test_axis_square_inflates_to_octagon(self):
        # square edge normals coincide with four buffer directions, so the
        # inflated hull merges down to exactly 8 vertices
        rm = build_roadmap([square(1.5, 1.0, 0.2)], WS, CLEAR, MARGIN)
        assert len(rm.inflated[0].vertices) == 8
        assert len(rm.nodes) == 8

    def test_nodes_inside_workspace_and_not_buried(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            polys, _, _ = random_instance(rng, 4)
            rm = build_roadmap(polys, WS, CLEAR, MARGIN)
            for v in rm.nodes:
                assert WS.contains(v)
                assert not any(p.contains(v, tol=-1e-9) for p in rm.inflated)

    def test_buried_vertices_dropped(self):
        # two overlapping squares: vertices in the shared region disappear
        polys = [square(1.0, 1.0, 0.2), square(1.3, 1.0, 0.2)]
        rm = build_roadmap(polys, WS, CLEAR, MARGIN)
        total = sum(len(p.vertices) for p in rm.inflated)
        assert len(rm.nodes) < total

    def test_edge_vertices_outside_box_dropped(self):
        rm = build_roadmap([square(0.05, 1.0, 0.2)], WS, CLEAR, MARGIN)
        assert all(WS.contains(v) for v in rm.nodes)
        assert len(rm.nodes) < 8

    def test_csr_well_formed(self):
        polys = [square(1.0, 0.7, 0.15), square(2.0, 1.3, 0.15)]
        rm = build_roadmap(polys, WS, CLEAR, MARGIN)
        n = len(rm.nodes)
        assert rm.indptr[0] == 0 and rm.indptr[-1] == len(rm.indices)
        assert np.all(np.diff(rm.indptr) >= 0)
        assert np.all(rm.weights > 0)
        # symmetry: every arc has its reverse
        pairs = {(int(i), int(v)) for i in range(n)
                 for v in rm.indices[rm.indptr[i]:rm.indptr[i + 1]]}
        assert all((b, a) in pairs for a, b in pairs)

    def test_graph_edges_match_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            polys, _, _ = random_instance(rng, 3)
            rm = build_roadmap(polys, WS, CLEAR, MARGIN)
            shrunk = [sg.Polygon(p.vertices).buffer(-1e-9) for p in rm.inflated]
            n = len(rm.nodes)
            mine = {(int(i), int(v)) for i in range(n)
                    for v in rm.indices[rm.indptr[i]:rm.indptr[i + 1]] if i < v}
            theirs = {
                (i, j)
                for i in range(n) for j in range(i + 1, n)
                if not oracle_blocked(rm.nodes[i], rm.nodes[j], shrunk)
            }
            assert mine == theirs


class TestShortestPath:
    def test_free_space_straight_line(self):
        rm = build_roadmap([], WS, CLEAR, MARGIN)
        p = shortest_path(rm, [0.2, 1.0], [2.8, 1.3])
        assert p.shape == (2, 2)
        np.testing.assert_allclose(p[0], [0.2, 1.0])
        np.testing.assert_allclose(p[1], [2.8, 1.3])

    def test_single_block_detour(self):
        rm = build_roadmap([square(1.5, 1.0, 0.2)], WS, CLEAR, MARGIN)
        start, target = np.array([0.3, 1.0]), np.array([2.7, 1.0])
        p = shortest_path(rm, start, target)
        L = path_length(p)
        assert p.shape[0] >= 3
        assert L > 2.4
        W = oracle_graph(rm, start, target)
        assert abs(L - oracle_shortest(W)) <= 1e-9

    def test_degenerate_query(self):
        rm = build_roadmap([square(1.5, 1.0, 0.2)], WS, CLEAR, MARGIN)
        p = shortest_path(rm, [0.3, 1.0], [0.3, 1.0])
        assert path_length(p) == 0.0
        np.testing.assert_array_equal(p[0], p[-1])

    def test_relaxed_first_link_inside_buffer(self):
        # start sits exactly at the clearance distance, inside the inflated
        # hull; the relaxed rule must still grant the direct link
        obs = square(0.5, 1.0, 0.2)
        rm = build_roadmap([obs], WS, CLEAR, MARGIN)
        start = np.array([0.7 + CLEAR, 1.0])
        target = np.array([2.5, 1.0])
        assert rm.inflated[0].contains(start)
        p = shortest_path(rm, start, target)
        assert p.shape == (2, 2)

    def test_start_too_close_raises(self):
        obs = square(0.5, 1.0, 0.2)
        rm = build_roadmap([obs], WS, CLEAR, MARGIN)
        with pytest.raises(NoPath):
            shortest_path(rm, [0.7 + 0.05, 1.0], [2.5, 1.0])

    def test_target_outside_workspace_raises(self):
        rm = build_roadmap([], WS, CLEAR, MARGIN)
        with pytest.raises(NoPath):
            shortest_path(rm, [0.3, 1.0], [3.5, 1.0])

    def test_enclosed_target_raises(self):
        # four walls boxing in the target with gaps too narrow to pass
        walls = [
            square(1.5, 0.62, 0.18), square(1.5, 1.38, 0.18),
            square(1.12, 1.0, 0.18), square(1.88, 1.0, 0.18),
        ]
        rm = build_roadmap(walls, WS, CLEAR, MARGIN)
        with pytest.raises(NoPath):
            shortest_path(rm, [0.3, 1.0], [1.5, 1.0])

    def test_determinism(self):
        rng = np.random.default_rng(7)
        polys, start, target = random_instance(rng, 4)
        rm1 = build_roadmap(polys, WS, CLEAR, MARGIN)
        rm2 = build_roadmap(polys, WS, CLEAR, MARGIN)
        assert np.array_equal(rm1.nodes, rm2.nodes)
        assert np.array_equal(rm1.indices, rm2.indices)
        assert np.array_equal(rm1.weights, rm2.weights)
        p1 = shortest_path(rm1, start, target)
        p2 = shortest_path(rm2, start, target)
        assert np.array_equal(p1, p2)


class TestOptimalityOracle:
    def test_matches_independent_search_100_instances(self):
        rng = np.random.default_rng(42)
        solved = 0
        for k in range(100):
            polys, start, target = random_instance(rng, 1 + k % 4)
            rm = build_roadmap(polys, WS, CLEAR, MARGIN)
            W = oracle_graph(rm, start, target)
            ref = oracle_shortest(W)
            if np.isfinite(ref):
                p = shortest_path(rm, start, target)
                assert abs(path_length(p) - ref) <= 1e-9
                solved += 1
            else:
                with pytest.raises(NoPath):
                    shortest_path(rm, start, target)
        assert solved >= 90

    def test_exhaustive_confirms_csgraph_small(self):
        rng = np.random.default_rng(5)
        for k in range(20):
            polys, start, target = random_instance(rng, 1 + k % 2)
            rm = build_roadmap(polys, WS, CLEAR, MARGIN)
            W = oracle_graph(rm, start, target)
            n = W.shape[0]
            ref = oracle_shortest(W)
            brute = exhaustive_shortest(W, n - 2, n - 1)
            if np.isfinite(ref) or np.isfinite(brute):
                assert abs(ref - brute) <= 1e-12


class TestPathFeasibility:
    def test_returned_segments_obey_rules(self):
        rng = np.random.default_rng(19)
        checked = 0
        for _ in range(25):
            polys, start, target = random_instance(rng, 4)
            rm = build_roadmap(polys, WS, CLEAR, MARGIN)
            try:
                p = shortest_path(rm, start, target)
            except NoPath:
                continue
            shrunk = [sg.Polygon(q.vertices).buffer(-1e-9) for q in rm.inflated]
            origs = [sg.Polygon(q.vertices) for q in rm.obstacles]
            assert oracle_first_ok(p[0], p[1], origs, CLEAR)
            for a, b in zip(p[1:-1], p[2:]):
                assert not oracle_blocked(a, b, shrunk)
            assert all(WS.contains(q) for q in p)
            checked += 1
        assert checked >= 15

    def test_build_and_query_smoke_time(self):
        rng = np.random.default_rng(23)
        polys = []
        while len(polys) < 15:
            cand = rhombus(rng.uniform(0.6, 2.4), rng.uniform(0.3, 1.7),
                           0.235, 0.155, rng.uniform(0, np.pi))
            if all(vertex_set_distance(cand.vertices, q.vertices)[0] > 0.02 for q in polys):
                polys.append(cand)
        t0 = time.perf_counter()
        rm = build_roadmap(polys, WS, CLEAR, MARGIN)
        t_build = time.perf_counter() - t0
        t0 = time.perf_counter()
        shortest_path(rm, [0.2, 1.0], [2.8, 1.0])
        t_query = time.perf_counter() - t0
        # generous smoke bounds; strict budgets live in the acceptance suite
        assert t_build < 0.3
        assert t_query < 0.1
