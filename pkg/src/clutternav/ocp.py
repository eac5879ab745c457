"""Trajectory optimization problem: variable layout, residuals, derivatives.

Decision vector (segment variant):

    [ x_0 .. x_N | u_0 .. u_{N-1} | ref (4) | step_0 .. step_{n-1} (2 each)
      | cert_{k,i} (4 each, stage-major) | seg_cert_{j,i} (4 each) ]

ref = (p_x, p_y, heading, steer) parameterizes the artificial steady state
(zero speed and drive make it an exact fixed point of the discrete dynamics),
step_j are the offsets between consecutive segment endpoints, and each cert
block holds the separation certificate (mu_r, mu_o, xi) of one footprint/
obstacle or segment/obstacle pair.

The reference variant drops the step and seg_cert blocks, prices the
reference's straight-line distance to the final target instead, and keeps the
reference output itself certified against every obstacle.

All constraint rows are tagged; residual conventions are eq(z) = 0 and
ineq(z) <= 0. Sparsity patterns are laid out once at construction and only
the value arrays are refreshed per evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import dynamics as dyn
from .collision import warm_start_batch
from .geometry import FOOTPRINT_LENGTH, FOOTPRINT_WIDTH, WorkspaceBox, footprint_vertices

__all__ = ["OcpConfig", "OcpParams", "OcpStructure"]


@dataclass(frozen=True)
class OcpConfig:
    horizon: int = 20
    n_segments: int = 3
    path_weight: float = 120.0
    state_weights: tuple = (10.0, 10.0, 0.1, 0.1, 0.01, 0.01)
    input_weights: tuple = (0.1, 0.1)
    speed_bounds: tuple = (-1.0, 3.0)
    drive_bounds: tuple = (-1.0, 1.0)
    steer_bounds: tuple = (-0.4, 0.4)
    drive_rate_bounds: tuple = (-5.0, 5.0)
    steer_rate_bounds: tuple = (-4.0, 4.0)
    reference_tightening: float = 0.95
    smooth_eps: float = 1e-4
    trajectory_clearance: float = 0.03
    segment_clearance: float = 0.113
    vehicle: dyn.VehicleParams = field(default_factory=dyn.VehicleParams)


@dataclass
class OcpParams:
    """Per-tick data; the problem structure itself never changes."""

    x_init: np.ndarray
    chain_target: np.ndarray | None = None  # segment variant
    final_target: np.ndarray | None = None  # reference variant


def smooth_norm(d, eps):
    """sqrt(|d|^2 + eps^2) - eps: zero at zero, asymptotically |d|."""
    return np.sqrt(np.sum(d * d, axis=-1) + eps * eps) - eps


def _smooth_grad_hess(d, eps):
    rho = np.sqrt(d @ d + eps * eps)
    g = d / rho
    H = (np.eye(2) - np.outer(d, d) / (rho * rho)) / rho
    return g, H


class _Pattern:
    """COO pattern with named value slices, finalized into one buffer."""

    def __init__(self):
        self.rows = []
        self.cols = []
        self.slices = {}
        self.const = {}
        self.n = 0

    def add(self, name, rows, cols, const_vals=None):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        assert rows.shape == cols.shape
        self.slices[name] = slice(self.n, self.n + len(rows))
        if const_vals is not None:
            self.const[name] = np.asarray(const_vals, dtype=float).ravel()
        self.rows.append(rows)
        self.cols.append(cols)
        self.n += len(rows)

    def finalize(self, shape):
        self.rows = np.concatenate(self.rows) if self.rows else np.zeros(0, np.int64)
        self.cols = np.concatenate(self.cols) if self.cols else np.zeros(0, np.int64)
        self.base = np.zeros(self.n)
        for name, vals in self.const.items():
            self.base[self.slices[name]] = vals
        self.shape = shape

    def build(self, vals):
        return sp.csr_matrix((vals, (self.rows, self.cols)), shape=self.shape)


class OcpStructure:
    """One environment-bound instance of the optimization problem."""

    def __init__(self, cfg: OcpConfig, obstacles, workspace: WorkspaceBox,
                 variant="segments"):
        if variant not in ("segments", "reference"):
            raise ValueError("variant must be 'segments' or 'reference'")
        self.cfg = cfg
        self.obstacles = list(obstacles)
        self.workspace = workspace
        self.variant = variant
        N, nn = cfg.horizon, cfg.n_segments
        no = len(self.obstacles)
        self.mi = [len(o.vertices) for o in self.obstacles]

        # ------------------------------------------------ variable layout
        self.off_x = 0
        self.off_u = 6 * (N + 1)
        self.off_ref = self.off_u + 2 * N
        if variant == "segments":
            self.off_step = self.off_ref + 4
            self.off_cert = self.off_step + 2 * nn
        else:
            self.off_step = None
            self.off_cert = self.off_ref + 4
        self.off_tail = self.off_cert + 4 * N * no
        # segment variant: seg_cert blocks; reference variant: ref certs
        if variant == "segments":
            self.nv = self.off_tail + 4 * nn * no
        else:
            self.nv = self.off_tail + 4 * no

        # steady-state lift: x = M ref with zero speed and drive
        M = np.zeros((6, 4))
        M[dyn.PX, 0] = M[dyn.PY, 1] = M[dyn.HEADING, 2] = M[dyn.STEER, 3] = 1.0
        self.M = M

        # ------------------------------------------------ equality layout
        self.er_init = slice(0, 6)
        self.er_dyn = slice(6, 6 + 6 * N)
        self.er_term = slice(6 + 6 * N, 12 + 6 * N)
        if variant == "segments":
            self.er_closure = slice(12 + 6 * N, 14 + 6 * N)
            self.ne = 14 + 6 * N
        else:
            self.er_closure = None
            self.ne = 12 + 6 * N

        self._build_ineq_layout()
        self._build_eq_pattern()
        self._build_ineq_pattern()
        self._build_hess_pattern()

    # ---------------------------------------------------------------- slices

    def x_slice(self, k):
        return slice(6 * k, 6 * k + 6)

    def u_slice(self, k):
        return slice(self.off_u + 2 * k, self.off_u + 2 * k + 2)

    @property
    def ref_slice(self):
        return slice(self.off_ref, self.off_ref + 4)

    def step_slice(self, j):
        return slice(self.off_step + 2 * j, self.off_step + 2 * j + 2)

    def cert_slice(self, k, i):
        base = self.off_cert + 4 * (k * len(self.obstacles) + i)
        return slice(base, base + 4)

    def seg_cert_slice(self, j, i):
        base = self.off_tail + 4 * (j * len(self.obstacles) + i)
        return slice(base, base + 4)

    def ref_cert_slice(self, i):
        base = self.off_tail + 4 * i
        return slice(base, base + 4)

    def states(self, z):
        N = self.cfg.horizon
        return z[: 6 * (N + 1)].reshape(N + 1, 6)

    def inputs(self, z):
        N = self.cfg.horizon
        return z[self.off_u : self.off_u + 2 * N].reshape(N, 2)

    def reference(self, z):
        return z[self.ref_slice]

    def steps(self, z):
        nn = self.cfg.n_segments
        return z[self.off_step : self.off_step + 2 * nn].reshape(nn, 2)

    def chain_points(self, z):
        """Segment endpoints implied by the reference output and the steps."""
        ref_out = self.reference(z)[:2]
        cum = np.vstack([np.zeros(2), np.cumsum(self.steps(z), axis=0)])
        return ref_out[None, :] + cum

    def _endpoint_cols(self, e):
        """Columns whose unit sum gives chain point e (ref output + steps)."""
        cols = [self.off_ref, self.off_ref + 1]
        for l in range(e):
            cols.extend([self.off_step + 2 * l, self.off_step + 2 * l + 1])
        return cols

    # ------------------------------------------------------------ row layout

    def _build_ineq_layout(self):
        cfg = self.cfg
        N, nn, no = cfg.horizon, cfg.n_segments, len(self.obstacles)
        tags = []
        self.ir_input = slice(0, 4 * N)
        tags += ["input_box"] * (4 * N)
        self.ir_state = slice(4 * N, 10 * N)
        tags += ["state_box"] * (6 * N)
        r = 10 * N
        self.ir_refbox = slice(r, r + 2)
        tags += ["ref_box"] * 2
        r += 2
        if self.variant == "segments":
            self.ir_workspace = slice(r, r + 4 * nn)
            tags += ["workspace"] * (4 * nn)
            r += 4 * nn
        else:
            self.ir_workspace = slice(r, r + 4)
            tags += ["workspace"] * 4
            r += 4
        # trajectory certificate blocks, stage-major
        self.cert_row = {}
        for k in range(N):
            for i in range(no):
                m = self.mi[i]
                self.cert_row[(k, i)] = r
                tags += ["cert_sum"] + ["cert_robot"] * 4 + ["cert_obstacle"] * m
                r += 5 + m
        # tail blocks
        self.seg_row = {}
        if self.variant == "segments":
            for j in range(nn):
                for i in range(no):
                    m = self.mi[i]
                    self.seg_row[(j, i)] = r
                    tags += ["seg_sum"] + ["seg_vertex"] * 2 + ["seg_obstacle"] * m
                    r += 3 + m
        else:
            for i in range(no):
                m = self.mi[i]
                self.seg_row[i] = r
                tags += ["ref_sum"] + ["ref_vertex"] + ["ref_obstacle"] * m
                r += 2 + m
        self.ni = r
        self.row_tags = np.array(tags)

    # ---------------------------------------------------------- eq pattern

    def _build_eq_pattern(self):
        cfg = self.cfg
        N = cfg.horizon
        pat = _Pattern()
        rr = np.arange(6)
        pat.add("init", rr, np.arange(self.x_slice(0).start, self.x_slice(0).stop),
                np.ones(6))
        # dynamics rows: identity on x_{k+1}, minus Jacobians on (x_k, u_k)
        rows_I, cols_I = [], []
        rows_A, cols_A = [], []
        rows_B, cols_B = [], []
        for k in range(N):
            r0 = 6 + 6 * k
            rows_I.append(np.arange(r0, r0 + 6))
            cols_I.append(np.arange(self.x_slice(k + 1).start, self.x_slice(k + 1).stop))
            rows_A.append(np.repeat(np.arange(r0, r0 + 6), 6))
            cols_A.append(np.tile(np.arange(self.x_slice(k).start, self.x_slice(k).stop), 6))
            rows_B.append(np.repeat(np.arange(r0, r0 + 6), 2))
            cols_B.append(np.tile(np.arange(self.u_slice(k).start, self.u_slice(k).stop), 6))
        pat.add("dyn_I", np.concatenate(rows_I), np.concatenate(cols_I),
                np.ones(6 * N))
        pat.add("dyn_A", np.concatenate(rows_A), np.concatenate(cols_A))
        pat.add("dyn_B", np.concatenate(rows_B), np.concatenate(cols_B))
        r0 = self.er_term.start
        pat.add("term_x", np.arange(r0, r0 + 6),
                np.arange(self.x_slice(N).start, self.x_slice(N).stop), np.ones(6))
        mr, mc = np.nonzero(self.M)
        pat.add("term_ref", r0 + mr, self.off_ref + mc, -self.M[mr, mc])
        if self.variant == "segments":
            nn = cfg.n_segments
            r0 = self.er_closure.start
            rows = np.tile(np.array([0, 1]), nn) + r0
            cols = np.concatenate([[self.off_step + 2 * j, self.off_step + 2 * j + 1]
                                   for j in range(nn)])
            pat.add("closure_steps", rows, cols, np.ones(2 * nn))
            pat.add("closure_ref", [r0, r0 + 1], [self.off_ref, self.off_ref + 1],
                    np.ones(2))
        pat.finalize((self.ne, self.nv))
        self._eq_pat = pat

    # -------------------------------------------------------- ineq pattern

    def _build_ineq_pattern(self):
        cfg = self.cfg
        N, nn, no = cfg.horizon, cfg.n_segments, len(self.obstacles)
        pat = _Pattern()

        # input boxes: [u0 <= hi, u1 <= hi, -u0 <= -lo, -u1 <= -lo] per stage
        rows = np.arange(4 * N)
        ucols = np.concatenate([np.arange(self.u_slice(k).start, self.u_slice(k).stop)
                                for k in range(N)])
        cols = np.empty(4 * N, dtype=np.int64)
        cols[0::4] = ucols[0::2]
        cols[1::4] = ucols[1::2]
        cols[2::4] = ucols[0::2]
        cols[3::4] = ucols[1::2]
        vals = np.tile([1.0, 1.0, -1.0, -1.0], N)
        pat.add("input_box", rows, cols, vals)

        # state boxes on (speed, drive, steer), stages 1..N
        rows = self.ir_state.start + np.arange(6 * N)
        cols = np.empty(6 * N, dtype=np.int64)
        for k in range(N):
            base = self.x_slice(k + 1).start
            cols[6 * k : 6 * k + 6] = [base + dyn.SPEED, base + dyn.DRIVE,
                                       base + dyn.STEER, base + dyn.SPEED,
                                       base + dyn.DRIVE, base + dyn.STEER]
        vals = np.tile([1.0, 1.0, 1.0, -1.0, -1.0, -1.0], N)
        pat.add("state_box", rows, cols, vals)

        # tightened steering box on the reference
        r0 = self.ir_refbox.start
        pat.add("ref_box", [r0, r0 + 1], [self.off_ref + 3, self.off_ref + 3],
                [1.0, -1.0])

        # workspace rows on chain points (or the reference output alone)
        r0 = self.ir_workspace.start
        if self.variant == "segments":
            rows, cols, vals = [], [], []
            for j in range(nn):
                for t, (sgn, coord) in enumerate([(1, 0), (1, 1), (-1, 0), (-1, 1)]):
                    rr = r0 + 4 * j + t
                    # columns contributing to coordinate `coord` of point j
                    sel = [self.off_ref + coord] + [self.off_step + 2 * l + coord
                                                    for l in range(j)]
                    rows.extend([rr] * len(sel))
                    cols.extend(sel)
                    vals.extend([float(sgn)] * len(sel))
            pat.add("workspace", rows, cols, vals)
        else:
            pat.add("workspace",
                    [r0, r0 + 1, r0 + 2, r0 + 3],
                    [self.off_ref, self.off_ref + 1, self.off_ref, self.off_ref + 1],
                    [1.0, 1.0, -1.0, -1.0])

        # trajectory certificates
        sum_rows, sum_mu_cols = [], []
        sum_xi_rows, sum_xi_cols = [], []
        rob_rows, rob_cols = [], []
        obs_rows, obs_cols, obs_vals = [], [], []
        for k in range(N):
            xsl = self.x_slice(k)
            for i in range(no):
                r0 = self.cert_row[(k, i)]
                c = self.cert_slice(k, i).start
                mu_r, mu_o, xi = c, c + 1, (c + 2, c + 3)
                sum_rows += [r0, r0]
                sum_mu_cols += [mu_r, mu_o]
                sum_xi_rows += [r0, r0]
                sum_xi_cols += [xi[0], xi[1]]
                for v in range(4):
                    rr = r0 + 1 + v
                    rob_rows += [rr] * 6
                    rob_cols += [xsl.start + dyn.PX, xsl.start + dyn.PY,
                                 xsl.start + dyn.HEADING, xi[0], xi[1], mu_r]
                Vo = self.obstacles[i].vertices
                for w in range(self.mi[i]):
                    rr = r0 + 5 + w
                    obs_rows += [rr] * 3
                    obs_cols += [xi[0], xi[1], mu_o]
                    obs_vals += [Vo[w, 0], Vo[w, 1], -1.0]
        pat.add("cert_sum_mu", sum_rows, sum_mu_cols, np.ones(len(sum_rows)))
        pat.add("cert_sum_xi", sum_xi_rows, sum_xi_cols)
        pat.add("cert_robot", rob_rows, rob_cols)
        pat.add("cert_obstacle", obs_rows, obs_cols, obs_vals)

        if self.variant == "segments":
            sum_rows, sum_mu_cols, sum_xi_rows, sum_xi_cols = [], [], [], []
            vert_rows, vert_cols = [], []
            obs_rows, obs_cols, obs_vals = [], [], []
            self._seg_vert_meta = []
            for j in range(nn):
                for i in range(no):
                    r0 = self.seg_row[(j, i)]
                    c = self.seg_cert_slice(j, i).start
                    mu_r, mu_o, xi = c, c + 1, (c + 2, c + 3)
                    sum_rows += [r0, r0]
                    sum_mu_cols += [mu_r, mu_o]
                    sum_xi_rows += [r0, r0]
                    sum_xi_cols += [xi[0], xi[1]]
                    for t, e in enumerate((j, j + 1)):
                        rr = r0 + 1 + t
                        pcols = self._endpoint_cols(e)
                        vert_rows += [rr] * (len(pcols) + 3)
                        vert_cols += pcols + [xi[0], xi[1], mu_r]
                        self._seg_vert_meta.append((j, i, e, len(pcols)))
                    Vo = self.obstacles[i].vertices
                    for w in range(self.mi[i]):
                        rr = r0 + 3 + w
                        obs_rows += [rr] * 3
                        obs_cols += [xi[0], xi[1], mu_o]
                        obs_vals += [Vo[w, 0], Vo[w, 1], -1.0]
            pat.add("seg_sum_mu", sum_rows, sum_mu_cols, np.ones(len(sum_rows)))
            pat.add("seg_sum_xi", sum_xi_rows, sum_xi_cols)
            pat.add("seg_vertex", vert_rows, vert_cols)
            pat.add("seg_obstacle", obs_rows, obs_cols, obs_vals)
        else:
            sum_rows, sum_mu_cols, sum_xi_rows, sum_xi_cols = [], [], [], []
            vert_rows, vert_cols = [], []
            obs_rows, obs_cols, obs_vals = [], [], []
            for i in range(no):
                r0 = self.seg_row[i]
                c = self.ref_cert_slice(i).start
                mu_r, mu_o, xi = c, c + 1, (c + 2, c + 3)
                sum_rows += [r0, r0]
                sum_mu_cols += [mu_r, mu_o]
                sum_xi_rows += [r0, r0]
                sum_xi_cols += [xi[0], xi[1]]
                rr = r0 + 1
                vert_rows += [rr] * 5
                vert_cols += [self.off_ref, self.off_ref + 1, xi[0], xi[1], mu_r]
                Vo = self.obstacles[i].vertices
                for w in range(self.mi[i]):
                    rr = r0 + 2 + w
                    obs_rows += [rr] * 3
                    obs_cols += [xi[0], xi[1], mu_o]
                    obs_vals += [Vo[w, 0], Vo[w, 1], -1.0]
            pat.add("seg_sum_mu", sum_rows, sum_mu_cols, np.ones(len(sum_rows)))
            pat.add("seg_sum_xi", sum_xi_rows, sum_xi_cols)
            pat.add("seg_vertex", vert_rows, vert_cols)
            pat.add("seg_obstacle", obs_rows, obs_cols, obs_vals)
        pat.finalize((self.ni, self.nv))
        self._ineq_pat = pat

        # body-frame footprint corners, in the same order footprint_vertices uses
        hl, hw = FOOTPRINT_LENGTH / 2, FOOTPRINT_WIDTH / 2
        self._corners = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])

    # ------------------------------------------------------- hess pattern

    def _build_hess_pattern(self):
        cfg = self.cfg
        N, nn, no = cfg.horizon, cfg.n_segments, len(self.obstacles)
        q = np.asarray(cfg.state_weights, dtype=float)
        r_w = np.asarray(cfg.input_weights, dtype=float)
        pat = _Pattern()

        rows, cols, vals = [], [], []
        # tracking: sum_k (x_k - M ref)' Q (x_k - M ref), stages 0..N-1
        ref_map = {dyn.PX: 0, dyn.PY: 1, dyn.HEADING: 2, dyn.STEER: 3}
        for k in range(N):
            base = self.x_slice(k).start
            for d in range(6):
                rows.append(base + d)
                cols.append(base + d)
                vals.append(2 * q[d])
            for d, rc in ref_map.items():
                rows += [base + d, self.off_ref + rc]
                cols += [self.off_ref + rc, base + d]
                vals += [-2 * q[d], -2 * q[d]]
        for rc_d, d in ((0, dyn.PX), (1, dyn.PY), (2, dyn.HEADING), (3, dyn.STEER)):
            rows.append(self.off_ref + rc_d)
            cols.append(self.off_ref + rc_d)
            vals.append(2 * N * q[d])
        for k in range(N):
            base = self.u_slice(k).start
            rows += [base, base + 1]
            cols += [base, base + 1]
            vals += [2 * r_w[0], 2 * r_w[1]]
        # regularization floor on the full diagonal; certificate variables
        # carry no cost of their own and get extra damping through the
        # cert_floor slice, filled per call in hessian()
        floor = np.full(self.nv, 1e-8)
        self.hess_floor = floor
        rows += list(range(self.nv))
        cols += list(range(self.nv))
        vals += floor.tolist()
        pat.add("const", rows, cols, vals)
        cert_diag = list(range(self.off_cert, self.nv))
        pat.add("cert_floor", cert_diag, cert_diag)

        if self.variant == "segments":
            rows, cols = [], []
            for j in range(nn):
                c = self.step_slice(j).start
                rows += [c, c, c + 1, c + 1]
                cols += [c, c + 1, c, c + 1]
            pat.add("smooth", rows, cols)
        else:
            c = self.off_ref
            pat.add("smooth", [c, c, c + 1, c + 1], [c, c + 1, c, c + 1])

        # curvature of the certificate sum rows, weighted by their duals
        rows = []
        for k in range(N):
            for i in range(no):
                c = self.cert_slice(k, i).start
                rows += [c + 2, c + 3]
        pat.add("xi_curv", rows, rows)
        rows = []
        if self.variant == "segments":
            for j in range(nn):
                for i in range(no):
                    c = self.seg_cert_slice(j, i).start
                    rows += [c + 2, c + 3]
        else:
            for i in range(no):
                c = self.ref_cert_slice(i).start
                rows += [c + 2, c + 3]
        pat.add("seg_xi_curv", rows, rows)
        pat.finalize((self.nv, self.nv))
        self._hess_pat = pat

    # ------------------------------------------------------------- cost

    def cost(self, z, p: OcpParams):
        cfg = self.cfg
        N = cfg.horizon
        X, U = self.states(z), self.inputs(z)
        xs = self.M @ self.reference(z)
        dx = X[:N] - xs
        q = np.asarray(cfg.state_weights)
        r = np.asarray(cfg.input_weights)
        c = float(np.sum(dx * dx * q) + np.sum(U * U * r))
        if self.variant == "segments":
            c += cfg.path_weight * float(np.sum(smooth_norm(self.steps(z), cfg.smooth_eps)))
        else:
            d = self.reference(z)[:2] - p.final_target
            c += cfg.path_weight * float(smooth_norm(d, cfg.smooth_eps))
        return c

    def cost_grad(self, z, p: OcpParams):
        cfg = self.cfg
        N = cfg.horizon
        g = np.zeros(self.nv)
        X, U = self.states(z), self.inputs(z)
        xs = self.M @ self.reference(z)
        q = np.asarray(cfg.state_weights)
        r = np.asarray(cfg.input_weights)
        dx = X[:N] - xs
        g[: 6 * N] = (2 * q * dx).ravel()
        g[self.off_u : self.off_u + 2 * N] = (2 * r * U).ravel()
        g[self.ref_slice] = -2 * self.M.T @ (q * dx.sum(axis=0))
        if self.variant == "segments":
            for j in range(cfg.n_segments):
                gj, _ = _smooth_grad_hess(self.steps(z)[j], cfg.smooth_eps)
                g[self.step_slice(j)] = cfg.path_weight * gj
        else:
            d = self.reference(z)[:2] - p.final_target
            gd, _ = _smooth_grad_hess(d, cfg.smooth_eps)
            g[self.off_ref : self.off_ref + 2] += cfg.path_weight * gd
        return g

    # ------------------------------------------------------------ equality

    def eq_residual(self, z, p: OcpParams):
        cfg = self.cfg
        N = cfg.horizon
        X, U = self.states(z), self.inputs(z)
        r = np.empty(self.ne)
        r[self.er_init] = X[0] - p.x_init
        r[self.er_dyn] = (X[1:] - dyn.rk4_step(X[:N], U, cfg.vehicle)).ravel()
        xs = self.M @ self.reference(z)
        r[self.er_term] = X[N] - xs
        if self.variant == "segments":
            r[self.er_closure] = self.steps(z).sum(axis=0) + xs[:2] - p.chain_target
        return r

    def eq_jacobian(self, z):
        cfg = self.cfg
        N = cfg.horizon
        X, U = self.states(z), self.inputs(z)
        A, B = dyn.rk4_jacobians(X[:N], U, cfg.vehicle)
        pat = self._eq_pat
        vals = pat.base.copy()
        vals[pat.slices["dyn_A"]] = (-A).reshape(-1)
        vals[pat.slices["dyn_B"]] = (-B).reshape(-1)
        return pat.build(vals)

    # ---------------------------------------------------------- inequality

    def _footprints(self, z):
        N = self.cfg.horizon
        X = self.states(z)
        return footprint_vertices(X[:N, :2], X[:N, 2])

    def ineq_residual(self, z):
        cfg = self.cfg
        N, nn, no = cfg.horizon, cfg.n_segments, len(self.obstacles)
        X, U = self.states(z), self.inputs(z)
        g = np.empty(self.ni)

        hi_u = np.array([cfg.drive_rate_bounds[1], cfg.steer_rate_bounds[1]])
        lo_u = np.array([cfg.drive_rate_bounds[0], cfg.steer_rate_bounds[0]])
        blk = np.concatenate([U - hi_u, lo_u - U], axis=1)  # (N,4)
        g[self.ir_input] = blk.ravel()

        hi_x = np.array([cfg.speed_bounds[1], cfg.drive_bounds[1], cfg.steer_bounds[1]])
        lo_x = np.array([cfg.speed_bounds[0], cfg.drive_bounds[0], cfg.steer_bounds[0]])
        Xs = X[1:, [dyn.SPEED, dyn.DRIVE, dyn.STEER]]
        g[self.ir_state] = np.concatenate([Xs - hi_x, lo_x - Xs], axis=1).ravel()

        sb = cfg.reference_tightening * cfg.steer_bounds[1]
        sb_lo = cfg.reference_tightening * cfg.steer_bounds[0]
        ref = self.reference(z)
        g[self.ir_refbox] = [ref[3] - sb, sb_lo - ref[3]]

        lo_w, hi_w = self.workspace.lo, self.workspace.hi
        if self.variant == "segments":
            pts = self.chain_points(z)[:nn]
            g[self.ir_workspace] = np.concatenate(
                [pts - hi_w, lo_w - pts], axis=1).ravel()
        else:
            y = ref[:2]
            g[self.ir_workspace] = np.concatenate([y - hi_w, lo_w - y])

        if no:
            verts = self._footprints(z)  # (N,4,2)
            certs = z[self.off_cert : self.off_cert + 4 * N * no].reshape(N, no, 4)
            mu_r, mu_o = certs[..., 0], certs[..., 1]
            xi = certs[..., 2:4]
            d2 = cfg.trajectory_clearance ** 2
            sums = mu_r + mu_o + 0.25 * np.sum(xi * xi, axis=-1) + d2
            rob = -np.einsum("kvj,kij->kiv", verts, xi) - mu_r[..., None]
            for i in range(no):
                m = self.mi[i]
                ovals = self.obstacles[i].vertices @ xi[:, i, :].T - mu_o[:, i]
                for k in range(N):
                    r0 = self.cert_row[(k, i)]
                    g[r0] = sums[k, i]
                    g[r0 + 1 : r0 + 5] = rob[k, i]
                    g[r0 + 5 : r0 + 5 + m] = ovals[:, k]

            d2s = cfg.segment_clearance ** 2
            if self.variant == "segments":
                pts = self.chain_points(z)
                scerts = z[self.off_tail :].reshape(nn, no, 4)
                smu_r, smu_o = scerts[..., 0], scerts[..., 1]
                sxi = scerts[..., 2:4]
                ssum = smu_r + smu_o + 0.25 * np.sum(sxi * sxi, axis=-1) + d2s
                for j in range(nn):
                    seg = pts[j : j + 2]  # (2,2)
                    for i in range(no):
                        r0 = self.seg_row[(j, i)]
                        g[r0] = ssum[j, i]
                        g[r0 + 1 : r0 + 3] = -seg @ sxi[j, i] - smu_r[j, i]
                        m = self.mi[i]
                        g[r0 + 3 : r0 + 3 + m] = (
                            self.obstacles[i].vertices @ sxi[j, i] - smu_o[j, i])
            else:
                y = ref[:2]
                rcerts = z[self.off_tail :].reshape(no, 4)
                for i in range(no):
                    r0 = self.seg_row[i]
                    mu_ri, mu_oi, xii = rcerts[i, 0], rcerts[i, 1], rcerts[i, 2:4]
                    g[r0] = mu_ri + mu_oi + 0.25 * xii @ xii + d2s
                    g[r0 + 1] = -y @ xii - mu_ri
                    m = self.mi[i]
                    g[r0 + 2 : r0 + 2 + m] = self.obstacles[i].vertices @ xii - mu_oi
        return g

    def ineq_jacobian(self, z):
        cfg = self.cfg
        N, nn, no = cfg.horizon, cfg.n_segments, len(self.obstacles)
        pat = self._ineq_pat
        vals = pat.base.copy()
        if no:
            X = self.states(z)
            verts = self._footprints(z)
            # d verts / d heading
            c, s = np.cos(X[:N, 2]), np.sin(X[:N, 2])
            dR = np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)  # (N,2,2)
            dverts = np.einsum("kab,vb->kva", dR, self._corners)  # (N,4,2)
            certs = z[self.off_cert : self.off_cert + 4 * N * no].reshape(N, no, 4)
            xi = certs[..., 2:4]

            vals[pat.slices["cert_sum_xi"]] = (0.5 * xi).reshape(-1)

            # robot rows, entry order per row: [px, py, heading, xi_x, xi_y, mu_r]
            fill = np.empty((N, no, 4, 6))
            fill[..., 0] = -xi[..., None, 0]
            fill[..., 1] = -xi[..., None, 1]
            fill[..., 2] = -np.einsum("kvj,kij->kiv", dverts, xi)
            fill[..., 3] = -verts[:, None, :, 0]
            fill[..., 4] = -verts[:, None, :, 1]
            fill[..., 5] = -1.0
            vals[pat.slices["cert_robot"]] = fill.reshape(-1)

            if self.variant == "segments":
                pts = self.chain_points(z)
                scerts = z[self.off_tail :].reshape(nn, no, 4)
                sxi = scerts[..., 2:4]
                vals[pat.slices["seg_sum_xi"]] = (0.5 * sxi).reshape(-1)
                out = []
                for (j, i, e, npc) in self._seg_vert_meta:
                    xij = sxi[j, i]
                    row = np.concatenate([np.tile(-xij, npc // 2),
                                          -pts[e], [-1.0]])
                    out.append(row)
                vals[pat.slices["seg_vertex"]] = np.concatenate(out)
            else:
                y = self.reference(z)[:2]
                rcerts = z[self.off_tail :].reshape(no, 4)
                rxi = rcerts[:, 2:4]
                vals[pat.slices["seg_sum_xi"]] = (0.5 * rxi).reshape(-1)
                out = []
                for i in range(no):
                    out.append(np.concatenate([-rxi[i], -y, [-1.0]]))
                vals[pat.slices["seg_vertex"]] = np.concatenate(out)
        return pat.build(vals)

    # ------------------------------------------------------------- hessian

    def hessian(self, z, p: OcpParams, lam=None, cert_floor=None):
        """Gauss-Newton Lagrangian model: exact for the quadratic tracking
        part and the smooth-norm offsets, plus the (convex) curvature of the
        certificate sum rows weighted by their duals.

        cert_floor overrides the diagonal damping on the certificate
        variables.  The stiff default regularizes the cold phase where the
        duals carry no curvature information yet; the caller adapts it once
        the active set has settled, because the phantom diagonal caps the
        asymptotic contraction rate on exactly those coordinates."""
        cfg = self.cfg
        pat = self._hess_pat
        vals = pat.base.copy()
        if self.variant == "segments":
            blocks = []
            for j in range(cfg.n_segments):
                _, H = _smooth_grad_hess(self.steps(z)[j], cfg.smooth_eps)
                blocks.append(cfg.path_weight * H.reshape(-1))
            vals[pat.slices["smooth"]] = np.concatenate(blocks)
        else:
            d = self.reference(z)[:2] - p.final_target
            _, H = _smooth_grad_hess(d, cfg.smooth_eps)
            vals[pat.slices["smooth"]] = (cfg.path_weight * H).reshape(-1)
        if lam is not None and len(self.obstacles):
            N, no = cfg.horizon, len(self.obstacles)
            w = np.array([lam[self.cert_row[(k, i)]]
                          for k in range(N) for i in range(no)])
            vals[pat.slices["xi_curv"]] = (0.5 * np.repeat(w, 2))
            if self.variant == "segments":
                w2 = np.array([lam[self.seg_row[(j, i)]]
                               for j in range(cfg.n_segments) for i in range(no)])
            else:
                w2 = np.array([lam[self.seg_row[i]] for i in range(no)])
            vals[pat.slices["seg_xi_curv"]] = (0.5 * np.repeat(w2, 2))
        if len(self.obstacles):
            vals[pat.slices["cert_floor"]] = (
                1e-1 if cert_floor is None else cert_floor)
        return pat.build(vals).tocsc()

    # -------------------------------------------------------- initial guess

    def initial_guess(self, x_now, chain=None, prev=None):
        """Feasible-leaning start: hold/shift the trajectory, rebuild every
        separation certificate geometrically from the guessed motion."""
        cfg = self.cfg
        N, nn, no = cfg.horizon, cfg.n_segments, len(self.obstacles)
        z = np.zeros(self.nv)
        x_now = np.asarray(x_now, dtype=float)
        if prev is None:
            X = np.tile(x_now, (N + 1, 1))
            U = np.zeros((N, 2))
            ref = np.array([x_now[dyn.PX], x_now[dyn.PY],
                            x_now[dyn.HEADING], x_now[dyn.STEER]])
        else:
            Xp, Up = self.states(prev), self.inputs(prev)
            tail = dyn.rk4_step(Xp[-1], np.zeros(2), cfg.vehicle)
            X = np.vstack([Xp[1:], tail[None, :]])
            U = np.vstack([Up[1:], np.zeros((1, 2))])
            ref = self.reference(prev).copy()
        X = X.copy()
        X[0] = x_now
        z[: 6 * (N + 1)] = X.ravel()
        z[self.off_u : self.off_u + 2 * N] = U.ravel()
        z[self.ref_slice] = ref
        if self.variant == "segments":
            chain = np.asarray(chain, dtype=float)
            z[self.off_step : self.off_step + 2 * nn] = np.diff(chain, axis=0).ravel()
        if no:
            verts = footprint_vertices(X[:N, :2], X[:N, 2])
            for i, obs in enumerate(self.obstacles):
                ov = np.broadcast_to(obs.vertices, (N,) + obs.vertices.shape)
                gam, _ = warm_start_batch(verts, np.ascontiguousarray(ov),
                                          cfg.trajectory_clearance)
                for k in range(N):
                    z[self.cert_slice(k, i)] = gam[k]
            if self.variant == "segments":
                segs = np.stack([chain[:-1], chain[1:]], axis=1)  # (nn,2,2)
                for i, obs in enumerate(self.obstacles):
                    ov = np.broadcast_to(obs.vertices, (nn,) + obs.vertices.shape)
                    gam, _ = warm_start_batch(segs, np.ascontiguousarray(ov),
                                              cfg.segment_clearance)
                    for j in range(nn):
                        z[self.seg_cert_slice(j, i)] = gam[j]
            else:
                y = ref[:2]
                for i, obs in enumerate(self.obstacles):
                    gam, _ = warm_start_batch(
                        y[None, None, :], obs.vertices[None],
                        cfg.segment_clearance)
                    z[self.ref_cert_slice(i)] = gam[0]
        return z
