"""Sparse QP interior-point method and the SQP loop built on it.

The QP solver is a Mehrotra predictor-corrector on the reduced KKT
system: inequality blocks are condensed into the (1,1) block, so each
iteration factors one quasi-definite matrix

    [[P + G' W G + d*I, A'], [A, -d*I]]

and reuses the factorization for the affine and combined steps.  The
nonlinear layer does Gauss-Newton SQP with an l1 merit backtracking
line search, warm-started duals, and an elastic re-solve when a QP
linearization turns out infeasible.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .dynamics import NonFinite

# Armijo sufficient-decrease fraction for the merit line search
ARMIJO = 1e-4
ANDERSON_WINDOW = 4


class QpError(RuntimeError):
    """Quadratic subproblem could not be solved."""


class QpInfeasible(QpError):
    pass


class QpMaxIters(QpError):
    pass


class SolveFailed(RuntimeError):
    """Nonlinear solve broke down (non-finite data or unrecoverable QP)."""


@dataclass
class QpSolution:
    x: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    iterations: int
    gap: float


def _inf_norm(v):
    return float(np.abs(v).max()) if v.size else 0.0


def _boundary_step(v, dv):
    # largest alpha in (0, 1] with v + alpha*dv >= 0
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _solve_refined(lu, K0, rhs, passes=40):
    """Solve with the factored (regularized) matrix, then polish against
    the unregularized operator K0.  Keeps the best residual seen, so a
    singular K0 cannot make things worse.  Returns (solution, residual).

    The floor is deliberately far below the norm of the right hand
    side: rows with near-zero entries (a constraint violated by 1e-9
    held by a dual of 1e3) still need their equations honored, and a
    norm-relative exit would drop exactly those rows first.

    The pass budget is generous on purpose.  When the pinned rows are
    nearly dependent the regularization leaks a small amount of motion
    across them, and the polish contracts that leak slowly; stopping
    early hands back a step that walks through a constraint held by a
    large dual.  Consistent systems keep contracting until they hit the
    floor, and inconsistent ones exit on the first non-improving pass,
    so the budget only costs triangular solves where they pay off.
    """
    sol = lu.solve(rhs)
    floor = 1e-13 * (1.0 + _inf_norm(rhs))
    res = K0 @ sol - rhs
    rn = _inf_norm(res)
    for _ in range(passes):
        if rn <= floor:
            break
        cand = sol - lu.solve(res)
        res_c = K0 @ cand - rhs
        rn_c = _inf_norm(res_c)
        if not rn_c < rn:
            break
        sol, res, rn = cand, res_c, rn_c
    return sol, rn


def solve_qp(P, q, A=None, b=None, G=None, h=None, *, tol=1e-8, max_iter=60,
             lam0=None):
    """Minimize 0.5 x'Px + q'x subject to Ax = b, Gx <= h.

    P must be positive semidefinite (a tiny primal-dual regularization
    keeps the KKT factorization quasi-definite regardless).  Raises
    QpInfeasible / QpMaxIters when no solution is found.
    """
    q = np.asarray(q, dtype=float)
    n = q.size
    P = sp.csc_matrix(P)
    if A is None:
        A, b = sp.csc_matrix((0, n)), np.zeros(0)
    else:
        A, b = sp.csc_matrix(A), np.asarray(b, dtype=float)
    if G is None:
        G, h = sp.csr_matrix((0, n)), np.zeros(0)
    else:
        G, h = sp.csr_matrix(G), np.asarray(h, dtype=float)
    me, mi = A.shape[0], G.shape[0]

    x = np.zeros(n)
    y = np.zeros(me)
    if mi:
        # start well inside the cone; Mehrotra recenters fast anyway
        s = np.maximum(h, 1.0)
        if lam0 is not None:
            lam = np.clip(np.asarray(lam0, dtype=float), 1e-2, 1e4)
        else:
            lam = np.ones(mi)
    else:
        s = lam = np.zeros(0)

    delta = 1e-9
    scale = 1.0 + max(_inf_norm(q), _inf_norm(b), _inf_norm(h))
    AT = A.T.tocsc() if me else None
    GT = G.T.tocsc() if mi else None
    # the regularization only touches the diagonal, so the bordered
    # matrix is assembled once per iteration and shifted per bump
    Dreg = sp.diags(np.concatenate([np.ones(n), -np.ones(me)]),
                    format="csc")

    for it in range(1, max_iter + 1):
        rd = P @ x + q + (AT @ y if me else 0.0) + (GT @ lam if mi else 0.0)
        rp = A @ x - b
        rg = (G @ x + s - h) if mi else np.zeros(0)
        mu = float(s @ lam) / mi if mi else 0.0
        prim = max(_inf_norm(rp), _inf_norm(rg))
        done = _inf_norm(rd) <= tol * scale and prim <= tol * scale \
            and mu <= tol * scale
        # conditioning floor: once complementarity and primal feasibility
        # are well past tolerance, a stationarity residual pinned a few
        # orders above it will not improve; grinding on only drives the
        # scaling matrix toward overflow
        if not done and mi:
            done = mu <= 0.1 * tol * scale and prim <= 10.0 * tol * scale \
                and _inf_norm(rd) <= 1e3 * tol * scale
        if done:
            if mi:
                # crossover: one working-set polish turns the interior
                # iterate into an exact KKT point with literal zero
                # duals on inactive rows, so downstream consumers never
                # see the barrier's complementarity smear
                act = np.flatnonzero(lam >= s)
                pur = _working_set_loop(_SaddleCache(P, A, G), q, b, h,
                                        act, scale, budget=4)
                if pur is not None:
                    return QpSolution(pur.x, pur.eq_duals, pur.ineq_duals,
                                      it - 1, 0.0)
            return QpSolution(x, y, lam, it - 1, mu)
        if not (np.isfinite(rd).all() and np.isfinite(prim)):
            raise QpInfeasible("non-finite iterate")
        if mi and (lam.max() > 1e13 * scale or s.max() > 1e13 * scale):
            raise QpInfeasible("diverging multipliers")
        if mi and mu <= 1e-12 * scale and prim > 1e-6 * scale:
            raise QpInfeasible("complementarity converged, residual stuck")

        W = lam / s if mi else None
        base = P + (GT @ G.multiply(W[:, None]) if mi else 0.0)
        if me:
            K0 = sp.bmat([[base, AT], [A, None]], format="csc")
        else:
            K0 = sp.csc_matrix(base)
        lu = None
        for bump in (1.0, 1e3, 1e6):
            try:
                lu = splu(K0 + (delta * bump) * Dreg)
                break
            except RuntimeError:
                continue
        if lu is None:
            raise QpInfeasible("KKT factorization failed")

        def newton(rc):
            if mi:
                top = -rd - GT @ (W * rg - rc / s)
            else:
                top = -rd
            rhs = np.concatenate([top, -rp]) if me else top
            # refine against the unregularized system: kills both the
            # delta bias and the precision floor W's spread imposes
            sol, _ = _solve_refined(lu, K0, rhs)
            dx = sol[:n]
            dy = sol[n:] if me else np.zeros(0)
            if mi:
                dlam = W * (G @ dx + rg) - rc / s
                ds = -(rc + s * dlam) / lam
            else:
                dlam = ds = np.zeros(0)
            return dx, dy, dlam, ds

        if mi:
            # affine probe picks the centering weight
            dxa, dya, dla, dsa = newton(s * lam)
            aff = min(_boundary_step(s, dsa), _boundary_step(lam, dla))
            mu_aff = float((s + aff * dsa) @ (lam + aff * dla)) / mi
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            rc = s * lam + dsa * dla - sigma * mu
            dx, dy, dlam, ds = newton(rc)
            # one step length for both sides: with a quadratic objective the
            # P dx term couples the dual residual to the primal step, and
            # mismatched lengths stall rd while mu keeps shrinking
            alpha = 0.995 * min(_boundary_step(s, ds),
                                _boundary_step(lam, dlam))
            x = x + alpha * dx
            s = s + alpha * ds
            y = y + alpha * dy
            lam = lam + alpha * dlam
        else:
            dx, dy, _, _ = newton(np.zeros(0))
            x = x + dx
            y = y + dy
    raise QpMaxIters(f"no convergence in {max_iter} iterations")


def solve_qp_elastic(P, q, A, b, G, h, *, penalty=1e5, **kwargs):
    """Re-pose the QP with one-sided slacks t >= 0 on every inequality,
    penalized linearly.  Returns (solution restricted to the original
    variables/duals, largest slack used)."""
    q = np.asarray(q, dtype=float)
    n = q.size
    mi = G.shape[0]
    Pe = sp.block_diag([sp.csc_matrix(P), sp.csc_matrix((mi, mi))],
                       format="csc")
    qe = np.concatenate([q, np.full(mi, penalty)])
    Ae = sp.hstack([A, sp.csc_matrix((A.shape[0], mi))], format="csc")
    Imi = sp.identity(mi, format="csc")
    Ge = sp.bmat([[sp.csr_matrix(G), -Imi],
                  [sp.csr_matrix((mi, n)), -Imi]], format="csr")
    he = np.concatenate([h, np.zeros(mi)])
    sol = solve_qp(Pe, qe, Ae, b, Ge, he, **kwargs)
    slack = sol.x[n:]
    trimmed = QpSolution(sol.x[:n], sol.eq_duals, sol.ineq_duals[:mi],
                         sol.iterations, sol.gap)
    return trimmed, float(slack.max()) if mi else 0.0


class _SaddleCache:
    """Factorization server for one QP model (P, A, G fixed).

    The outer loop solves the same saddle system several times per
    iteration with different pinned rows and right hand sides (working
    set rounds, second-order corrections, the interior crossover), and
    most of those calls repeat an active set seen moments earlier.  The
    full bordered matrix is assembled once; each distinct active set
    costs one submatrix extraction and one factorization, after which
    re-solves are triangular passes only.
    """

    def __init__(self, P, A, G, delta=1e-9):
        self.P = sp.csc_matrix(P)
        self.A = sp.csc_matrix(A)
        self.G = sp.csr_matrix(G)
        self.n = self.P.shape[0]
        self.me = self.A.shape[0]
        self.delta = delta
        K = sp.bmat([[self.P, self.A.T, self.G.T],
                     [self.A, None, None],
                     [self.G, None, None]], format="csr")
        self._K = K
        self._head = np.arange(self.n + self.me)
        self._fact: dict[bytes, object] = {}

    def _factor(self, act):
        key = act.tobytes()
        ent = self._fact.get(key, False)
        if ent is False:
            sel = np.concatenate([self._head, self.n + self.me + act])
            K0 = self._K[sel][:, sel].tocsc()
            reg = sp.diags(
                np.concatenate([np.full(self.n, self.delta),
                                np.full(self.me + act.size, -self.delta)]),
                format="csc")
            ent = None
            for bump in (1.0, 1e3):
                try:
                    ent = (splu(K0 + bump * reg), K0)
                    break
                except RuntimeError:
                    continue
            self._fact[key] = ent
        return ent

    def solve(self, q, b, h, act):
        """Solve with the rows in `act` pinned to their bounds.  Returns
        (x, y, lam_act, residual) or None when the factorization fails."""
        ent = self._factor(act)
        if ent is None:
            return None
        lu, K0 = ent
        rhs = np.concatenate([-q, b, h[act]])
        sol, resid = _solve_refined(lu, K0, rhs)
        if not np.isfinite(sol).all():
            return None
        n, me = self.n, self.me
        return sol[:n], sol[n:n + me], sol[n + me:], resid


def _restore_feasibility(struct, params, z, lam, passes=10):
    """Min-norm Newton projection onto the active constraint manifold.

    The sparse KKT solve cannot correct a violation whose removal needs
    motion along a nearly dependent combination of active rows: the
    factorization damps that direction and iterative refinement parks
    the inconsistency right back on the offending rows, so the step
    leaves the violation in place no matter how the outer loop scales
    it.  Solving the stacked linearization by SVD recovers exactly that
    near-null component.  Iterates because constraint curvature
    reintroduces second-order violation after each projection; returns
    the repaired point or None when the violation refuses to shrink.
    """
    z = np.asarray(z, dtype=float).copy()
    thr = 1e-8 * max(1.0, _inf_norm(lam))
    viol_in = None
    # no per-pass contraction demand: the first projection climbs (the
    # near-null motion that removes the residual is orders of magnitude
    # longer than the residual itself, and curvature charges its
    # square), and the burn-down that follows is not monotone either;
    # only the end state matters
    for attempt in range(passes):
        try:
            req = struct.eq_residual(z, params)
            gin = struct.ineq_residual(z)
        except (NonFinite, FloatingPointError):
            return None
        viol = float(np.abs(req).sum() + np.clip(gin, 0.0, None).sum())
        if viol_in is None:
            viol_in = viol
        if viol <= max(1e-11, 1e-4 * viol_in):
            return z
        rows = np.flatnonzero((gin > 0.0) | (lam > thr))
        M = sp.vstack([sp.csr_matrix(struct.eq_jacobian(z)),
                       sp.csr_matrix(struct.ineq_jacobian(z))[rows]])
        rhs = np.concatenate([-req, -gin[rows]])
        d, *_ = np.linalg.lstsq(M.toarray(), rhs, rcond=None)
        if not np.isfinite(d).all() or _inf_norm(d) > 0.1:
            return None
        z = z + d
    return None


def _working_set_loop(cache, q, b, h, act, scale, budget=12):
    """Drive a working set to optimality by dropping rows with negative
    multipliers and adding violated ones.  Each round costs at most one
    sparse factorization.  Returns an exact QpSolution (inactive rows
    get literal zero duals) or None when the budget runs out or the
    linear algebra degenerates; callers fall back to the interior point
    in that case.
    """
    G = cache.G
    mi = G.shape[0]
    mask = np.zeros(mi, dtype=bool)
    mask[act] = True
    for rounds in range(1, budget + 1):
        res = cache.solve(q, b, h, act)
        if res is None:
            return None
        x, y, lam_a, resid = res
        if resid > 1e-8 * scale:
            # refinement stalled: the set picked has dependent rows
            return None
        span = 1.0 + (_inf_norm(lam_a) if act.size else 0.0)
        neg = lam_a < -1e-10 * span
        if neg.any():
            mask[act[neg]] = False
            act = np.flatnonzero(mask)
            continue
        inact = np.flatnonzero(~mask)
        if inact.size:
            # row feasibility is judged per row against its own bound,
            # never against the gradient scale: rows drifting by
            # gradient-relative amounts inject real l1-merit violation
            # that the outer line search then chokes on
            room = h[inact] - G[inact] @ x
            bad = room < -1e-12 * (1.0 + np.abs(h[inact]))
            if bad.any():
                mask[inact[bad]] = True
                act = np.flatnonzero(mask)
                continue
        lam_full = np.zeros(mi)
        lam_full[act] = np.clip(lam_a, 0.0, None)
        return QpSolution(x, y, lam_full, rounds, 0.0)
    return None


def try_working_set_step(cache, q, b, h, lam, *, budget=12):
    """Newton step on the working set the warm duals imply.

    Near a solution the binding inequalities stop changing between
    outer iterations, so instead of re-running the interior point from
    scratch we pin the rows with significant multipliers (plus any
    currently violated ones) as equalities and let the working-set
    loop patch up small misidentifications.  Returns a QpSolution or
    None when the guess is refuted and the full solver has to run.
    """
    q = np.asarray(q, dtype=float)
    b = np.asarray(b, dtype=float)
    h = np.asarray(h, dtype=float)
    lam = np.asarray(lam, dtype=float)
    scale = 1.0 + max(_inf_norm(q), _inf_norm(b), _inf_norm(h))
    act = np.flatnonzero((lam > 1e-8 * max(1.0, _inf_norm(lam))) | (h < 0.0))
    return _working_set_loop(cache, q, b, h, act, scale, budget)


@dataclass
class SolveResult:
    z: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    iterations: int
    qp_iterations: int
    status: str
    kkt: float
    cost: float
    elastic_slack: float = 0.0


def _evaluate(struct, params, z):
    cost = struct.cost(z, params)
    grad = struct.cost_grad(z, params)
    req = struct.eq_residual(z, params)
    gin = struct.ineq_residual(z)
    return cost, grad, req, gin


def _kkt_max(grad, Jeq, req, Jin, gin, nu, lam):
    stat = grad + Jeq.T @ nu + Jin.T @ lam
    viol = gin.max(initial=0.0)
    comp = _inf_norm(lam * gin) if gin.size else 0.0
    return max(_inf_norm(stat), _inf_norm(req), max(viol, 0.0), comp)


def _merit(struct, params, z, sigma):
    try:
        cost = struct.cost(z, params)
        req = struct.eq_residual(z, params)
        gin = struct.ineq_residual(z)
    except (NonFinite, FloatingPointError):
        return np.inf, np.inf
    viol = np.abs(req).sum() + np.clip(gin, 0.0, None).sum()
    return cost + sigma * viol, viol


def _kkt_at(struct, params, z, nu, lam):
    try:
        _, grad, req, gin = _evaluate(struct, params, z)
    except (NonFinite, FloatingPointError):
        return np.inf
    return _kkt_max(grad, struct.eq_jacobian(z), req,
                    struct.ineq_jacobian(z), gin, nu, lam)


def _soc_step(struct, params, z, step, cache, grad, lam, passes=3):
    """Second-order correction: same QP model, constraint values taken at
    the displaced point.  One pass soaks up most of the constraint
    curvature along a long step but leaves a residual that scales with
    the correction itself, so the correction is repeated until the
    displaced constraint violation stops shrinking.  Returns the
    corrected step or None.

    Runs on the shared working-set machinery only: the correction is an
    optional polish, and a set hard enough to refute the warm duals is
    not worth an interior-point run here."""
    try:
        req_f = struct.eq_residual(z + step, params)
        gin_f = struct.ineq_residual(z + step)
    except (NonFinite, FloatingPointError):
        return None
    res = float(np.abs(req_f).sum() + np.clip(gin_f, 0.0, None).sum())
    cur = step
    best = None
    for _ in range(passes):
        beq = cache.A @ cur - req_f
        hin = cache.G @ cur - gin_f
        qp = try_working_set_step(cache, grad, beq, hin, lam)
        if qp is None:
            break
        cand = qp.x
        try:
            req_f = struct.eq_residual(z + cand, params)
            gin_f = struct.ineq_residual(z + cand)
        except (NonFinite, FloatingPointError):
            break
        res_c = float(np.abs(req_f).sum() + np.clip(gin_f, 0.0, None).sum())
        if not res_c < 0.5 * res:
            break
        best, res, cur = cand, res_c, cand
    return best


def solve_ocp(struct, params, z0, *, eq_duals=None, ineq_duals=None,
              mode="rti", kkt_tol=1e-6, max_iter=50, callback=None):
    """Gauss-Newton SQP on one optimal control problem instance.

    mode="rti" runs a single iteration (real-time loop); "converge"
    iterates to the KKT tolerance.  Either mode returns immediately
    with zero iterations when the supplied primal-dual point already
    satisfies the tolerance.

    callback, when given, is invoked once per outer iteration with a
    dict of live loop state (iterate, duals, residual, damping); it
    exists for diagnostics and its return value is ignored.
    """
    if mode not in ("rti", "converge"):
        raise ValueError(f"unknown mode {mode!r}")
    z = np.asarray(z0, dtype=float).copy()
    nu = np.zeros(struct.ne) if eq_duals is None else np.asarray(
        eq_duals, dtype=float).copy()
    lam = np.zeros(struct.ni) if ineq_duals is None else np.clip(
        np.asarray(ineq_duals, dtype=float), 0.0, None)
    budget = 1 if mode == "rti" else max_iter
    sigma = 1.0
    qp_total = 0
    its = 0
    slack_used = 0.0
    best = None
    hist_w: list[np.ndarray] = []
    hist_r: list[np.ndarray] = []
    spec = None
    mix_cool = 0
    floor = 1e-1
    soft = False
    may_restore = True
    stalled = False
    note = ""
    while True:
        try:
            cost, grad, req, gin = _evaluate(struct, params, z)
        except (NonFinite, FloatingPointError) as exc:
            raise SolveFailed(f"non-finite problem data: {exc}") from exc
        Jeq = struct.eq_jacobian(z)
        Jin = struct.ineq_jacobian(z)
        kkt = _kkt_max(grad, Jeq, req, Jin, gin, nu, lam)
        if callback is not None:
            callback(dict(it=its, z=z, nu=nu, lam=lam, kkt=kkt, cost=cost,
                          floor=floor, sigma=sigma, qp_total=qp_total,
                          note=note))
            note = ""
        if kkt <= kkt_tol:
            return SolveResult(z, nu, lam, its, qp_total, "converged",
                               kkt, cost, slack_used)
        if spec is not None:
            # a mixed point is on probation until the refreshed duals
            # confirm it beats the residual it replaced.  A residual
            # orders of magnitude above the replaced one is not worth
            # refreshing: revert on the spot instead of paying several
            # subproblems to rediscover the pre-jump state.
            age, kkt0, zf, nuf, lamf = spec
            if kkt < kkt0:
                spec = None
            elif age >= 3 or kkt > 10.0 * kkt0:
                z, nu, lam = zf, nuf, lamf
                spec = None
                mix_cool = 6
                its += 1
                note = "spec-revert"
                continue
            else:
                spec = (age + 1, kkt0, zf, nuf, lamf)
        viol_now = float(np.abs(req).sum() + np.clip(gin, 0.0, None).sum())
        merit_now = cost + sigma * viol_now
        if best is None or merit_now < best[0]:
            best = (merit_now, z.copy(), nu.copy(), lam.copy(), kkt, cost)
        if its >= budget:
            if mode == "rti":
                return SolveResult(z, nu, lam, its, qp_total, "rti",
                                   kkt, cost, slack_used)
            _, zb, nub, lamb, kktb, costb = best
            return SolveResult(zb, nub, lamb, its, qp_total, "max_iters",
                               kktb, costb, slack_used)

        # the stiff certificate damping stabilizes the cold phase but caps
        # the contraction rate near the solution; hand off to a softer
        # model once the residual enters the final approach.  From there
        # the damping adapts: a line search that refutes the model at
        # every scale stiffens it, clean full steps relax it again.
        if not soft and kkt <= 1e3 * kkt_tol:
            soft = True
            floor = 1e-4
        H = struct.hessian(z, params, lam, cert_floor=floor)
        cache = _SaddleCache(H, Jeq, Jin)
        qp = None
        if _inf_norm(lam) > 0.0:
            qp = try_working_set_step(cache, grad, -req, -gin, lam)
        if qp is None:
            try:
                qp = solve_qp(H, grad, Jeq, -req, Jin, -gin, lam0=lam)
            except QpError:
                try:
                    # last-resort path, give the interior point more room
                    qp, smax = solve_qp_elastic(H, grad, Jeq, -req,
                                                Jin, -gin, max_iter=150)
                    slack_used = max(slack_used, smax)
                except QpError as exc:
                    raise SolveFailed(
                        f"QP subproblem failed: {exc}") from exc
        qp_total += qp.iterations

        step = qp.x
        # exact-penalty weight tracks the dual scale both ways; a pure
        # ratchet leaves a stale huge weight rejecting good full steps
        need = 1.1 * max(_inf_norm(qp.eq_duals),
                         _inf_norm(qp.ineq_duals)) + 1e-3
        sigma = need if sigma < need else max(need, 0.5 * sigma)
        m0, viol0 = _merit(struct, params, z, sigma)
        # the penalty term may only promise the violation the step
        # actually removes in the linear model; an elastic or degenerate
        # subproblem leaves part of it standing, and charging for that
        # part deadlocks the backtracking on a decrease no step size can
        # deliver
        viol_lin = float(np.abs(req + Jeq @ step).sum() +
                         np.clip(gin + Jin @ step, 0.0, None).sum())
        removable = max(0.0, viol0 - viol_lin)
        if may_restore and stalled and viol0 > 1e-9 \
                and removable < 0.5 * viol0:
            # the subproblem cannot see a way to remove the violation:
            # it needs motion along a near-null direction of the active
            # rows that the factorized solve suppresses.  Waiting for an
            # actual stall matters: the same residual pattern shows up
            # transiently while the solve is still making progress, and
            # projecting then throws away a converging dual estimate.
            zr = _restore_feasibility(struct, params, z, lam)
            if zr is not None:
                z = zr
                if not soft:
                    soft = True
                    floor = 1e-4
                stalled = False
                hist_w.clear()
                hist_r.clear()
                its += 1
                note = "restore"
                continue
            may_restore = False
        descent = float(grad @ step) - sigma * removable
        alpha = 1.0
        # once the predicted decrease drops to the merit function's own
        # rounding noise the line search carries no information (the
        # penalty term promises removal of residuals that are already at
        # roundoff), so take the unit Newton step instead of letting the
        # backtracking loop reject it on noise
        noise = 100.0 * np.finfo(float).eps * (1.0 + abs(m0))
        if ARMIJO * abs(descent) > noise:
            accept = m0 + ARMIJO * descent
            m1, _ = _merit(struct, params, z + step, sigma)
            if m1 > accept:
                # second-order correction: re-solve with constraints taken
                # at the full step to soak up their curvature (Maratos
                # guard)
                corrected = _soc_step(struct, params, z, step, cache, grad,
                                      lam)
                if corrected is not None:
                    m_soc, _ = _merit(struct, params, z + corrected, sigma)
                    if m_soc <= accept:
                        step, m1 = corrected, m_soc
            if m1 > accept:
                while True:
                    alpha *= 0.5
                    m1, _ = _merit(struct, params, z + alpha * step, sigma)
                    if m1 <= m0 + ARMIJO * alpha * descent \
                            or alpha < 2.0 ** -10:
                        break
            if alpha < 0.25 and _kkt_at(
                    struct, params, z + step,
                    qp.eq_duals, qp.ineq_duals) <= 0.95 * kkt:
                # the penalty term blocks on curvature-level constraint
                # violations the step cannot remove, but optimality
                # residuals still improve: take the full step (watchdog).
                # Each acceptance shrinks the KKT error by 5% minimum, so
                # the sequence of such steps cannot cycle.
                alpha = 1.0
            elif alpha < 2.0 ** -10 \
                    and m1 > m0 + ARMIJO * alpha * descent \
                    and floor < 1e-1:
                # the merit refuted the step at every scale: the model is
                # lying along its softest block, where damping at the
                # measurement-noise level turns sub-tolerance gradient
                # entries into order-one excursions.  Discard the step
                # and stiffen rather than drift uphill at the floor.
                floor = min(30.0 * floor, 1e-1)
                hist_w.clear()
                hist_r.clear()
                its += 1
                note = f"reject floor->{floor:.0e}"
                continue
        # a floored backtracking or a vanishing displacement while the
        # residual is still large is the deadlock signature the
        # restoration waits for
        stalled = alpha < 2.0 ** -8 or \
            alpha * _inf_norm(step) < 1e-10 * (1.0 + _inf_norm(z))
        if alpha == 1.0:
            w_pre = np.concatenate([z, nu, lam])
            r_pre = np.concatenate([step, qp.eq_duals - nu,
                                    qp.ineq_duals - lam])
        note = f"a={alpha:.1e}"
        z = z + alpha * step
        nu = (1.0 - alpha) * nu + alpha * qp.eq_duals
        lam = (1.0 - alpha) * lam + alpha * qp.ineq_duals
        its += 1
        if soft and alpha == 1.0:
            floor = max(floor / 3.0, 1e-6)
        if mix_cool > 0:
            mix_cool -= 1
        if alpha == 1.0:
            # slow linear tails come from curvature the Gauss-Newton
            # model drops, and they carry several modes at once, so
            # scalar extrapolation along the last step is not enough.
            # Anderson mixing over the recent full steps solves for the
            # combination of iterates whose predicted residual is
            # smallest; on a linear contraction this removes as many
            # error modes as the window holds.
            hist_w.append(w_pre)
            hist_r.append(r_pre)
            if len(hist_w) > ANDERSON_WINDOW:
                hist_w.pop(0)
                hist_r.pop(0)
            # extrapolation assumes a contracting fixed-point iteration;
            # on a growing step sequence it manufactures a huge jump in
            # exactly the wrong direction
            contracting = len(hist_r) < 2 or (
                np.linalg.norm(hist_r[-1][:struct.nv]) <=
                np.linalg.norm(hist_r[-2][:struct.nv]))
            if len(hist_w) >= 2 and spec is None and mix_cool == 0 \
                    and contracting:
                rr = np.stack(hist_r, axis=1)
                ww = np.stack(hist_w, axis=1)
                d_r = rr[:, 1:] - rr[:, :-1]
                d_w = ww[:, 1:] - ww[:, :-1]
                gam, *_ = np.linalg.lstsq(d_r, hist_r[-1], rcond=None)
                w_mix = (hist_w[-1] + hist_r[-1]) - (d_w + d_r) @ gam
                z_m = w_mix[:struct.nv]
                nu_m = w_mix[struct.nv:struct.nv + struct.ne]
                lam_m = np.clip(w_mix[struct.nv + struct.ne:], 0.0, None)
                z_pre = hist_w[-1][:struct.nv]
                jump = z_m - z_pre
                if _inf_norm(jump) > 4.0 * _inf_norm(step):
                    # a jump many steps long leaves the region where the
                    # constraint linearization holds, and the quadratic
                    # residual it picks up would mask the gain; restore
                    # feasibility at the landing point with the same
                    # displaced-constraint correction the line search uses
                    corr = _soc_step(struct, params, z_pre, jump, cache,
                                     grad, lam_m)
                    if corr is not None:
                        z_m = z_pre + corr
                # the mixed duals are only a linear guess, so the KKT
                # residual at the mixed point cannot be judged yet; take
                # it on probation, let the next couple of solves refresh
                # the duals, and fall back if nothing beats the residual
                # the jump replaced
                spec = (1, kkt, z, nu, lam)
                z, nu, lam = z_m, nu_m, lam_m
                hist_w.clear()
                hist_r.clear()
                note += " mix"
        else:
            hist_w.clear()
            hist_r.clear()
