"""Closed-loop navigation controller.

Each control tick runs one pass of the receding-horizon scheme: refresh
the waypoint chain (full replan on a new target, one condensation pass
otherwise), warm-start the trajectory problem from the previous
solution, solve, and hand back the first input.  The artificial
reference and its chain ride along inside the decision vector, so
between replans the planner state is simply read back out of the
solver's solution.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .geometry import footprint_vertices, vertex_set_distance
from .ocp import OcpConfig, OcpParams, OcpStructure
from .planner import PlannerState, at_target, condense, remaining_length, retarget
from .roadmap import NoPath, build_roadmap
from .solver import SolveFailed, solve_ocp

QUEUE_TIEBREAK = 1e-3  # pending-waypoint count weight in the reported cost


@dataclass
class ControllerConfig:
    ocp: OcpConfig = field(default_factory=OcpConfig)
    roadmap_margin: float = 0.01
    # converge keeps the per-tick cost monotone and the closed loop on the
    # nonlinear clearance surface; rti trades both for a fixed iteration
    # budget and exists for timing studies.
    solve_mode: str = "converge"
    kkt_tol: float = 1e-6
    max_iter: int = 50


@dataclass
class StepResult:
    u: np.ndarray
    objective: float
    augmented_cost: float
    status: str
    iterations: int
    qp_iterations: int
    kkt: float
    solve_seconds: float
    retargeted: bool
    condensed: bool
    solve_failed: bool
    replan_failed: bool
    min_clearance: float
    reference: np.ndarray
    chain: np.ndarray | None
    queue_left: int
    predicted: np.ndarray


class Controller:
    """Drives one vehicle through one static obstacle set.

    variant="segments" is the chain-based scheme; variant="reference"
    swaps the chain for a plain distance-to-target reference cost and
    skips all planning.
    """

    def __init__(self, obstacles, workspace, config=None, variant="segments"):
        self.cfg = config if config is not None else ControllerConfig()
        self.variant = variant
        self.obstacles = list(obstacles)
        self.workspace = workspace
        t0 = time.perf_counter()
        self.structure = OcpStructure(self.cfg.ocp, self.obstacles, workspace,
                                      variant=variant)
        if variant == "segments":
            self.roadmap = build_roadmap(
                self.obstacles, workspace, self.cfg.ocp.segment_clearance,
                self.cfg.roadmap_margin)
        else:
            self.roadmap = None
        self.preprocessing_seconds = time.perf_counter() - t0
        self.last_retarget_seconds = 0.0
        self._target = None
        self._pending = None
        self._generation = 0
        self._ps: PlannerState | None = None
        self._z = None
        self._nu = None
        self._lam = None
        self._ref_out = None
        self._last_u = np.zeros(2)

    @property
    def target(self):
        return self._target

    def set_target(self, target):
        """Request a new navigation goal; takes effect on the next step."""
        self._pending = np.asarray(target, dtype=float).copy()

    def _min_clearance(self, x):
        if not self.obstacles:
            return np.inf
        verts = footprint_vertices(x[:2], x[dyn.HEADING])
        return min(vertex_set_distance(verts, obs.vertices)[0]
                   for obs in self.obstacles)

    def step(self, x, t_index):
        """One control tick: replan/condense, solve, return the input."""
        x = np.asarray(x, dtype=float)
        if self._pending is None and self._target is None:
            raise RuntimeError("no target set")
        retargeted = False
        condensed = False
        replan_failed = False

        if self.variant == "segments":
            want_new = (
                self._ps is None
                or (self._pending is not None
                    and not np.array_equal(self._pending, self._target))
            )
            if want_new:
                goal = self._pending if self._pending is not None else self._target
                start = self._ref_out if self._ref_out is not None else x[:2]
                t0 = time.perf_counter()
                try:
                    self._ps = retarget(self.roadmap, start, goal,
                                        self.cfg.ocp.n_segments,
                                        self._generation + 1)
                    self._generation += 1
                    self._target = goal.copy()
                    retargeted = True
                except NoPath:
                    replan_failed = True
                    if self._ps is None:
                        raise
                self.last_retarget_seconds = time.perf_counter() - t0
                self._pending = None
            elif not at_target(self._ps):
                before = len(self._ps.queue)
                self._ps = condense(self._ps, self.obstacles,
                                    self.cfg.ocp.segment_clearance)
                condensed = len(self._ps.queue) != before
            chain = self._ps.chain
            params = OcpParams(x_init=x, chain_target=chain[-1],
                               final_target=self._target)
        else:
            if self._pending is not None:
                self._target = self._pending
                self._pending = None
                retargeted = True
            chain = None
            params = OcpParams(x_init=x, final_target=self._target)

        z0 = self.structure.initial_guess(x, chain=chain, prev=self._z)
        t0 = time.perf_counter()
        try:
            res = solve_ocp(self.structure, params, z0,
                            eq_duals=self._nu, ineq_duals=self._lam,
                            mode=self.cfg.solve_mode, kkt_tol=self.cfg.kkt_tol,
                            max_iter=self.cfg.max_iter)
            solve_seconds = time.perf_counter() - t0
        except SolveFailed:
            solve_seconds = time.perf_counter() - t0
            return StepResult(
                u=self._last_u.copy(), objective=np.nan, augmented_cost=np.nan,
                status="failed", iterations=0, qp_iterations=0, kkt=np.nan,
                solve_seconds=solve_seconds, retargeted=retargeted,
                condensed=condensed, solve_failed=True,
                replan_failed=replan_failed,
                min_clearance=self._min_clearance(x),
                reference=x[:2].copy(),
                chain=chain.copy() if chain is not None else None,
                queue_left=len(self._ps.queue) if self._ps is not None else 0,
                predicted=np.tile(x[:2], (self.cfg.ocp.horizon + 1, 1)))

        self._z = res.z
        self._nu = res.eq_duals
        self._lam = res.ineq_duals
        ref = self.structure.reference(res.z)
        self._ref_out = ref[:2].copy()
        u = self.structure.inputs(res.z)[0].copy()
        self._last_u = u

        if self.variant == "segments":
            # the chain lives in the decision vector; read the moved one back
            self._ps = replace(self._ps,
                               chain=self.structure.chain_points(res.z))
            tail, pending = remaining_length(self._ps)
            augmented = res.cost + self.cfg.ocp.path_weight * tail \
                + QUEUE_TIEBREAK * pending
            queue_left = pending
            chain_out = self._ps.chain.copy()
        else:
            augmented = res.cost
            queue_left = 0
            chain_out = None

        return StepResult(
            u=u, objective=res.cost, augmented_cost=augmented,
            status=res.status, iterations=res.iterations,
            qp_iterations=res.qp_iterations, kkt=res.kkt,
            solve_seconds=solve_seconds, retargeted=retargeted,
            condensed=condensed, solve_failed=False,
            replan_failed=replan_failed,
            min_clearance=self._min_clearance(x),
            reference=ref.copy(), chain=chain_out, queue_left=queue_left,
            predicted=self.structure.states(res.z)[:, :2].copy())
