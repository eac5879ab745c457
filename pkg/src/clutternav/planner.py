"""Intermediate-target bookkeeping between the roadmap and the controller.

Keeps a fixed-size chain of segment endpoints (the decision structure the
optimizer works with) plus a queue of roadmap waypoints not yet absorbed.
Whenever a chain point can be skipped, i.e. the chord bridging its neighbors
keeps the required clearance from the raw obstacles, the chain slides forward
along the queue, advancing the intermediate target while preserving
feasibility of every segment.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import segment_polytope_distance
from .roadmap import Roadmap, shortest_path

__all__ = [
    "PlannerState",
    "retarget",
    "condense",
    "remaining_length",
    "at_target",
]

# skips only fire with a hair of true margin, so the downstream separation
# certificates are never asked to hold exactly on the boundary
_SKIP_MARGIN = 1e-9


@dataclass(frozen=True)
class PlannerState:
    """Immutable snapshot of the path-following bookkeeping.

    chain holds n_segments + 1 points; chain[0] is the current reference
    output, chain[-1] the intermediate target. queue holds waypoints still
    ahead of the chain, ending at the final target (empty once absorbed).
    """

    chain: np.ndarray
    queue: np.ndarray
    target: np.ndarray
    generation: int

    @property
    def intermediate_target(self):
        return self.chain[-1]


def retarget(rm: Roadmap, start_output, target, n_segments, generation):
    """Reinitialize the chain from a fresh shortest-path query.

    The first n_segments + 1 waypoints become the chain; the rest become
    the queue.  Shorter paths are refined by splitting the longest link at
    its midpoint (zero-length chain segments would park the optimizer on
    the flat spot of the smoothed path-length cost).  Raises NoPath when
    the roadmap cannot connect start to target.
    """
    if n_segments < 2:
        raise ValueError("need at least two segments")
    target = np.array(target, dtype=float)
    path = shortest_path(rm, start_output, target)
    if len(path) < n_segments + 1:
        chain = path.copy()
        while len(chain) < n_segments + 1:
            seg = np.linalg.norm(np.diff(chain, axis=0), axis=1)
            j = int(np.argmax(seg))
            mid = 0.5 * (chain[j] + chain[j + 1])
            chain = np.insert(chain, j + 1, mid, axis=0)
        queue = np.zeros((0, 2))
    else:
        chain = path[: n_segments + 1].copy()
        queue = path[n_segments + 1 :].copy()
    return PlannerState(chain=chain, queue=queue, target=target, generation=generation)


def _chord_clear(p0, p1, obstacles, clearance):
    return all(
        segment_polytope_distance(p0, p1, obs) >= clearance + _SKIP_MARGIN
        for obs in obstacles
    )


def condense(ps: PlannerState, obstacles, clearance):
    """Slide the chain forward along the queue wherever a point can be skipped.

    Scans the chain once; a successful skip drops the bridged point, appends
    the next queued waypoint, and retries the same index, so several waypoints
    can be absorbed per call. Stops when the scan completes or the queue is
    exhausted. The returned chain always has the same length as the input.
    """
    chain = ps.chain
    queue = ps.queue
    n = len(chain) - 1
    j = 0
    qi = 0
    while j <= n - 2 and qi < len(queue):
        if _chord_clear(chain[j], chain[j + 2], obstacles, clearance):
            chain = np.vstack([chain[: j + 1], chain[j + 2 :], queue[qi][None, :]])
            qi += 1
        else:
            j += 1
    if qi == 0:
        return ps
    return replace(ps, chain=chain, queue=queue[qi:].copy())


def remaining_length(ps: PlannerState):
    """Length of the queued path ahead of the intermediate target.

    Includes the connector from the intermediate target to the first queued
    waypoint. Returns (length, waypoints_left); (0.0, 0) once absorbed.
    """
    if len(ps.queue) == 0:
        return 0.0, 0
    pts = np.vstack([ps.chain[-1][None, :], ps.queue])
    length = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    return length, len(ps.queue)


def at_target(ps: PlannerState, tol=1e-9):
    """True once the intermediate target coincides with the final target."""
    return bool(np.linalg.norm(ps.chain[-1] - ps.target) <= tol)
