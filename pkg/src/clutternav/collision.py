"""Separation certificates: multiplier variables that witness polytope clearance.

A clearance delta between two convex vertex sets is certified by a tuple
gamma = (mu_r, mu_o, xi) satisfying, componentwise,

    mu_r + mu_o + 0.25 * xi.xi + delta^2       <= 0
    -V_robot^T xi - mu_r                       <= 0   (one row per robot vertex)
    +V_obst^T xi - mu_o                        <= 0   (one row per obstacle vertex)

which holds for some gamma exactly when the hull distance is at least delta.
These rows embed the clearance condition smoothly into the optimal control
problem; the closed form below seeds them from witness geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import batch_hull_distance, vertex_set_distance

__all__ = [
    "NotSeparated",
    "CollisionMultipliers",
    "multiplier_residuals",
    "warm_start_multipliers",
    "warm_start_batch",
    "is_separated_oracle",
]


class NotSeparated(ValueError):
    """Requested certificate for a pair closer than the clearance."""


@dataclass(frozen=True)
class CollisionMultipliers:
    """Certificate variables for one robot/obstacle pair."""

    mu_r: float
    mu_o: float
    xi: np.ndarray  # shape (2,)

    def as_array(self):
        return np.array([self.mu_r, self.mu_o, self.xi[0], self.xi[1]])


def multiplier_residuals(robot_verts, obst_verts, gamma: CollisionMultipliers, clearance):
    """Certificate residuals, all <= 0 when gamma certifies the clearance.

    Returns the concatenation [sum row, robot rows, obstacle rows].
    """
    Vr = np.atleast_2d(np.asarray(robot_verts, dtype=float))
    Vo = np.atleast_2d(np.asarray(obst_verts, dtype=float))
    xi = np.asarray(gamma.xi, dtype=float)
    head = gamma.mu_r + gamma.mu_o + 0.25 * float(xi @ xi) + clearance**2
    robot_rows = -Vr @ xi - gamma.mu_r
    obst_rows = Vo @ xi - gamma.mu_o
    return np.concatenate([[head], robot_rows, obst_rows])


def warm_start_multipliers(robot_verts, obst_verts, clearance):
    """Closed-form certificate from witness geometry.

    With d the hull distance, n the unit direction from the obstacle witness
    to the robot witness, b_r the minimum of n.v over robot vertices and b_o
    the maximum over obstacle vertices: xi = 2 delta n, mu_r = -2 delta b_r,
    mu_o = 2 delta b_o. The sum row evaluates to 2 delta (delta - d), so the
    certificate is feasible exactly when d >= delta. Raises NotSeparated for
    pairs closer than the clearance.
    """
    Vr = np.atleast_2d(np.asarray(robot_verts, dtype=float))
    Vo = np.atleast_2d(np.asarray(obst_verts, dtype=float))
    d, pr, po = vertex_set_distance(Vr, Vo)
    if d < clearance:
        raise NotSeparated(f"distance {d:.6g} below clearance {clearance:.6g}")
    n = (pr - po) / d
    b_r = float(np.min(Vr @ n))
    b_o = float(np.max(Vo @ n))
    delta = float(clearance)
    return CollisionMultipliers(
        mu_r=-2.0 * delta * b_r, mu_o=2.0 * delta * b_o, xi=2.0 * delta * n
    )


def warm_start_batch(robot_verts, obst_verts, clearance):
    """Vectorized closed-form certificates over matched hull batches.

    robot_verts is (n, mr, 2) and obst_verts (n, mo, 2). Returns
    (gamma, separated) where gamma is (n, 4) rows [mu_r, mu_o, xi_x, xi_y]
    and separated flags rows with distance >= clearance. Non-separated rows
    still receive the formula evaluated at the witness direction (useful as
    an optimizer guess); rows with zero distance get a zero certificate.
    """
    Vr = np.asarray(robot_verts, dtype=float)
    Vo = np.asarray(obst_verts, dtype=float)
    d, pr, po = batch_hull_distance(Vr, Vo)
    delta = float(clearance)
    safe = np.where(d > 1e-12, d, 1.0)
    n = (pr - po) / safe[:, None]
    b_r = np.min(np.einsum("nmi,ni->nm", Vr, n), axis=1)
    b_o = np.max(np.einsum("nmi,ni->nm", Vo, n), axis=1)
    gamma = np.zeros((Vr.shape[0], 4))
    live = d > 1e-12
    gamma[live, 0] = -2.0 * delta * b_r[live]
    gamma[live, 1] = 2.0 * delta * b_o[live]
    gamma[live, 2:] = 2.0 * delta * n[live]
    return gamma, d >= delta


def is_separated_oracle(robot_verts, obst_verts, clearance):
    """Reference predicate: hull distance at least the clearance."""
    d, _, _ = vertex_set_distance(robot_verts, obst_verts)
    return d >= clearance
