"""Kinematic bicycle model with drivetrain lag, RK4 discretization, Jacobians.

State layout (6): [p_x, p_y, heading, speed, drive, steer]
Input layout (2): [drive_rate, steer_rate]

`drive` is the normalized motor command that speed relaxes toward (scaled by
the drivetrain gain), `steer` the front steering angle. All evaluation
functions broadcast over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NonFinite",
    "VehicleParams",
    "PX",
    "PY",
    "HEADING",
    "SPEED",
    "DRIVE",
    "STEER",
    "NX",
    "NU",
    "output",
    "continuous_dynamics",
    "continuous_jacobians",
    "rk4_step",
    "rk4_jacobians",
    "expand_steady",
    "reduce_steady",
]

PX, PY, HEADING, SPEED, DRIVE, STEER = range(6)
NX = 6
NU = 2


class NonFinite(ValueError):
    """Model evaluated outside its domain or produced non-finite values."""


@dataclass(frozen=True)
class VehicleParams:
    """Physical constants of the platform and the control period."""

    accel_gain: float = 5.03  # m/s per unit drive command
    motor_tau: float = 0.8  # s, speed relaxation time
    rear_axle: float = 0.0517  # m, rear axle to center
    front_axle: float = 0.0466  # m, front axle to center
    dt: float = 0.04  # s, control period (25 Hz)


def output(x):
    """Tracked output: planar position."""
    return np.asarray(x, dtype=float)[..., :2]


def _slip(steer, p: VehicleParams):
    k = p.rear_axle / (p.front_axle + p.rear_axle)
    return np.arctan(k * np.tan(steer))


def _check_domain(x, u):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise NonFinite("non-finite state or input")
    if np.any(np.abs(np.asarray(x, dtype=float)[..., STEER]) >= np.pi / 2):
        raise NonFinite("steering angle outside (-pi/2, pi/2)")


def continuous_dynamics(x, u, params: VehicleParams = VehicleParams()):
    """Time derivative of the state, broadcasting over batch dimensions."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_domain(x, u)
    beta = _slip(x[..., STEER], params)
    course = x[..., HEADING] + beta
    v = x[..., SPEED]
    dx = np.empty(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (NX,))
    dx[..., PX] = v * np.cos(course)
    dx[..., PY] = v * np.sin(course)
    dx[..., HEADING] = v * np.sin(beta) / params.rear_axle
    dx[..., SPEED] = (-v + params.accel_gain * x[..., DRIVE]) / params.motor_tau
    dx[..., DRIVE] = u[..., 0]
    dx[..., STEER] = u[..., 1]
    return dx


def continuous_jacobians(x, u, params: VehicleParams = VehicleParams()):
    """Exact Jacobians (d xdot / dx, d xdot / du) of the continuous model."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    k = params.rear_axle / (params.front_axle + params.rear_axle)
    steer = x[..., STEER]
    tan_w = np.tan(steer)
    beta = np.arctan(k * tan_w)
    # d beta / d steer through arctan(k tan(w))
    dbeta = k * (1.0 + tan_w**2) / (1.0 + (k * tan_w) ** 2)
    course = x[..., HEADING] + beta
    v = x[..., SPEED]
    c, s = np.cos(course), np.sin(course)

    A = np.zeros(batch + (NX, NX))
    A[..., PX, HEADING] = -v * s
    A[..., PX, SPEED] = c
    A[..., PX, STEER] = -v * s * dbeta
    A[..., PY, HEADING] = v * c
    A[..., PY, SPEED] = s
    A[..., PY, STEER] = v * c * dbeta
    A[..., HEADING, SPEED] = np.sin(beta) / params.rear_axle
    A[..., HEADING, STEER] = v * np.cos(beta) * dbeta / params.rear_axle
    A[..., SPEED, SPEED] = -1.0 / params.motor_tau
    A[..., SPEED, DRIVE] = params.accel_gain / params.motor_tau

    B = np.zeros(batch + (NX, NU))
    B[..., DRIVE, 0] = 1.0
    B[..., STEER, 1] = 1.0
    return A, B


def rk4_step(x, u, params: VehicleParams = VehicleParams()):
    """One classical Runge-Kutta step over the control period."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = params.dt
    k1 = continuous_dynamics(x, u, params)
    k2 = continuous_dynamics(x + 0.5 * h * k1, u, params)
    k3 = continuous_dynamics(x + 0.5 * h * k2, u, params)
    k4 = continuous_dynamics(x + h * k3, u, params)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFinite("integration produced non-finite state")
    return out


def rk4_jacobians(x, u, params: VehicleParams = VehicleParams()):
    """Exact Jacobians of rk4_step via the chain rule through all four stages.

    Returns (A, B) with shapes (..., 6, 6) and (..., 6, 2).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = params.dt
    eye = np.eye(NX)

    k1 = continuous_dynamics(x, u, params)
    A1, B1 = continuous_jacobians(x, u, params)
    Jx1, Ju1 = A1, B1

    x2 = x + 0.5 * h * k1
    k2 = continuous_dynamics(x2, u, params)
    A2, B2 = continuous_jacobians(x2, u, params)
    Jx2 = A2 @ (eye + 0.5 * h * Jx1)
    Ju2 = A2 @ (0.5 * h * Ju1) + B2

    x3 = x + 0.5 * h * k2
    A3, B3 = continuous_jacobians(x3, u, params)
    Jx3 = A3 @ (eye + 0.5 * h * Jx2)
    Ju3 = A3 @ (0.5 * h * Ju2) + B3

    k3 = continuous_dynamics(x3, u, params)
    x4 = x + h * k3
    A4, B4 = continuous_jacobians(x4, u, params)
    Jx4 = A4 @ (eye + h * Jx3)
    Ju4 = A4 @ (h * Ju3) + B4

    A = eye + (h / 6.0) * (Jx1 + 2.0 * Jx2 + 2.0 * Jx3 + Jx4)
    B = (h / 6.0) * (Ju1 + 2.0 * Ju2 + 2.0 * Ju3 + Ju4)
    return A, B


def expand_steady(ref):
    """Full steady state from the reduced coordinates (p_x, p_y, heading, steer).

    Speed and drive are zero at standstill, which makes the expanded state an
    exact fixed point of rk4_step under zero input.
    """
    r = np.asarray(ref, dtype=float)
    x = np.zeros(r.shape[:-1] + (NX,))
    x[..., PX] = r[..., 0]
    x[..., PY] = r[..., 1]
    x[..., HEADING] = r[..., 2]
    x[..., STEER] = r[..., 3]
    return x


def reduce_steady(x):
    """Reduced steady-state coordinates of a standstill state."""
    x = np.asarray(x, dtype=float)
    return x[..., [PX, PY, HEADING, STEER]]
