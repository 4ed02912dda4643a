"""Kinematic bicycle robot, rollouts with exact sensitivities, collision constraint.

State is (x, y, theta, v); control is (phi, a) with phi the steering angle
and a the acceleration. Heading is wrapped into (-pi, pi] after every step;
wrapping shifts theta by multiples of 2*pi and leaves all derivatives alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])

    @classmethod
    def from_array(cls, a) -> "RobotState":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class ControlInput:
    phi: float
    a: float


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 1.0
    phi_max: float = 0.6
    a_min: float = -3.0
    a_max: float = 3.0
    v_max: float = 6.0

    def __post_init__(self):
        if not 0 < self.phi_max < math.pi / 2:
            raise ValueError("phi_max must lie in (0, pi/2)")
        if not self.a_min <= self.a_max:
            raise ValueError("a_min must not exceed a_max")
        if not self.wheelbase > 0:
            raise ValueError("wheelbase must be > 0")

    def control_bounds(self) -> list[tuple[float, float]]:
        return [(-self.phi_max, self.phi_max), (self.a_min, self.a_max)]

    def admissible(self, u, tol: float = 0.0) -> bool:
        phi, a = u
        return abs(phi) <= self.phi_max + tol and self.a_min - tol <= a <= self.a_max + tol


@dataclass(frozen=True)
class ConstraintSpec:
    epsilon: float
    lipschitz: float = 1.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if not self.lipschitz > 0:
            raise ValueError("Lipschitz constant must be > 0")


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    w = math.remainder(theta, TWO_PI)
    return math.pi if w <= -math.pi else w


def _step(x, y, th, v, phi, a, dt, wb):
    return (
        x + dt * v * math.cos(th),
        y + dt * v * math.sin(th),
        wrap_angle(th + dt * (v / wb) * math.tan(phi)),
        v + dt * a,
    )


def bicycle_step(s: RobotState, u: ControlInput, dt: float, wheelbase: float = 1.0) -> RobotState:
    return RobotState(*_step(s.x, s.y, s.theta, s.v, u.phi, u.a, dt, wheelbase))


class Rollout(NamedTuple):
    states: np.ndarray  # (M + 1, 4), row 0 is the initial state
    sensitivities: np.ndarray | None  # (M + 1, 4, M, 2): d state[k, i] / d control[m, j]


def rollout_states(s0, controls: np.ndarray, dt: float, wheelbase: float = 1.0) -> np.ndarray:
    s = tuple(float(c) for c in (s0.as_array() if isinstance(s0, RobotState) else s0))
    out = [s]
    for phi, a in np.asarray(controls, dtype=float).tolist():
        s = _step(*s, phi, a, dt, wheelbase)
        out.append(s)
    return np.array(out)


def rollout(
    s0, controls, dt: float, wheelbase: float = 1.0, sensitivities: bool = True
) -> Rollout:
    """Apply ``controls`` (M, 2) from ``s0`` by repeated :func:`bicycle_step`.

    With ``sensitivities`` the full state Jacobian is propagated forward by
    the chain rule: ``S[k+1] = A_k S[k]`` plus ``B_k`` in column ``k``.
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    states = rollout_states(s0, controls, dt, wheelbase)
    if not sensitivities:
        return Rollout(states, None)
    m = len(controls)
    sens = np.zeros((m + 1, 4, m, 2))
    for k in range(m):
        _, _, th, v = states[k]
        phi = controls[k, 0]
        c, s, tp = math.cos(th), math.sin(th), math.tan(phi)
        prev = sens[k]
        nxt = sens[k + 1]
        nxt[0] = prev[0] - dt * v * s * prev[2] + dt * c * prev[3]
        nxt[1] = prev[1] + dt * v * c * prev[2] + dt * s * prev[3]
        nxt[2] = prev[2] + (dt * tp / wheelbase) * prev[3]
        nxt[3] = prev[3]
        nxt[2, k, 0] += dt * v / (wheelbase * math.cos(phi) ** 2)
        nxt[3, k, 1] += dt
    return Rollout(states, sens)


def rollout_gradient(
    states: np.ndarray, controls: np.ndarray, state_grads: np.ndarray, dt: float, wheelbase: float = 1.0
) -> np.ndarray:
    """Reverse-mode product: gradient w.r.t. controls of ``sum(state_grads * states)``.

    ``state_grads`` has the shape of ``states``; its first row is ignored.
    """
    m = len(controls)
    g = np.asarray(state_grads, dtype=float).tolist()
    ctrl = np.asarray(controls, dtype=float).tolist()
    st = states.tolist()
    out = [[0.0, 0.0] for _ in range(m)]
    lx, ly, lth, lv = g[m]
    for k in range(m - 1, -1, -1):
        _, _, th, v = st[k]
        phi = ctrl[k][0]
        cp = math.cos(phi)
        out[k][0] = lth * dt * v / (wheelbase * cp * cp)
        out[k][1] = lv * dt
        c, s = math.cos(th), math.sin(th)
        gx, gy, gth, gv = g[k]
        # adjoint of state k = own gradient + A_k^T (adjoint of state k+1)
        new_th = gth + lth - dt * v * s * lx + dt * v * c * ly
        new_v = gv + lv + dt * c * lx + dt * s * ly + dt * math.tan(phi) / wheelbase * lth
        lx, ly, lth, lv = gx + lx, gy + ly, new_th, new_v
    return np.array(out)


def constraint_value(p, Y, cs: ConstraintSpec) -> float:
    """Distance from robot position ``p`` to the nearest agent in ``Y`` (N, 2), minus epsilon."""
    Y = np.asarray(Y, dtype=float).reshape(-1, 2)
    if len(Y) < 1:
        raise ValueError("need at least one agent")
    d = Y - np.asarray(p, dtype=float)
    return float(np.min(np.hypot(d[:, 0], d[:, 1])) - cs.epsilon)
