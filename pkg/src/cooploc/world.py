"""Ground-truth agents, their body-frame kinematics and trajectory generators.

Positions are stored in the agent's own body frame, ``p = R^T pbar``, and
evolve as ``p' = -S(w) p + v`` together with ``R' = R S(w)``.
Trajectories are declared in the inertial frame and turned into body-frame
velocity inputs by :func:`velocities_for_trajectory`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from .geom3 import integrate_rotation, rot_z, rotation_from_quat, skew

LANDMARK = "landmark"
VEHICLE = "vehicle"

# body frame of a forward-looking camera (z forward, x right, y down) when
# the vehicle heads along inertial +x
CAMERA_FORWARD = np.array([[0.0, 0.0, 1.0],
                           [-1.0, 0.0, 0.0],
                           [0.0, -1.0, 0.0]])
MOUNTS = {"identity": np.eye(3), "camera_forward": CAMERA_FORWARD}


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    p: np.ndarray

    @cached_property
    def inertial(self) -> np.ndarray:
        # computed once per pose; read-only because it is shared
        x = self.R @ self.p
        x.setflags(write=False)
        return x

    @classmethod
    def from_inertial(cls, R: np.ndarray, pbar) -> "Pose":
        R = np.asarray(R, dtype=float)
        return cls(R, R.T @ np.asarray(pbar, dtype=float))


@dataclass(frozen=True)
class AgentState:
    id: int
    kind: str
    pose: Pose
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.25
    name: str = ""

    @property
    def inertial(self) -> np.ndarray:
        return self.pose.inertial

    @property
    def is_landmark(self) -> bool:
        return self.kind == LANDMARK

    def with_inputs(self, v, omega) -> "AgentState":
        return AgentState(self.id, self.kind, self.pose, np.asarray(v, dtype=float),
                          np.asarray(omega, dtype=float), self.radius, self.name)


def body_position_rate(p: np.ndarray, v: np.ndarray, omega: np.ndarray) -> np.ndarray:
    return v - skew(omega) @ p


def rk4_position(p: np.ndarray, v: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """One RK4 step of ``p' = -S(w) p + v`` with constant ``v`` and ``w``."""
    # the stages collapse to p + dt (I + hB/2 (I + hB/3 (I + hB/4))) (B p + v)
    B = -dt * skew(omega)
    k = B @ p + dt * v
    return p + k + 0.5 * (B @ (k + (B @ (k + 0.25 * (B @ k))) / 3.0))


def propagate(state: AgentState, dt: float) -> AgentState:
    """Advance the true pose by ``dt`` holding the body velocities constant."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not (state.v.any() or state.omega.any()):
        return state
    R = integrate_rotation(state.pose.R, state.omega, dt)
    p = rk4_position(state.pose.p, state.v, state.omega, dt)
    return AgentState(state.id, state.kind, Pose(R, p), state.v, state.omega, state.radius, state.name)


@dataclass
class Trajectory:
    """Inertial path plus an orientation schedule.

    kind
        ``static`` (stays at ``start``), ``linear`` (``start + velocity t``),
        ``waypoint`` (cubic spline through ``(t, x, y, z)`` rows) or
        ``expression`` (three formulas in ``t``).
    orientation
        ``fixed``: ``R = Rz(yaw) @ mount`` (or ``quaternion`` when given).
        ``heading``: yaw follows the horizontal velocity direction.
    """

    kind: str = "static"
    start: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    waypoints: Optional[np.ndarray] = None
    expression: Optional[Tuple[str, str, str]] = None
    orientation: str = "fixed"
    yaw: float = 0.0
    mount: str = "identity"
    quaternion: Optional[Sequence[float]] = None

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.kind not in ("static", "linear", "waypoint", "expression"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.orientation not in ("fixed", "heading"):
            raise ValueError(f"unknown orientation mode {self.orientation!r}")
        if self.mount not in MOUNTS:
            raise ValueError(f"unknown mount {self.mount!r}; expected one of {sorted(MOUNTS)}")
        if self.start.shape != (3,) or self.velocity.shape != (3,):
            raise ValueError("trajectory start/velocity must be 3-vectors")
        self._spline = None
        self._funcs: Optional[List[Callable]] = None
        if self.kind == "waypoint":
            wp = np.asarray(self.waypoints, dtype=float)
            if wp.ndim != 2 or wp.shape[1] != 4 or len(wp) < 2:
                raise ValueError("waypoints must be rows of (t, x, y, z), at least two")
            if np.any(np.diff(wp[:, 0]) <= 0):
                raise ValueError("waypoint times must be strictly increasing")
            self.waypoints = wp
            self._spline = CubicSpline(wp[:, 0], wp[:, 1:], bc_type="natural")
            self.start = wp[0, 1:].copy()
        elif self.kind == "expression":
            self._funcs = _compile_expression(self.expression)
            self.start = self.position(0.0)
        if self.quaternion is not None:
            self._R_fixed = rotation_from_quat((self.quaternion[0], np.asarray(self.quaternion[1:])))
        else:
            self._R_fixed = rot_z(self.yaw) @ MOUNTS[self.mount]

    def _derivs(self, t: float, order: int) -> np.ndarray:
        if self.kind == "static":
            return self.start.copy() if order == 0 else np.zeros(3)
        if self.kind == "linear":
            if order == 0:
                return self.start + self.velocity * t
            return self.velocity.copy() if order == 1 else np.zeros(3)
        if self.kind == "waypoint":
            return np.asarray(self._spline(t, order), dtype=float)
        return np.array([float(f(t)) for f in self._funcs[order]])

    def position(self, t: float) -> np.ndarray:
        return self._derivs(t, 0)

    def inertial_velocity(self, t: float) -> np.ndarray:
        return self._derivs(t, 1)

    def inertial_acceleration(self, t: float) -> np.ndarray:
        return self._derivs(t, 2)

    def heading(self, t: float) -> Tuple[float, float]:
        """Yaw angle and yaw rate of the horizontal velocity."""
        vel = self.inertial_velocity(t)
        acc = self.inertial_acceleration(t)
        sp2 = vel[0] ** 2 + vel[1] ** 2
        if sp2 < 1e-12:
            return self.yaw, 0.0
        return math.atan2(vel[1], vel[0]), (vel[0] * acc[1] - vel[1] * acc[0]) / sp2

    def rotation(self, t: float) -> np.ndarray:
        if self.orientation == "fixed":
            return self._R_fixed.copy()
        psi, _ = self.heading(t)
        return rot_z(psi) @ MOUNTS[self.mount]


def _compile_expression(expr) -> List[List[Callable]]:
    import sympy as sp

    if expr is None or len(expr) != 3:
        raise ValueError("expression trajectory needs three formulas in t")
    t = sp.Symbol("t", real=True)
    funcs: List[List[Callable]] = [[], [], []]
    for e in expr:
        f = sp.sympify(e, locals={"t": t})
        extra = f.free_symbols - {t}
        if extra:
            raise ValueError(f"expression {e!r} uses unknown symbols {sorted(map(str, extra))}")
        for order in range(3):
            funcs[order].append(sp.lambdify(t, sp.diff(f, t, order) if order else f, "math"))
    return funcs


def velocities_for_trajectory(traj: Trajectory, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Body-frame ``(v, omega)`` that make the kinematics follow ``traj``."""
    R = traj.rotation(t)
    v = R.T @ traj.inertial_velocity(t)
    if traj.orientation == "fixed":
        return v, np.zeros(3)
    _, psi_dot = traj.heading(t)
    # R = Rz(psi) M  =>  R' = R S(psi_dot M^T e_z)
    omega = psi_dot * MOUNTS[traj.mount].T @ np.array([0.0, 0.0, 1.0])
    return v, omega


def initial_state(agent_id: int, kind: str, traj: Trajectory, radius: float = 0.25,
                  name: str = "") -> AgentState:
    R0 = traj.rotation(0.0)
    v, w = velocities_for_trajectory(traj, 0.0)
    return AgentState(agent_id, kind, Pose.from_inertial(R0, traj.position(0.0)), v, w,
                      radius, name)


def make_scenario_agents(config) -> List[AgentState]:
    """Initial true states for every agent of a scenario, ordered by id."""
    specs = list(config.agents)
    n_l = sum(1 for a in specs if a.kind == LANDMARK)
    if n_l < 3:
        raise ValueError(f"landmark assumption violated: at least three landmark agents are required (got {n_l})")
    out = []
    for k, a in enumerate(specs, start=1):
        if a.kind not in (LANDMARK, VEHICLE):
            raise ValueError(f"agent {a.name!r}: unknown kind {a.kind!r}")
        out.append(initial_state(k, a.kind, a.trajectory, a.radius, a.name))
    return out


def min_pairwise_distance(states: Sequence[AgentState]) -> float:
    P = np.array([s.inertial for s in states])
    if len(P) < 2:
        return math.inf
    d = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    d[np.diag_indices(len(P))] = np.inf
    return float(d.min())


def inertial_rate(state: AgentState) -> np.ndarray:
    """``pbar' = R v`` for a state."""
    return state.pose.R @ state.v


__all__ = [
    "AgentState", "Pose", "Trajectory", "propagate", "velocities_for_trajectory",
    "make_scenario_agents", "initial_state", "min_pairwise_distance", "rk4_position",
    "LANDMARK", "VEHICLE", "CAMERA_FORWARD",
]
