"""Bearing measurements, sensor noise and camera visibility.

Sign convention: a bearing ``g_ij`` held by the engine points from the
target ``j`` toward the observer ``i`` and is expressed in ``i``'s body
frame, ``g_ij = (p_i - R_i^T pbar_j) / |p_i - R_i^T pbar_j|``. A camera ray
toward the target is the opposite direction; :func:`bearing_from_camera`
does the flip.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geom3 import is_rotation
from .topology import InteractionGraph, TopologySnapshot, restrict
from .world import AgentState, Pose

log = logging.getLogger(__name__)

COLLOCATION_TOL = 1e-9
DEGENERATE_Z = 1e-6

# substream purposes
VELOCITY_STREAM = 0
BEARING_STREAM = 1
INIT_STREAM = 2


class CollocationError(ValueError):
    pass


class DegenerateBearingError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    h_half_angle: float = math.radians(60.0)
    v_half_angle: float = math.radians(45.0)
    max_range: float = 50.0
    boresight: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    right: Tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("h_half_angle", "v_half_angle"):
            a = getattr(self, name)
            if not 0.0 < a < math.pi / 2:
                raise ValueError(f"camera {name} must lie in (0, pi/2), got {a}")
        if not self.max_range > 0:
            raise ValueError("camera max_range must be positive")
        b = np.asarray(self.boresight, dtype=float)
        r = np.asarray(self.right, dtype=float)
        if abs(np.linalg.norm(b) - 1) > 1e-9 or abs(np.linalg.norm(r) - 1) > 1e-9:
            raise ValueError("camera boresight and right axes must be unit vectors")
        if abs(b @ r) > 1e-9:
            raise ValueError("camera right axis must be orthogonal to the boresight")

    def axes(self) -> np.ndarray:
        """Rows: image x (right), image y (down), optical axis."""
        b = np.asarray(self.boresight, dtype=float)
        r = np.asarray(self.right, dtype=float)
        return np.array([r, np.cross(b, r), b])


@dataclass(frozen=True)
class NoiseConfig:
    sigma_v: float = 0.1
    sigma_omega: float = 0.01
    bearing_bound: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_v, self.sigma_omega, self.bearing_bound) < 0:
            raise ValueError("noise parameters must be non-negative")

    @classmethod
    def off(cls, seed: int = 0) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class BearingMeasurement:
    observer: int
    target: int
    g: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class EstimateMessage:
    """A pose estimate as broadcast by ``sender``.

    ``path`` optionally carries how the sender's inertial position estimate
    moved during its last update: ``(fractions, positions)`` with fractions
    of the step in ``[0, 1]`` and one position row per fraction. Receivers
    stepping in the same interval use it to see the sender's estimate at
    matching instants.
    """
    sender: int
    R_hat: np.ndarray
    p_hat: np.ndarray
    timestamp: float
    path: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        if not is_rotation(self.R_hat, 1e-6):
            raise ValueError(f"estimate from agent {self.sender} carries an invalid rotation")

    @property
    def inertial(self) -> np.ndarray:
        return self.R_hat @ self.p_hat

    @classmethod
    def trusted(cls, sender: int, R_hat: np.ndarray, p_hat: np.ndarray, timestamp: float,
                path: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> "EstimateMessage":
        """Skip the rotation check for estimates already kept on SO(3)."""
        msg = object.__new__(cls)
        for k, v in (("sender", sender), ("R_hat", R_hat), ("p_hat", p_hat), ("timestamp", timestamp),
                     ("path", path)):
            object.__setattr__(msg, k, v)
        return msg


def substream(seed: int, agent: int, purpose: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, agent, purpose)``.

    Philox is keyed by the seed and started at counter ``(0, purpose, 0,
    agent)``; draws only advance the low word, so every agent and purpose
    reads a disjoint block and the draws of one agent never depend on what
    the others consumed or in which order agents were processed.
    """
    if min(seed, agent, purpose) < 0:
        raise ValueError("substream keys must be non-negative")
    bg = np.random.Philox(key=int(seed), counter=[0, int(purpose), 0, int(agent)])
    return np.random.Generator(bg)


class NoiseStreams:
    """One generator per ``(agent, purpose)`` for a whole run.

    Callers draw a fixed number of variates per agent and step, which keeps
    every stream aligned with the step index.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: Dict[Tuple[int, int], np.random.Generator] = {}

    def get(self, agent: int, purpose: int) -> np.random.Generator:
        key = (agent, purpose)
        g = self._gens.get(key)
        if g is None:
            g = self._gens[key] = substream(self.seed, agent, purpose)
        return g


def true_bearing(observer: Pose, target_inertial) -> np.ndarray:
    d = observer.p - observer.R.T @ np.asarray(target_inertial, dtype=float)
    n = math.sqrt(float(d @ d))
    if n < COLLOCATION_TOL:
        raise CollocationError("observer and target are collocated")
    return d / n


def bearing_from_image(px: float, py: float) -> np.ndarray:
    """Unit ray ``[px, py, 1] / |[px, py, 1]|`` through normalized image coordinates."""
    pp = np.array([float(px), float(py), 1.0])
    return pp / math.sqrt(float(pp @ pp))


def bearing_from_camera(px: float, py: float) -> np.ndarray:
    """Image coordinates of a detected target -> engine bearing (target toward observer)."""
    return -bearing_from_image(px, py)


def perturb_bearing(g: np.ndarray, n1: float, n2: float, eps_z: float = DEGENERATE_Z) -> np.ndarray:
    """Image-plane perturbation of a bearing, keeping its hemisphere in z."""
    g3 = float(g[2])
    if abs(g3) <= eps_z:
        raise DegenerateBearingError(f"bearing z-component {g3:.2e} too small for image-plane noise")
    pp = np.array([g[0] / g3 + n1, g[1] / g3 + n2, 1.0])
    return (math.copysign(1.0, g3) / math.sqrt(float(pp @ pp))) * pp


def noisy_bearing(g: np.ndarray, noise: NoiseConfig, rng: np.random.Generator,
                  eps_z: float = DEGENERATE_Z) -> np.ndarray:
    """Bearing corrupted by uniform image-plane noise of half-width ``bearing_bound``."""
    n1, n2 = rng.uniform(-1.0, 1.0, size=2) * noise.bearing_bound
    if noise.bearing_bound == 0.0:
        return np.array(g, dtype=float)
    return perturb_bearing(g, n1, n2, eps_z)


def noisy_velocities(v: np.ndarray, omega: np.ndarray, noise: NoiseConfig,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    z = rng.standard_normal(6)
    return v + noise.sigma_v * z[:3], omega + noise.sigma_omega * z[3:]


def segment_point_distance(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    ab = b - a
    L2 = float(ab @ ab)
    s = 0.0 if L2 == 0.0 else min(max(float((c - a) @ ab) / L2, 0.0), 1.0)
    return float(np.linalg.norm(a + s * ab - c))


def in_field_of_view(observer: AgentState, target_inertial: np.ndarray, cam: CameraModel) -> bool:
    d_body = observer.pose.R.T @ (target_inertial - observer.inertial)
    rng_ = float(np.linalg.norm(d_body))
    if rng_ < COLLOCATION_TOL or rng_ > cam.max_range:
        return False
    x, y, z = cam.axes() @ d_body
    if z <= 0.0:
        return False
    return abs(math.atan2(x, z)) <= cam.h_half_angle and abs(math.atan2(y, z)) <= cam.v_half_angle


def visible(observer: AgentState, target: AgentState, others: Iterable[AgentState],
            cam: CameraModel) -> bool:
    """Target inside the camera frustum and not hidden behind another agent's sphere."""
    a, b = observer.inertial, target.inertial
    if not in_field_of_view(observer, b, cam):
        return False
    for o in others:
        if o.id in (observer.id, target.id):
            continue
        if segment_point_distance(a, b, o.inertial) < o.radius:
            return False
    return True


def sense_all(world: Sequence[AgentState], graph: InteractionGraph, cam: Optional[CameraModel],
              noise: Optional[NoiseConfig], streams: Optional[NoiseStreams], time: float,
              blocked: Optional[Mapping[int, Iterable[int]]] = None,
              ) -> Tuple[TopologySnapshot, List[BearingMeasurement]]:
    """Sense every declared edge that is visible and not scripted-blocked.

    ``cam=None`` disables field-of-view/occlusion gating; ``noise=None`` gives
    exact bearings. Uniform draws are consumed for every declared edge so the
    random stream of a vehicle does not depend on which edges are active.
    """
    if noise is not None and noise.bearing_bound > 0 and streams is None:
        streams = NoiseStreams(noise.seed)
    by_id = {s.id: s for s in world}
    active: Dict[int, List[int]] = {}
    out: List[BearingMeasurement] = []
    blocked = blocked or {}
    for i in graph.vehicle_ids:
        obs = by_id[i]
        nbrs = graph.neighbors_of(i)
        draws = None
        if noise is not None and noise.bearing_bound > 0:
            draws = streams.get(i, BEARING_STREAM).uniform(-1.0, 1.0, size=(len(nbrs), 2))
        skip = set(blocked.get(i, ()))
        act = []
        for k, j in enumerate(nbrs):
            if j in skip:
                continue
            tgt = by_id[j]
            if cam is not None and not visible(obs, tgt, world, cam):
                continue
            try:
                g = true_bearing(obs.pose, tgt.inertial)
            except CollocationError:
                log.warning("t=%.4f: agents %d and %d collocated, bearing dropped", time, i, j)
                continue
            if draws is not None:
                try:
                    g = perturb_bearing(g, *(draws[k] * noise.bearing_bound))
                except DegenerateBearingError:
                    log.warning("t=%.4f: degenerate bearing %d->%d dropped", time, i, j)
                    continue
            act.append(j)
            out.append(BearingMeasurement(i, j, g, time))
        active[i] = act
    return restrict(graph, active, time), out
