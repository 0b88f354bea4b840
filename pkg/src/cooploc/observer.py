"""Per-vehicle Riccati observer for pose from bearings, velocities and neighbour estimates.

State and error coordinates
---------------------------
Each vehicle carries ``(R_hat, p_hat)``, with ``p_hat`` in its estimated body
frame, and a 6x6 Riccati matrix ``P`` over the error ``x = (2 lambda, p - p_hat)``
where ``lambda`` is the vector part of the quaternion of ``R_hat^T R``.

For each sensed neighbour ``j`` with bearing ``g`` and communicated estimate
``(R_j, p_j)``::

    r_j  = R_hat^T R_j p_j
    y_j  = Pi_g r_j                  (output)
    C1_j = -Pi_g S(r_j),  C2_j = Pi_g
    e    = y - C2 p_hat              (innovation)
    K    = k P C^T Q
    w_hat = w + K[:3] e,   v_hat = v + K[3:] e
    P'   = A P + P A^T - P C^T Q C P + V,   A = blkdiag(-S(w), -S(w))

Discretisation
--------------
:func:`observer_step` first predicts the pose over ``dt`` with the measured
velocities, then builds the output at the predicted pose (so the bearings and
neighbour estimates refer to the same instant as the estimate), integrates
``P`` with sub-stepped RK4, and applies the velocity correction. With
``correction="zoh"`` the correction is the exact solution over ``dt`` of the
linearised correction flow ``d' = K (e - C d)`` for a held innovation, which
stays stable for the large gains used in the hardware-scale scenarios;
``correction="euler"`` applies ``dt K e`` literally.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .geom3 import (exp_so3, integrate_rotation, orthonormalize, quat_from_rotation,
                    rotation_angle, skew)
from .sensing import BearingMeasurement, EstimateMessage
from .world import AgentState, rk4_position

log = logging.getLogger(__name__)

PD_FLOOR = 1e-12
_I3 = np.eye(3)
MAX_RICCATI_SUBSTEPS = 20000
COURANT = 1.0
MAX_SUBSTEP_CORRECTION = 0.05  # norm of (rotation rad, position m) applied per sub-step

MatrixLike = Union[np.ndarray, Callable[[float], np.ndarray]]


class ObserverError(RuntimeError):
    pass


def _is_spd(M: np.ndarray) -> bool:
    if not np.allclose(M, M.T, atol=1e-12):
        return False
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return bool(np.linalg.eigvalsh(M)[0] > 0)


@dataclass(frozen=True)
class ObserverGains:
    k: float = 1.0
    q: Union[float, Mapping[int, float]] = 10.0
    V: np.ndarray = field(default_factory=lambda: np.diag([0.1] * 3 + [1.0] * 3))
    P0: np.ndarray = field(default_factory=lambda: np.diag([1.0] * 3 + [100.0] * 3))

    def __post_init__(self):
        object.__setattr__(self, "V", np.asarray(self.V, dtype=float))
        object.__setattr__(self, "P0", np.asarray(self.P0, dtype=float))
        if not self.k > 0.5:
            raise ValueError(f"gain k must exceed 0.5 (got {self.k})")
        weights = self.q.values() if isinstance(self.q, Mapping) else [self.q]
        for w in weights:
            if not w > 0:
                raise ValueError(f"q_ij > 0 positive weights required (got {w})")
        for name in ("V", "P0"):
            M = getattr(self, name)
            if M.shape != (6, 6) or not _is_spd(M):
                raise ValueError(f"{name} must be a 6x6 symmetric positive definite matrix")

    def weight(self, j: int) -> float:
        if isinstance(self.q, Mapping):
            try:
                return float(self.q[j])
            except KeyError:
                raise ObserverError(f"no weight q for neighbour {j}") from None
        return float(self.q)

    def Q(self, row_map: Sequence[int]) -> np.ndarray:
        return np.diag(self.q_rows(row_map))

    def q_rows(self, row_map: Sequence[int]) -> np.ndarray:
        """Diagonal of ``Q`` for a stacked output (three rows per neighbour)."""
        if not isinstance(self.q, Mapping):
            return np.full(3 * len(row_map), float(self.q))
        return np.repeat([self.weight(j) for j in row_map], 3)


@dataclass(frozen=True)
class ObserverState:
    agent_id: int
    neighbors: Tuple[int, ...]
    R_hat: np.ndarray
    p_hat: np.ndarray
    P: np.ndarray
    gains: ObserverGains
    time: float = 0.0

    @property
    def inertial(self) -> np.ndarray:
        return self.R_hat @ self.p_hat

    def message(self, path=None) -> EstimateMessage:
        return EstimateMessage.trusted(self.agent_id, self.R_hat, self.p_hat, self.time, path)

    @classmethod
    def initial(cls, agent_id: int, neighbors: Sequence[int], R_hat: np.ndarray,
                pbar_hat, gains: ObserverGains) -> "ObserverState":
        R_hat = np.asarray(R_hat, dtype=float)
        return cls(agent_id, tuple(neighbors), R_hat, R_hat.T @ np.asarray(pbar_hat, dtype=float),
                   gains.P0.copy(), gains)


@dataclass
class MeasurementModel:
    y: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    row_map: Tuple[int, ...]
    D: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return len(self.row_map)

    @property
    def C(self) -> np.ndarray:
        return np.concatenate((self.C1, self.C2), axis=1)

    def innovation(self, p_hat: np.ndarray) -> np.ndarray:
        return self.y - self.C2 @ p_hat


# r @ _NEG_SKEW gives -S(r) flattened row-major
_NEG_SKEW = -np.array([[0, 0, 0, 0, 0, -1, 0, 1, 0],
                       [0, 0, 1, 0, 0, 0, -1, 0, 0],
                       [0, -1, 0, 1, 0, 0, 0, 0, 0]], dtype=float)


def stack_output(RiT: np.ndarray, G: np.ndarray, PJ: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(y, C1, C2)`` for bearings ``G`` (rows) and neighbour positions ``PJ`` (rows).

    With ``r = RiT pj``: ``y = Pi_g r``, ``C1 = -Pi_g S(r)``, ``C2 = Pi_g``.
    """
    m = len(G)
    R = PJ @ RiT.T
    Pi = _I3 - G[:, :, None] * G[:, None, :]
    C1 = Pi @ (R @ _NEG_SKEW).reshape(m, 3, 3)
    y = (Pi @ R[:, :, None]).reshape(3 * m)
    return y, C1.reshape(3 * m, 3), Pi.reshape(3 * m, 3)


def _gather(state: ObserverState, bearings: Sequence[BearingMeasurement],
            neighbor_estimates: Mapping[int, EstimateMessage]):
    # bearings as rows of G, neighbour inertial estimates as rows of PJ
    m = len(bearings)
    G = np.empty((m, 3))
    PJ = np.empty((m, 3))
    rows = []
    paths = []
    for k, b in enumerate(bearings):
        if b.observer != state.agent_id:
            raise ObserverError(f"vehicle {state.agent_id} got a bearing sensed by {b.observer}")
        if b.target not in state.neighbors:
            raise ObserverError(f"vehicle {state.agent_id}: {b.target} is not a declared neighbour")
        msg = neighbor_estimates.get(b.target)
        if msg is None:
            raise ObserverError(f"vehicle {state.agent_id}: missing estimate of neighbour {b.target}")
        if np.shape(b.g) != (3,):
            raise ObserverError("bearing must be a 3-vector")
        G[k] = b.g
        PJ[k] = msg.R_hat @ msg.p_hat
        rows.append(b.target)
        paths.append(msg.path)
    return G, PJ, tuple(rows), paths


def assemble_measurement(state: ObserverState, bearings: Sequence[BearingMeasurement],
                         neighbor_estimates: Mapping[int, EstimateMessage],
                         truth_inertial: Optional[Mapping[int, np.ndarray]] = None,
                         ) -> MeasurementModel:
    """Stack ``y``, ``C1``, ``C2`` in bearing order.

    ``truth_inertial`` (true inertial neighbour positions) is only for
    analysis; when given, ``D`` is filled with ``Pi_g R_hat^T (pbar_j - R_j p_j)``.
    """
    m = len(bearings)
    if m == 0:
        e = np.zeros((0, 3))
        return MeasurementModel(np.zeros(0), e, e.copy(), (), np.zeros(0) if truth_inertial is not None else None)
    G, PJ, rows, _ = _gather(state, bearings, neighbor_estimates)
    RiT = state.R_hat.T
    y, C1, C2 = stack_output(RiT, G, PJ)
    D = None
    if truth_inertial is not None:
        diff = np.array([np.asarray(truth_inertial[j], dtype=float) for j in rows]) - PJ
        D = np.concatenate([C2[3 * k:3 * k + 3] @ (RiT @ diff[k]) for k in range(m)])
    return MeasurementModel(y, C1, C2, rows, D)


def system_matrix(omega) -> np.ndarray:
    """``blkdiag(-S(w), -S(w))``."""
    A = np.zeros((6, 6))
    Sw = skew(omega)
    A[:3, :3] = -Sw
    A[3:, 3:] = -Sw
    return A


def _at(X: MatrixLike, t: float) -> np.ndarray:
    return X(t) if callable(X) else X


def riccati_rhs(P: np.ndarray, A: np.ndarray, C: np.ndarray, Q: np.ndarray, V: np.ndarray) -> np.ndarray:
    if C.shape[0] == 0:
        return A @ P + P @ A.T + V
    return _rhs_info(P, A, C.T @ Q @ C, V)


def _rhs_info(P: np.ndarray, A: np.ndarray, M: np.ndarray, V: np.ndarray) -> np.ndarray:
    if A is None:
        return V - P @ M @ P
    AP = A @ P
    return AP + AP.T - P @ M @ P + V


def _guard_pd(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)):
        raise ObserverError("Riccati solution became non-finite")
    try:
        np.linalg.cholesky(P)
        return P
    except np.linalg.LinAlgError:
        pass
    lo = float(np.linalg.eigvalsh(P)[0])
    if lo < PD_FLOOR:
        log.warning("Riccati matrix lost positive definiteness (min eig %.3e); clamping", lo)
        P = P + (PD_FLOOR - lo) * np.eye(P.shape[0])
    return P


def riccati_step(P: np.ndarray, A: MatrixLike, C: MatrixLike, Q: MatrixLike, V: MatrixLike,
                 dt: float, t: float = 0.0) -> np.ndarray:
    """One classical RK4 step of the Riccati equation, then symmetrisation.

    Any of ``A, C, Q, V`` may be a callable of time; it is then sampled at
    ``t``, ``t + dt/2`` and ``t + dt``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    h = 0.5 * dt
    f = lambda X, s: riccati_rhs(X, _at(A, s), _at(C, s), _at(Q, s), _at(V, s))
    k1 = f(P, t)
    k2 = f(P + h * k1, t + h)
    k3 = f(P + h * k2, t + h)
    k4 = f(P + dt * k3, t + dt)
    return _guard_pd(P + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def _rk4_info(P, A, M, V, dt):
    h = 0.5 * dt
    k1 = _rhs_info(P, A, M, V)
    k2 = _rhs_info(P + h * k1, A, M, V)
    k3 = _rhs_info(P + h * k2, A, M, V)
    k4 = _rhs_info(P + dt * k3, A, M, V)
    P = P + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    P = 0.5 * (P + P.T)
    if not np.isfinite(P).all():
        raise ObserverError("Riccati solution became non-finite")
    return P


def _whitened(P: np.ndarray, M: np.ndarray):
    """``(L, lam, U)`` with ``P = L L^T`` and ``L^T M L = U diag(lam) U^T``.

    ``P M = L U diag(lam) U^T L^-1``, so ``lam`` are the (real, non-negative)
    eigenvalues of ``P M``.
    """
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(_guard_pd(P))
    lam, U = np.linalg.eigh(L.T @ M @ L)
    return L, np.maximum(lam, 0.0), U


def stiffness(P: np.ndarray, C: np.ndarray, Q: np.ndarray) -> float:
    """Largest eigenvalue of ``P C^T Q C``."""
    if C.shape[0] == 0:
        return 0.0
    return float(_whitened(P, C.T @ Q @ C)[1][-1])


def integrate_riccati(P: np.ndarray, A: np.ndarray, C: np.ndarray, Q: np.ndarray, V: np.ndarray,
                      dt: float, courant: float = 0.5) -> Tuple[np.ndarray, int]:
    """Integrate the Riccati equation over ``dt`` with enough RK4 sub-steps.

    The quadratic term relaxes at rate up to ``2 lambda_max(P C^T Q C)``;
    sub-steps keep ``h * (lambda_max + |A|) <= courant``. Returns ``(P, n)``.
    """
    M = C.T @ Q @ C if C.shape[0] else np.zeros((6, 6))
    rate = float(_whitened(P, M)[1][-1]) + float(np.abs(A).max())
    n = min(MAX_RICCATI_SUBSTEPS, max(1, math.ceil(dt * rate / courant)))
    h = dt / n
    for _ in range(n):
        P = _rk4_info(P, A, M, V, h)
    return _guard_pd(P), n


def gain(P: np.ndarray, C: np.ndarray, Q: np.ndarray, k: float) -> Tuple[np.ndarray, np.ndarray]:
    """``K = k P C^T Q`` split into orientation (top) and position (bottom) rows."""
    if not k > 0.5:
        raise ValueError("gain k must exceed 0.5")
    if P.shape != (6, 6) or C.shape[1:] != (6,) or Q.shape != (C.shape[0], C.shape[0]):
        raise ValueError(f"dimension mismatch: P{P.shape}, C{C.shape}, Q{Q.shape}")
    K = k * (P @ C.T @ Q)
    return K[:3], K[3:]


@dataclass
class StepInfo:
    innovation: np.ndarray
    omega_hat: np.ndarray
    v_hat: np.ndarray
    model: MeasurementModel
    riccati_substeps: int
    path: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def innovation_norm(self) -> float:
        return math.sqrt(float(self.innovation @ self.innovation))


def predict(state: ObserverState, v_meas, w_meas, dt: float) -> ObserverState:
    """Propagate the estimate with measured velocities only."""
    v_meas = np.asarray(v_meas, dtype=float)
    w_meas = np.asarray(w_meas, dtype=float)
    R = integrate_rotation(state.R_hat, w_meas, dt)
    p = rk4_position(state.p_hat, v_meas, w_meas, dt)
    return ObserverState(state.agent_id, state.neighbors, R, p, state.P, state.gains, state.time + dt)


def _phi1(x: np.ndarray) -> np.ndarray:
    out = np.ones_like(x)
    nz = np.abs(x) > 1e-12
    out[nz] = np.expm1(x[nz]) / x[nz]
    return out


def _zoh_delta(L, lam, U, CtQe, k, dt):
    # K C = k L U diag(lam) U^T L^-1 and K e = k L L^T C^T Q e
    z = U.T @ (L.T @ CtQe)
    return (k * dt) * (L @ (U @ (_phi1(-k * dt * lam) * z)))


def correction(P: np.ndarray, C: np.ndarray, Q: np.ndarray, k: float, e: np.ndarray,
               dt: float, mode: str = "zoh") -> np.ndarray:
    """Accumulated correction ``int_0^dt (w_hat - w, v_hat - v) ds`` (a 6-vector).

    ``zoh`` solves ``d' = K (e - C d)`` exactly over ``dt`` for the held
    innovation ``e`` and gain ``K = k P C^T Q``: ``d = dt phi1(-K C dt) K e`` with
    ``phi1(x) = (e^x - 1)/x``. ``euler`` returns ``dt K e``.
    """
    if e.size == 0:
        return np.zeros(6)
    if mode == "euler":
        return dt * (k * (P @ (C.T @ (Q @ e))))
    if mode != "zoh":
        raise ValueError(f"unknown correction mode {mode!r}")
    L, lam, U = _whitened(P, C.T @ Q @ C)
    return _zoh_delta(L, lam, U, C.T @ (Q @ e), k, dt)


def _path_sampler(PJ: np.ndarray, paths):
    """Neighbour positions as a function of the step fraction, or ``None`` if all are fixed."""
    live = [k for k, pth in enumerate(paths) if pth is not None and len(pth[0]) > 1]
    if not live:
        return None

    def at(f: float) -> np.ndarray:
        out = PJ.copy()
        for k in live:
            fr, X = paths[k]
            s = int(np.searchsorted(fr, f, side="right")) - 1
            s = min(max(s, 0), len(fr) - 2)
            w = (f - fr[s]) / (fr[s + 1] - fr[s])
            out[k] = X[s] + w * (X[s + 1] - X[s])
        return out
    return at


def observer_step(state: ObserverState, v_meas, w_meas, bearings: Sequence[BearingMeasurement],
                  neighbor_estimates: Mapping[int, EstimateMessage], dt: float,
                  correction_mode: str = "zoh", courant: float = COURANT) -> Tuple[ObserverState, StepInfo]:
    """Advance one vehicle's observer by ``dt``.

    Reads only the vehicle's own state and velocity measurements, the bearings
    it sensed at the end of the interval and the estimates its neighbours
    communicated. With no bearings this is pure dead reckoning.

    After the prediction the correction flow (``P`` together with the
    velocity corrections) is integrated over ``dt`` in ``n`` equal sub-steps,
    re-linearising the output at every sub-step. ``n`` keeps
    ``h * (2 lambda_max(P C^T Q C) + |A|) <= courant`` for the Riccati flow and
    splits the correction the full step would apply into pieces no larger than
    ``MAX_SUBSTEP_CORRECTION``. It is small once ``P`` has settled, and large
    only during the first transient.

    A neighbour message carrying a ``path`` is read at the middle of each
    sub-step instead of at its end point, so a vehicle follows its
    neighbours' corrections as they happen within the step. The returned
    info carries this vehicle's own path for its followers.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    w_meas = np.asarray(w_meas, dtype=float)
    v_meas = np.asarray(v_meas, dtype=float)
    gains = state.gains
    pred = predict(state, v_meas, w_meas, dt)
    A = system_matrix(w_meas)
    a_max = float(np.abs(A).max())
    A_rk = A if a_max > 0 else None
    sampler = None
    if bearings:
        G, PJ, rows, paths = _gather(pred, bearings, neighbor_estimates)
        model0 = MeasurementModel(*stack_output(pred.R_hat.T, G, PJ), rows)
        sampler = _path_sampler(PJ, paths)
    else:
        model0 = assemble_measurement(pred, bearings, neighbor_estimates)
    e0 = model0.innovation(pred.p_hat)
    qv = gains.q_rows(model0.row_map)
    R_hat, p_hat, P = pred.R_hat, pred.p_hat, state.P
    if correction_mode not in ("zoh", "euler"):
        raise ValueError(f"unknown correction mode {correction_mode!r}")
    total = np.zeros(6)
    model, e = model0, e0
    track = [R_hat @ p_hat]
    n, h = 1, dt
    k = 0
    while k < n:
        C = model.C
        CtQ = C.T * qv
        M = CtQ @ C
        delta = None
        if model.m:
            # the gain is held at its value at the start of each sub-step
            L, lam, U = _whitened(P, M)
            if k == 0:
                full = _zoh_delta(L, lam, U, CtQ @ e, gains.k, dt)
                n_lin = math.sqrt(float(full @ full)) / MAX_SUBSTEP_CORRECTION
                n_ric = dt * (2.0 * float(lam[-1]) + a_max) / courant
                n = min(MAX_RICCATI_SUBSTEPS, max(1, math.ceil(max(n_lin, n_ric))))
                h = dt / n
                if sampler is not None and n > 1:
                    # a single sub-step keeps the end-point linearisation
                    model = MeasurementModel(*stack_output(R_hat.T, G, sampler(0.5 / n)), rows)
                    e = model.innovation(p_hat)
                    C = model.C
                    CtQ = C.T * qv
                    M = CtQ @ C
                    L, lam, U = _whitened(P, M)
            if correction_mode == "zoh":
                delta = _zoh_delta(L, lam, U, CtQ @ e, gains.k, h)
            else:
                delta = h * (gains.k * (P @ (CtQ @ e)))
        elif k == 0:
            n = max(1, math.ceil(dt * a_max / courant))
            h = dt / n
        P = _rk4_info(P, A_rk, M, gains.V, h)
        if delta is not None:
            total += delta
            if delta[:3].any():
                R_hat = orthonormalize(R_hat @ exp_so3(delta[:3]))
            p_hat = p_hat + delta[3:]
        k += 1
        if model.m:
            track.append(R_hat @ p_hat)
        if k < n and model.m:
            pj = PJ if sampler is None else sampler((k + 0.5) / n)
            y, C1, C2 = stack_output(R_hat.T, G, pj)
            model = MeasurementModel(y, C1, C2, model0.row_map)
            e = model.innovation(p_hat)
    P = _guard_pd(P)
    new = ObserverState(pred.agent_id, pred.neighbors, R_hat, p_hat, P, gains, pred.time)
    path = None
    if len(track) > 1:
        path = (np.arange(len(track)) / (len(track) - 1.0), np.array(track))
    info = StepInfo(e0, w_meas + total[:3] / dt, v_meas + total[3:] / dt, model0, n, path)
    return new, info


@dataclass(frozen=True)
class ErrorDiagnostics:
    lam: np.ndarray
    p_tilde: np.ndarray
    pbar_tilde: np.ndarray
    angle: float
    omega_tilde: Optional[np.ndarray] = None

    @property
    def x_tilde(self) -> np.ndarray:
        return np.concatenate([2.0 * self.lam, self.p_tilde])


def diagnostics(state: ObserverState, truth: AgentState,
                omega_hat: Optional[np.ndarray] = None) -> ErrorDiagnostics:
    if state.agent_id != truth.id:
        raise ValueError(f"estimate of {state.agent_id} compared with truth of {truth.id}")
    R_err = state.R_hat.T @ truth.pose.R
    lam = quat_from_rotation(R_err).vector
    p_t = truth.pose.p - state.p_hat
    pbar_t = truth.pose.R @ truth.pose.p - state.R_hat @ state.p_hat
    w_t = None if omega_hat is None else truth.omega - R_err.T @ omega_hat
    return ErrorDiagnostics(lam, p_t, pbar_t, rotation_angle(lam), w_t)


def min_eig(P: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(P)[0])
