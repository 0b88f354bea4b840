"""Observability Gramians for the linearised pose-error system ``(A, C*)``.

``C*`` is the output matrix evaluated at the true poses. The Gramian over a
window is

    W = int_{t0}^{t1} Phi(s, t0)^T C(s)^T C(s) Phi(s, t0) ds,   Phi' = A Phi,

and a window counts as observable when ``lambda_min(W)`` reaches a threshold.
This is a diagnostic only; the observer never consults it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np

from .observer import stack_output
from .sensing import COLLOCATION_TOL, CollocationError
from .world import AgentState

DEFAULT_THRESHOLD = 1e-6
DEFAULT_WINDOW = 0.5

Schedule = Union[Callable[[float], np.ndarray], Sequence[np.ndarray]]


@dataclass(frozen=True)
class ObservabilityReport:
    window: Tuple[float, float]
    gramian: np.ndarray
    min_eigenvalue: float
    observable: bool


def ideal_output_matrix(truth: AgentState, neighbor_inertial: Sequence[np.ndarray]) -> np.ndarray:
    """Stack ``[-Pi_g S(R^T pbar_j), Pi_g]`` at the true pose with true bearings."""
    m = len(neighbor_inertial)
    if m == 0:
        return np.zeros((0, 6))
    PJ = np.asarray(neighbor_inertial, dtype=float).reshape(m, 3)
    RT = truth.pose.R.T
    D = truth.pose.p - PJ @ RT.T
    n = np.sqrt((D * D).sum(axis=1))
    if n.min() < COLLOCATION_TOL:
        raise CollocationError("observer and neighbour are collocated")
    _, C1, C2 = stack_output(RT, D / n[:, None], PJ)
    return np.hstack([C1, C2])


def _gramian_rhs(Phi, A, M):
    return A @ Phi, Phi.T @ M @ Phi


def _rk4(Phi, W, A0, A1, A2, M0, M1, M2, h):
    # (Phi, W) augmented system; A*/M* sampled at start, middle, end of the step
    k1p, k1w = _gramian_rhs(Phi, A0, M0)
    k2p, k2w = _gramian_rhs(Phi + 0.5 * h * k1p, A1, M1)
    k3p, k3w = _gramian_rhs(Phi + 0.5 * h * k2p, A1, M1)
    k4p, k4w = _gramian_rhs(Phi + h * k3p, A2, M2)
    Phi = Phi + (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
    W = W + (h / 6.0) * (k1w + 2 * k2w + 2 * k3w + k4w)
    return Phi, W


def _finite(X: np.ndarray, what: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"non-finite {what} schedule")
    return X


def _report(W: np.ndarray, window, threshold: float) -> ObservabilityReport:
    W = 0.5 * (W + W.T)
    lo = float(np.linalg.eigvalsh(W)[0])
    return ObservabilityReport(window, W, lo, lo >= threshold)


def observability_gramian(A_schedule: Schedule, C_schedule: Schedule, window: Tuple[float, float],
                          dt: float, threshold: float = DEFAULT_THRESHOLD) -> ObservabilityReport:
    """RK4 Gramian of ``(A, C)`` over ``window`` with step ``dt``.

    Schedules are either callables of time or sequences with one matrix per
    step, held constant over that step (the form simcore records).
    """
    t0, t1 = map(float, window)
    if not t1 > t0:
        raise ValueError("window must satisfy t1 > t0")
    if not dt > 0:
        raise ValueError("dt must be positive")
    seq = not callable(A_schedule)
    if seq != (not callable(C_schedule)):
        raise ValueError("A and C schedules must both be callables or both be sequences")
    Phi = np.eye(6)
    W = np.zeros((6, 6))
    if seq:
        if len(A_schedule) != len(C_schedule):
            raise ValueError("A and C schedules differ in length")
        for A, C in zip(A_schedule, C_schedule):
            A = _finite(A, "A")
            C = _finite(C, "C")
            M = C.T @ C
            Phi, W = _rk4(Phi, W, A, A, A, M, M, M, dt)
        return _report(W, (t0, t1), threshold)

    n = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
    h = (t1 - t0) / n

    def at(t):
        C = _finite(C_schedule(t), "C")
        return _finite(A_schedule(t), "A"), C.T @ C

    A0, M0 = at(t0)
    for k in range(n):
        t = t0 + k * h
        A1, M1 = at(t + 0.5 * h)
        A2, M2 = at(t + h)
        Phi, W = _rk4(Phi, W, A0, A1, A2, M0, M1, M2, h)
        A0, M0 = A2, M2
    return _report(W, (t0, t1), threshold)


def gramian_batch(A: np.ndarray, M: np.ndarray, dt: float) -> np.ndarray:
    """Gramians of several systems at once.

    ``A`` and ``M = C^T C`` have shape ``(systems, steps, 6, 6)``, each held
    over its step. Equivalent to :func:`observability_gramian` per system.
    """
    A = _finite(A, "A")
    M = _finite(M, "M")
    b, n = A.shape[:2]
    Phi = np.broadcast_to(np.eye(6), (b, 6, 6)).copy()
    W = np.zeros((b, 6, 6))
    h = dt
    for s in range(n):
        a, m = A[:, s], M[:, s]
        k1p = a @ Phi
        k2p = a @ (Phi + 0.5 * h * k1p)
        k3p = a @ (Phi + 0.5 * h * k2p)
        P2 = Phi + 0.5 * h * k1p
        P3 = Phi + 0.5 * h * k2p
        P4 = Phi + h * k3p
        k4p = a @ P4
        tr = lambda X: X.transpose(0, 2, 1) @ m @ X
        W = W + (h / 6.0) * (tr(Phi) + 2 * tr(P2) + 2 * tr(P3) + tr(P4))
        Phi = Phi + (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
    return 0.5 * (W + W.transpose(0, 2, 1))


def windowed_reports(A_steps: Sequence[np.ndarray], C_steps: Sequence[np.ndarray], t0: float,
                     dt: float, window: float = DEFAULT_WINDOW,
                     threshold: float = DEFAULT_THRESHOLD) -> List[ObservabilityReport]:
    """Gramians over consecutive tiles of ``window`` seconds (the last may be shorter)."""
    per = max(1, int(round(window / dt)))
    out = []
    for s in range(0, len(A_steps), per):
        A = A_steps[s:s + per]
        C = C_steps[s:s + per]
        out.append(observability_gramian(A, C, (t0 + s * dt, t0 + (s + len(A)) * dt), dt, threshold))
    return out


__all__ = ["ObservabilityReport", "ideal_output_matrix", "observability_gramian", "gramian_batch",
           "windowed_reports", "CollocationError"]
