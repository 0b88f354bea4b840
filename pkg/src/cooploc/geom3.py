"""Small-dimension geometry: skew maps, projectors, rotations and unit quaternions.

Conventions
-----------
* Vectors are length-3 float arrays, matrices are 3x3 float arrays.
* A rotation ``R`` maps body-frame vectors into the inertial frame.
* Quaternions are ``(scalar, vector)`` pairs with the scalar part kept
  non-negative, so ``vector`` is a single-valued error measure near identity.
* ``R = I + 2 S(v) (s I + S(v))`` relates a quaternion ``(s, v)`` to ``R``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

ORTHO_TOL = 1e-9
UNIT_TOL = 1e-12
PROJECTOR_TOL = 1e-9
QUAT_TOL = 1e-6

_I3 = np.eye(3)


class UnitQuaternion(NamedTuple):
    scalar: float
    vector: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate(([self.scalar], self.vector))


def skew(x) -> np.ndarray:
    """Return ``S(x)`` with ``S(x) @ y == np.cross(x, y)``."""
    x0, x1, x2 = float(x[0]), float(x[1]), float(x[2])
    return np.array([[0.0, -x2, x1],
                     [x2, 0.0, -x0],
                     [-x1, x0, 0.0]])


def unskew(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]]) * 0.5


def projector(y, tol: float = PROJECTOR_TOL) -> np.ndarray:
    """Orthogonal projector ``I - y y^T`` onto the plane normal to unit ``y``."""
    y = np.asarray(y, dtype=float)
    n = np.linalg.norm(y)
    if abs(n - 1.0) > tol:
        raise ValueError(f"projector needs a unit vector, got norm {n:.3e}")
    return _I3 - np.outer(y, y)


def det3(R: np.ndarray) -> float:
    (a, b, c), (d, e, f), (g, h, i) = R.tolist()
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (float(np.abs(R.T @ R - _I3).max()) <= tol
            and abs(det3(R) - 1.0) <= tol)


def orthonormality_error(R: np.ndarray) -> float:
    return float(np.max(np.abs(R.T @ R - _I3)))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Pull a nearly orthonormal matrix back onto SO(3).

    One Newton step of the polar iteration, ``R (3I - R^T R) / 2``; for the
    round-off sized defects produced by a single update this lands on the
    nearest rotation to machine precision. Badly conditioned input falls back
    to the SVD polar factor.
    """
    E = R.T @ R - _I3
    if np.abs(E).max() > 1e-6:
        U, _, Vt = np.linalg.svd(R)
        Q = U @ Vt
        if det3(Q) < 0:
            U[:, -1] = -U[:, -1]
            Q = U @ Vt
        return Q
    return R - 0.5 * (R @ E)


def exp_so3(phi) -> np.ndarray:
    """Closed-form matrix exponential of ``S(phi)`` (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    K = skew(phi)
    if theta2 < 1e-16:
        # second-order Taylor terms are exact to double precision here
        return _I3 + K + 0.5 * (K @ K)
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return _I3 + a * K + b * (K @ K)


def rot_x(angle: float) -> np.ndarray:
    return exp_so3((angle, 0.0, 0.0))


def rot_y(angle: float) -> np.ndarray:
    return exp_so3((0.0, angle, 0.0))


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def integrate_rotation(R: np.ndarray, omega, dt: float) -> np.ndarray:
    """Advance ``R' = R S(omega)`` by ``dt`` with constant body rate ``omega``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    omega = np.asarray(omega, dtype=float)
    if not omega.any():
        return R.copy()
    return orthonormalize(R @ exp_so3(omega * dt))


def error_rotation(R_hat: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Orientation error ``R_hat^T R``."""
    return R_hat.T @ R


def quat_from_rotation(R: np.ndarray) -> UnitQuaternion:
    """Unit quaternion of a rotation matrix, scalar part non-negative."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    # Shepperd: branch on the largest of (w, x, y, z) squared for stability
    cands = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(cands))
    if k == 0:
        r = math.sqrt(1.0 + tr)
        w = 0.5 * r
        f = 0.5 / r
        v = np.array([(R[2, 1] - R[1, 2]) * f,
                      (R[0, 2] - R[2, 0]) * f,
                      (R[1, 0] - R[0, 1]) * f])
    else:
        i = k - 1
        j, l = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[l, l], 0.0))
        f = 0.5 / r
        v = np.empty(3)
        v[i] = 0.5 * r
        v[j] = (R[j, i] + R[i, j]) * f
        v[l] = (R[l, i] + R[i, l]) * f
        w = (R[l, j] - R[j, l]) * f
    if w < 0.0:
        w, v = -w, -v
    n = math.sqrt(w * w + float(v @ v))
    return UnitQuaternion(w / n, v / n)


def rotation_from_quat(q, tol: float = QUAT_TOL) -> np.ndarray:
    """Rotation matrix ``I + 2 S(v)(s I + S(v))`` of a unit quaternion ``(s, v)``."""
    s, v = float(q[0]), np.asarray(q[1], dtype=float)
    n = math.sqrt(s * s + float(v @ v))
    if abs(n - 1.0) > tol:
        raise ValueError(f"quaternion is not unit norm (|q| = {n:.9f})")
    s, v = s / n, v / n
    Sv = skew(v)
    return _I3 + 2.0 * Sv @ (s * _I3 + Sv)


def quat_from_array(q) -> UnitQuaternion:
    """Build a quaternion from ``[w, x, y, z]``."""
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError("quaternion array must have 4 entries [w, x, y, z]")
    return UnitQuaternion(float(q[0]), q[1:].copy())


def rotation_angle(lam) -> float:
    """Geodesic angle ``2 asin(|lambda|)`` from a quaternion vector part."""
    lam = np.asarray(lam, dtype=float)
    return 2.0 * math.asin(min(math.sqrt(float(lam @ lam)), 1.0))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return rotation_from_quat((q[0], q[1:]))


def random_unit(rng: np.random.Generator) -> np.ndarray:
    g = rng.normal(size=3)
    return g / np.linalg.norm(g)
