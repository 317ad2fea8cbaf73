"""Rotation-matrix utilities: cross-product matrices, exponential and log maps."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometryError

ORTHO_TOL = 1e-12
REPAIR_TOL = 1e-6
_PI_TOL = 1e-9


def skew(w) -> np.ndarray:
    """Cross-product matrix, ``skew(w) @ x == np.cross(w, x)``."""
    w = np.asarray(w, dtype=float)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def skew_batch(w: np.ndarray) -> np.ndarray:
    """Stack of cross-product matrices for an ``(n, 3)`` array."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def exp_so3(rotvec) -> np.ndarray:
    """Rodrigues formula. Series coefficients are used below 1e-6 rad^2."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta2 = float(rotvec @ rotvec)
    if theta2 > 1e-6:
        theta = np.sqrt(theta2)
        k1 = np.sin(theta) / theta
        k2 = (1.0 - np.cos(theta)) / theta2
    else:
        k1 = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        k2 = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    K = skew(rotvec)
    return np.eye(3) + k1 * K + k2 * (K @ K)


def log_so3(R) -> np.ndarray:
    """Principal rotation vector of ``R`` (norm at most pi).

    Angles within 1e-9 rad of pi have no unique sign and raise
    :class:`DegenerateGeometryError`; the axis that would be used there is the
    largest-diagonal column of ``a a^T``, see :func:`near_pi_axis`.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        # sin(theta)/theta ~ 1 - theta^2/6
        return w * (1.0 + theta * theta / 6.0)
    if np.pi - theta <= _PI_TOL:
        raise DegenerateGeometryError(
            f"rotation angle {theta!r} is within {_PI_TOL} of pi; "
            f"axis {near_pi_axis(R)} is defined only up to sign"
        )
    sin_theta = np.sin(theta)
    if np.pi - theta < 1e-3:
        # antisymmetric part loses precision; take the axis from the symmetric part
        axis = near_pi_axis(R)
        axis = axis if axis @ w >= 0.0 else -axis
        return theta * axis
    return w * (theta / sin_theta)


def near_pi_axis(R) -> np.ndarray:
    """Unit rotation axis recovered from the symmetric part of ``R``.

    ``(R + R^T)/2 = c I + (1 - c) a a^T``; the column of ``a a^T`` with the
    largest diagonal element is normalized (lowest index wins a tie). The sign
    of the result is arbitrary.
    """
    R = np.asarray(R, dtype=float)
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    aat = (0.5 * (R + R.T) - c * np.eye(3)) / max(1.0 - c, 1e-300)
    k = int(np.argmax(np.diag(aat)))
    axis = aat[:, k]
    return axis / np.linalg.norm(axis)


def orthonormality_error(R) -> float:
    R = np.asarray(R, dtype=float)
    return float(np.linalg.norm(R @ R.T - np.eye(3)))


def project_to_so3(M) -> np.ndarray:
    """Closest proper rotation in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def as_rotation(M, repair: bool = True) -> np.ndarray:
    """Validate ``M`` as an attitude matrix and return a read-only copy.

    Matrices off by more than 1e-12 but within 1e-6 of orthonormal are
    re-projected when ``repair`` is set; anything else raises ``ValueError``.
    """
    R = np.array(M, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
    err = orthonormality_error(R)
    det = np.linalg.det(R)
    if err > ORTHO_TOL or abs(det - 1.0) > ORTHO_TOL:
        if repair and err <= REPAIR_TOL and det > 0.0:
            R = project_to_so3(R)
        else:
            raise ValueError(
                f"not a proper rotation: |R R^T - I|_F = {err:.3e}, det = {det:.15g}"
            )
    R.flags.writeable = False
    return R


def rotz(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation via a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def euler321(A) -> np.ndarray:
    """Roll, pitch, yaw (rad) of ``A = R1(roll) R2(pitch) R3(yaw)``."""
    A = np.asarray(A, dtype=float)
    pitch = -np.arcsin(np.clip(A[0, 2], -1.0, 1.0))
    roll = np.arctan2(A[1, 2], A[2, 2])
    yaw = np.arctan2(A[0, 1], A[0, 0])
    return np.array([roll, pitch, yaw])


def wrap_angle(a):
    """Map angles to [-pi, pi)."""
    return (np.asarray(a, dtype=float) + np.pi) % (2.0 * np.pi) - np.pi
