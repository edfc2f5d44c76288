"""SO(3)/SE(3) helpers.

Tangent vectors of SE(3) are ordered ``[phi, rho]``: rotation first, then
translation. Poses are perturbed on the right, ``T <- T @ exp(delta)``.
Every function accepts arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# sin(x)/x style terms switch to Taylor series below this angle
SMALL_ANGLE = 1e-8
# Jacobian coefficients lose precision through cancellation much earlier
_SERIES_ANGLE = 1e-2
# log is refused this close to pi
PI_MARGIN = 1e-6


class NearPiRotation(ValueError):
    """Rotation angle too close to pi for a stable principal logarithm."""


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _angle(phi):
    return np.sqrt(np.sum(phi * phi, axis=-1))


def _coeffs_exp(theta):
    """sin(t)/t and (1-cos t)/t^2 with a series below SMALL_ANGLE."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    return a, b


def _coeff_c(theta):
    """(t - sin t)/t^3."""
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    series = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    return np.where(small, series, (t - np.sin(t)) / (t * t * t))


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    a, b = _coeffs_exp(theta)
    k = skew(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    w = vee(R - np.swapaxes(R, -1, -2))  # 2 sin(theta) * axis
    s = 0.5 * _angle(w)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta > np.pi - PI_MARGIN):
        raise NearPiRotation(f"rotation angle {float(np.max(theta)):.9f} too close to pi")
    small = theta < SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    scale = np.where(small, 0.5 + theta * theta / 12.0, 0.5 * theta / safe_s)
    return scale[..., None] * w


def so3_right_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    _, b = _coeffs_exp(theta)
    small = theta < _SERIES_ANGLE
    # b needs the longer series too when used inside a Jacobian
    t2 = theta * theta
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, b)
    c = _coeff_c(theta)
    k = skew(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye - b[..., None, None] * k + c[..., None, None] * (k @ k)


def so3_left_jacobian(phi):
    return so3_right_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    d = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        1.0 / (t * t) - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
    )
    k = skew(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + 0.5 * k + d[..., None, None] * (k @ k)


def so3_left_jacobian_inv(phi):
    return so3_right_jacobian_inv(-np.asarray(phi, dtype=float))


def _q_matrix(phi, rho):
    """Off-diagonal block of the SE(3) left Jacobian."""
    theta = _angle(phi)
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    c1 = _coeff_c(theta)
    c2 = np.where(
        small,
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
        (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
    )
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    return (
        0.5 * Rh
        + c1[..., None, None] * (PR + RP + PRP)
        + c2[..., None, None] * (PP @ Rh + RP @ P - 3.0 * PRP)
        + c3[..., None, None] * (PRP @ P + PP @ Rh @ P)
    )


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    J = so3_left_jacobian(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = _q_matrix(phi, rho)
    return out


def se3_right_jacobian(xi):
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    Ji = so3_left_jacobian_inv(phi)
    Q = _q_matrix(phi, rho)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., 3:, :3] = -Ji @ Q @ Ji
    return out


def se3_right_jacobian_inv(xi):
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_exp(xi):
    """Return ``(R, t)`` for tangent vector(s) ``[phi, rho]``."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    R = so3_exp(phi)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return R, t


def se3_log(R, t):
    phi = so3_log(R)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), np.asarray(t, dtype=float))
    return np.concatenate([phi, rho], axis=-1)


def se3_adjoint(R, t):
    R = np.asarray(R, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = skew(t) @ R
    return out


def compose(R1, t1, R2, t2):
    R = R1 @ R2
    t = np.einsum("...ij,...j->...i", R1, t2) + t1
    return R, t


def inverse(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


def rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.zeros(np.shape(yaw) + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(u @ vt))
    u[..., :, -1] *= np.asarray(d)[..., None]
    return u @ vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform stored as rotation matrix plus translation (m)."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def __matmul__(self, other: "Pose") -> "Pose":
        R, t = compose(self.rotation, self.translation, other.rotation, other.translation)
        return Pose(R, t)

    def inverse(self) -> "Pose":
        return Pose(*inverse(self.rotation, self.translation))

    def act(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def retract(self, delta) -> "Pose":
        return self @ exp_se3(delta)

    def adjoint(self) -> np.ndarray:
        return se3_adjoint(self.rotation, self.translation)

    def orthonormalized(self) -> "Pose":
        return Pose(orthonormalize(self.rotation), self.translation.copy())


def exp_se3(xi, dt: float = 1.0) -> Pose:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return Pose(*se3_exp(np.asarray(xi, dtype=float) * dt))


def log_se3(T: Pose) -> np.ndarray:
    return se3_log(T.rotation, T.translation)
