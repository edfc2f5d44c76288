"""On-manifold IMU preintegration between keyframes.

Samples are discrete: each one holds a specific force and an angular rate
that stay constant over its own ``dt``. The white-noise sigmas are the
per-sample standard deviations the simulator adds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..lie import skew, so3_exp, so3_log, so3_right_jacobian, so3_right_jacobian_inv
from ..sim.config import GRAVITY

GRAVITY_VECTOR = np.array([0.0, 0.0, -GRAVITY])


class EmptyInterval(ValueError):
    pass


@dataclass
class PreintegratedImu:
    dt: float
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    bias: np.ndarray  # (6,) [b_a, b_g] linearization point
    cov: np.ndarray  # (9,9) over [phi, v, p]
    J_R_bg: np.ndarray
    J_v_ba: np.ndarray
    J_v_bg: np.ndarray
    J_p_ba: np.ndarray
    J_p_bg: np.ndarray

    def corrected(self, bias):
        """First-order bias update of the preintegrated deltas."""
        d = np.asarray(bias, dtype=float) - self.bias
        dba, dbg = d[:3], d[3:]
        dR = self.dR @ so3_exp(self.J_R_bg @ dbg)
        dv = self.dv + self.J_v_ba @ dba + self.J_v_bg @ dbg
        dp = self.dp + self.J_p_ba @ dba + self.J_p_bg @ dbg
        return dR, dv, dp

    def predict(self, R, p, v, bias):
        """State at the end of the interval from the state at its start."""
        dR, dv, dp = self.corrected(bias)
        t = self.dt
        return R @ dR, p + v * t + 0.5 * GRAVITY_VECTOR * t * t + R @ dp, v + GRAVITY_VECTOR * t + R @ dv


def preintegrate(accel, gyro, dt, bias, accel_sigma: float, gyro_sigma: float) -> PreintegratedImu:
    accel = np.atleast_2d(np.asarray(accel, dtype=float))
    gyro = np.atleast_2d(np.asarray(gyro, dtype=float))
    n = accel.shape[0]
    if n == 0:
        raise EmptyInterval("no IMU samples in the keyframe interval")
    dts = np.broadcast_to(np.asarray(dt, dtype=float), (n,))
    if np.any(dts <= 0):
        raise ValueError("IMU sample durations must be positive")
    bias = np.asarray(bias, dtype=float)
    dR, dv, dp = np.eye(3), np.zeros(3), np.zeros(3)
    J_R_bg = np.zeros((3, 3))
    J_v_ba, J_v_bg = np.zeros((3, 3)), np.zeros((3, 3))
    J_p_ba, J_p_bg = np.zeros((3, 3)), np.zeros((3, 3))
    cov = np.zeros((9, 9))
    Qa = accel_sigma**2 * np.eye(3)
    Qg = gyro_sigma**2 * np.eye(3)
    I3 = np.eye(3)
    for a, w, h in zip(accel - bias[:3], gyro - bias[3:], dts):
        ax = skew(a)
        step = so3_exp(w * h)
        Jr = so3_right_jacobian(w * h)

        A = np.eye(9)
        A[0:3, 0:3] = step.T
        A[3:6, 0:3] = -dR @ ax * h
        A[6:9, 0:3] = -0.5 * dR @ ax * h * h
        A[6:9, 3:6] = I3 * h
        Bg = np.zeros((9, 3))
        Bg[0:3] = Jr * h
        Ba = np.zeros((9, 3))
        Ba[3:6] = dR * h
        Ba[6:9] = 0.5 * dR * h * h
        cov = A @ cov @ A.T + Bg @ Qg @ Bg.T + Ba @ Qa @ Ba.T

        J_p_ba = J_p_ba + J_v_ba * h - 0.5 * dR * h * h
        J_p_bg = J_p_bg + J_v_bg * h - 0.5 * dR @ ax @ J_R_bg * h * h
        J_v_ba = J_v_ba - dR * h
        J_v_bg = J_v_bg - dR @ ax @ J_R_bg * h
        dp = dp + dv * h + 0.5 * dR @ a * h * h
        dv = dv + dR @ a * h
        J_R_bg = step.T @ J_R_bg - Jr * h
        dR = dR @ step
    return PreintegratedImu(float(dts.sum()), dR, dv, dp, bias.copy(), 0.5 * (cov + cov.T), J_R_bg, J_v_ba, J_v_bg, J_p_ba, J_p_bg)


def stack(pims) -> PreintegratedImu:
    """One PreintegratedImu whose fields carry a leading interval axis."""
    return PreintegratedImu(*(np.array([getattr(p, f) for p in pims]) for f in PreintegratedImu.__dataclass_fields__))


def _mv(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def _T(A):
    return np.swapaxes(A, -1, -2)


def imu_residual(pim: PreintegratedImu, Ri, pi, vi, bi, Rj, pj, vj):
    """Residual [r_R, r_v, r_p] and Jacobians.

    Poses are perturbed as R <- R exp(dphi), p <- p + R drho, which matches
    the first-order SE(3) right perturbation. Returns the residual and a
    dict of Jacobian blocks keyed by variable: ``pose_i`` (9,6), ``v_i``,
    ``b_i`` (9,6), ``pose_j``, ``v_j``. Every argument may carry a matching
    leading batch axis (see ``stack``).
    """
    t = np.asarray(pim.dt, dtype=float)[..., None]
    d = bi - pim.bias
    dba, dbg = d[..., :3], d[..., 3:]
    corr = _mv(pim.J_R_bg, dbg)
    dRc = pim.dR @ so3_exp(corr)
    dvc = pim.dv + _mv(pim.J_v_ba, dba) + _mv(pim.J_v_bg, dbg)
    dpc = pim.dp + _mv(pim.J_p_ba, dba) + _mv(pim.J_p_bg, dbg)
    Rit = _T(Ri)
    rR = so3_log(_T(dRc) @ Rit @ Rj)
    vel_term = _mv(Rit, vj - vi - GRAVITY_VECTOR * t)
    pos_term = _mv(Rit, pj - pi - vi * t - 0.5 * GRAVITY_VECTOR * t * t)
    rv = vel_term - dvc
    rp = pos_term - dpc
    Jinv = so3_right_jacobian_inv(rR)

    lead = rR.shape[:-1]
    J = {name: np.zeros(lead + (9, k)) for name, k in (("pose_i", 6), ("v_i", 3), ("b_i", 6), ("pose_j", 6), ("v_j", 3))}
    J["pose_i"][..., 0:3, 0:3] = -Jinv @ _T(Rj) @ Ri
    J["pose_j"][..., 0:3, 0:3] = Jinv
    J["b_i"][..., 0:3, 3:6] = -Jinv @ _T(so3_exp(rR)) @ so3_right_jacobian(corr) @ pim.J_R_bg

    J["pose_i"][..., 3:6, 0:3] = skew(vel_term)
    J["v_i"][..., 3:6, :] = -Rit
    J["v_j"][..., 3:6, :] = Rit
    J["b_i"][..., 3:6, 0:3] = -pim.J_v_ba
    J["b_i"][..., 3:6, 3:6] = -pim.J_v_bg

    J["pose_i"][..., 6:9, 0:3] = skew(pos_term)
    J["pose_i"][..., 6:9, 3:6] = -np.eye(3)
    J["pose_j"][..., 6:9, 3:6] = Rit @ Rj
    J["v_i"][..., 6:9, :] = -Rit * t[..., None]
    J["b_i"][..., 6:9, 0:3] = -pim.J_p_ba
    J["b_i"][..., 6:9, 3:6] = -pim.J_p_bg
    return np.concatenate([rR, rv, rp], axis=-1), J
