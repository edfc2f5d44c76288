"""Residuals and Jacobians of the non-IMU factors.

Poses are perturbed on the right, ``T <- T exp(delta)`` with tangent order
[phi, rho]. Leg-factor functions are batched over a leading axis.
"""

from __future__ import annotations

import numpy as np

from ..lie import compose, inverse, se3_adjoint, se3_exp, se3_left_jacobian, se3_log, se3_right_jacobian_inv, skew
from ..network import ONLINE_DIM, forward_each, twist_jacobian_batch


def leg_factor_residual(R_prev, p_prev, R_cur, p_cur, xi, dt):
    """r = log(T_prev^-1 T_cur exp(xi dt)^-1) and its Jacobians.

    Returns ``r`` (...,6) and Jacobians with respect to the previous pose,
    the current pose and the twist, each (...,6,6). Chain the last one with
    ``d xi / d m_on`` to get the online-parameter block.
    """
    dt = np.asarray(dt, dtype=float)
    step = np.asarray(xi) * dt[..., None]
    Rd, pd = se3_exp(step)
    Re, pe = compose(*inverse(R_prev, p_prev), R_cur, p_cur)
    Rr, pr = compose(Re, pe, *inverse(Rd, pd))
    r = se3_log(Rr, pr)
    Jinv = se3_right_jacobian_inv(r)
    J_cur = Jinv @ se3_adjoint(Rd, pd)
    J_prev = -Jinv @ se3_adjoint(*inverse(Rr, pr))
    J_xi = -(Jinv @ se3_left_jacobian(step)) * dt[..., None, None]
    return r, J_prev, J_cur, J_xi


def pose_observation_residual(R_obs, p_obs, R, p, sigma, mask):
    """Whitened log(T_obs^-1 T); masked axes get zero rows (no information)."""
    r = se3_log(*compose(*inverse(R_obs, p_obs), R, p))
    J = se3_right_jacobian_inv(r)
    w = np.asarray(mask, dtype=float) / np.asarray(sigma, dtype=float)
    return w * r, w[..., :, None] * J


def body_velocity_residual(R, v, v_body, sigma):
    """Whitened R^T v - v_body with Jacobians for dphi and dv."""
    u = np.einsum("...ji,...j->...i", R, v)
    r = (u - v_body) / sigma
    return r, skew(u) / sigma, np.swapaxes(R, -1, -2) / sigma


def transition_residual(m_prev, m_cur, sigma_walk: float):
    if sigma_walk <= 0:
        raise ValueError("sigma_walk must be positive")
    return (np.asarray(m_cur) - np.asarray(m_prev)) / sigma_walk


def fixation_residual(m, anchor, sigma_fix: float):
    if sigma_fix <= 0:
        raise ValueError("sigma_fix must be positive")
    return (np.asarray(m) - np.asarray(anchor)) / sigma_fix


class NetworkTwist:
    """Twist predictions of a trained network over fixed keyframe windows."""

    def __init__(self, model, windows: np.ndarray):
        self.model = model
        self.windows = windows

    def __call__(self, rows, m_rows):
        cache = forward_each(self.windows[rows], self.model.m_off, m_rows)
        return cache.twist, twist_jacobian_batch(cache)


class LinearTwist:
    """xi = W_k m + c_k; an exactly differentiable stand-in for tests."""

    def __init__(self, weights: np.ndarray, offsets: np.ndarray):
        self.weights = weights  # (K,6,168)
        self.offsets = offsets  # (K,6)

    def __call__(self, rows, m_rows):
        W = self.weights[rows]
        return np.einsum("kij,kj->ki", W, m_rows) + self.offsets[rows], W.copy()


def check_online_dim(m):
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != ONLINE_DIM:
        raise ValueError(f"online parameters must have {ONLINE_DIM} entries")
    return m
