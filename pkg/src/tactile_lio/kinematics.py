"""Quadruped leg kinematics and conventional (model-based) leg odometry.

Legs are ordered LF, LH, RH, RF. Each leg has hip-roll (about body x),
hip-pitch and knee (both about the rotated y axis). With all joints at zero
the leg hangs straight down, offset laterally by the hip link.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEG_NAMES = ("LF", "LH", "RH", "RF")
LEFT = np.array([1.0, 1.0, -1.0, -1.0])


class JointLimit(ValueError):
    pass


class NoContact(ValueError):
    pass


class IKUnreachable(ValueError):
    pass


def _default_hips():
    x, y = 0.1934, 0.0465
    return np.array([[x, y, 0.0], [-x, y, 0.0], [-x, -y, 0.0], [x, -y, 0.0]])


@dataclass(frozen=True, eq=False)
class LegModel:
    """Link geometry of a 12-joint quadruped (Go2-like defaults, metres)."""

    hip_offsets: np.ndarray = field(default_factory=_default_hips)
    l_hip: float = 0.0955
    l_thigh: float = 0.213
    l_calf: float = 0.213
    lower: tuple = (-1.05, -1.6, -2.72)
    upper: tuple = (1.05, 3.5, 0.0)

    def __post_init__(self):
        if min(self.l_hip, self.l_thigh, self.l_calf) <= 0:
            raise ValueError("link lengths must be positive")
        object.__setattr__(self, "hip_offsets", np.asarray(self.hip_offsets, dtype=float).reshape(4, 3))

    @classmethod
    def from_dict(cls, d: dict | None) -> "LegModel":
        if not d:
            return cls()
        kw = {k: d[k] for k in ("l_hip", "l_thigh", "l_calf") if k in d}
        if "hip_offsets" in d:
            kw["hip_offsets"] = np.asarray(d["hip_offsets"], dtype=float)
        if "lower" in d:
            kw["lower"] = tuple(d["lower"])
        if "upper" in d:
            kw["upper"] = tuple(d["upper"])
        return cls(**kw)

    def __eq__(self, other) -> bool:
        return isinstance(other, LegModel) and self.to_dict() == other.to_dict()

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "hip_offsets": self.hip_offsets.tolist(),
            "l_hip": self.l_hip,
            "l_thigh": self.l_thigh,
            "l_calf": self.l_calf,
            "lower": list(self.lower),
            "upper": list(self.upper),
        }

    def check_limits(self, angles, leg_index=None) -> None:
        q = np.asarray(angles, dtype=float).reshape(-1, 3)
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        bad = (q < lo - 1e-12) | (q > hi + 1e-12)
        if np.any(bad):
            where = "" if leg_index is None else f" on leg {LEG_NAMES[leg_index]}"
            raise JointLimit(f"joint angle outside limits{where}: {q[np.any(bad, axis=1)][0]}")


@dataclass(frozen=True)
class JointState:
    angles: np.ndarray  # (12,) rad, leg-major
    velocities: np.ndarray  # (12,) rad/s
    torques: np.ndarray  # (12,) N m


def _check_leg(leg_index):
    if leg_index not in (0, 1, 2, 3):
        raise IndexError(f"leg index {leg_index} out of range")


def fk_batch(model: LegModel, leg_index: int, q) -> np.ndarray:
    """Foot positions in the body frame for joint angles ``q`` of shape (..., 3)."""
    q = np.asarray(q, dtype=float)
    q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2]
    lt, lc = model.l_thigh, model.l_calf
    a = LEFT[leg_index] * model.l_hip
    x = -lt * np.sin(q2) - lc * np.sin(q2 + q3)
    zp = -lt * np.cos(q2) - lc * np.cos(q2 + q3)
    c1, s1 = np.cos(q1), np.sin(q1)
    y = a * c1 - zp * s1
    z = a * s1 + zp * c1
    return np.stack([x, y, z], axis=-1) + model.hip_offsets[leg_index]


def jacobian_batch(model: LegModel, leg_index: int, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2]
    lt, lc = model.l_thigh, model.l_calf
    a = LEFT[leg_index] * model.l_hip
    c1, s1 = np.cos(q1), np.sin(q1)
    s2, c2 = np.sin(q2), np.cos(q2)
    s23, c23 = np.sin(q2 + q3), np.cos(q2 + q3)
    zp = -lt * c2 - lc * c23
    dx2, dz2 = -lt * c2 - lc * c23, lt * s2 + lc * s23
    dx3, dz3 = -lc * c23, lc * s23
    J = np.zeros(q.shape[:-1] + (3, 3))
    J[..., 1, 0] = -a * s1 - zp * c1
    J[..., 2, 0] = a * c1 - zp * s1
    J[..., 0, 1] = dx2
    J[..., 1, 1] = -dz2 * s1
    J[..., 2, 1] = dz2 * c1
    J[..., 0, 2] = dx3
    J[..., 1, 2] = -dz3 * s1
    J[..., 2, 2] = dz3 * c1
    return J


def ik_batch(model: LegModel, leg_index: int, p) -> np.ndarray:
    """Closed-form inverse kinematics for body-frame foot positions.

    Picks the knee-backward branch with the foot below the hip in the leg
    plane, which is the only branch a walking gait visits.
    """
    p = np.asarray(p, dtype=float) - model.hip_offsets[leg_index]
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    a = LEFT[leg_index] * model.l_hip
    lt, lc = model.l_thigh, model.l_calf
    r2 = y * y + z * z - a * a
    if np.any(r2 <= 0):
        raise IKUnreachable("foot inside the hip-roll offset circle")
    L = np.sqrt(r2)
    q1 = np.arctan2(z, y) - np.arctan2(-L, a)
    q1 = (q1 + np.pi) % (2 * np.pi) - np.pi
    D2 = x * x + L * L
    c3 = (D2 - lt * lt - lc * lc) / (2 * lt * lc)
    if np.any(c3 > 1.0) or np.any(c3 < -1.0):
        raise IKUnreachable("foot outside the leg workspace")
    q3 = -np.arccos(c3)
    k1 = lt + lc * np.cos(q3)
    k2 = lc * np.sin(q3)
    phi = np.arctan2(-x, L)
    q2 = phi - np.arctan2(k2, k1)
    return np.stack([q1, q2, q3], axis=-1)


def forward_kinematics(model: LegModel, leg_index: int, angles) -> np.ndarray:
    _check_leg(leg_index)
    model.check_limits(angles, leg_index)
    return fk_batch(model, leg_index, np.asarray(angles, dtype=float).reshape(3))


def leg_jacobian(model: LegModel, leg_index: int, angles) -> np.ndarray:
    _check_leg(leg_index)
    model.check_limits(angles, leg_index)
    return jacobian_batch(model, leg_index, np.asarray(angles, dtype=float).reshape(3))


def inverse_kinematics(model: LegModel, leg_index: int, foot) -> np.ndarray:
    _check_leg(leg_index)
    q = ik_batch(model, leg_index, np.asarray(foot, dtype=float).reshape(3))
    try:
        model.check_limits(q, leg_index)
    except JointLimit as exc:
        raise IKUnreachable(str(exc)) from exc
    return q


def per_leg_velocity(model: LegModel, q, dq, omega_body) -> np.ndarray:
    """Body velocity implied by each leg, -(J dq + omega x fk), shape (..., 4, 3)."""
    q = np.asarray(q, dtype=float)
    if q.shape[-1] == 12:
        q = q.reshape(q.shape[:-1] + (4, 3))
    dq = np.asarray(dq, dtype=float).reshape(q.shape)
    omega = np.asarray(omega_body, dtype=float)
    out = np.empty(q.shape)
    for j in range(4):
        J = jacobian_batch(model, j, q[..., j, :])
        foot = fk_batch(model, j, q[..., j, :])
        out[..., j, :] = -(np.einsum("...ik,...k->...i", J, dq[..., j, :]) + np.cross(omega, foot))
    return out


def conventional_leg_velocity(model: LegModel, joints: JointState, omega_body, contacts) -> np.ndarray:
    """Mean body-frame linear velocity over the legs flagged in contact."""
    contacts = np.asarray(contacts, dtype=bool).reshape(4)
    if not contacts.any():
        raise NoContact("conventional leg odometry needs at least one foot in contact")
    q = np.asarray(joints.angles, dtype=float).reshape(4, 3)
    dq = np.asarray(joints.velocities, dtype=float).reshape(4, 3)
    v = per_leg_velocity(model, q, dq, omega_body)
    total = np.zeros(3)
    for j in range(4):  # fixed leg order keeps the sum bit-reproducible
        if contacts[j]:
            total = total + v[j]
    return total / np.count_nonzero(contacts)
