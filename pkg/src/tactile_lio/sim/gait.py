"""Prescribed-motion trot generator.

Time is kept as integer ticks of a 1500 Hz base clock so that the 60 Hz IMU,
500 Hz joint and 10 Hz LiDAR grids line up exactly. The body trajectory is
defined at IMU ticks (yaw, world velocity) and is piecewise constant-
acceleration in between, which makes discrete IMU preintegration exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kinematics as kin
from ..lie import rot_z
from .config import GaitConfig, MotionProfile, ScenarioConfig

BASE_RATE = 1500
IMU_DIV = 25
JOINT_DIV = 3
LIDAR_DIV = 150
PAD_SECONDS = 1.0
# diagonal pairs LF+RH and LH+RF alternate
PHASE_OFFSET = np.array([0.0, 0.5, 0.0, 0.5])


def _knots(values, default):
    if not values:
        return np.array([0.0]), np.array([default])
    arr = np.asarray(values, dtype=float)
    return arr[:, 0], arr[:, 1]


def command_profile(motion: MotionProfile, duration: float, rng: np.random.Generator):
    """Return (speed, lateral, yaw_rate) knot tables ``(times, values)``."""
    if motion.kind == "knots":
        return _knots(motion.speed, 0.0), _knots(motion.lateral, 0.0), _knots(motion.yaw_rate, 0.0)
    if motion.kind != "random":
        raise ValueError(f"unknown motion kind {motion.kind!r}")
    times = np.arange(0.0, duration + 2 * motion.knot_spacing, motion.knot_spacing)
    n = times.size
    speed = rng.uniform(motion.min_speed, motion.max_speed, n)
    speed[rng.random(n) < motion.stop_probability] = 0.0
    lateral = rng.uniform(-motion.max_lateral, motion.max_lateral, n) * (rng.random(n) < 0.4)
    yaw = rng.uniform(-motion.max_yaw_rate, motion.max_yaw_rate, n) * (rng.random(n) < 0.7)
    speed[0] = lateral[0] = yaw[0] = 0.0
    return (times, speed), (times, lateral), (times, yaw)


class BodyTrajectory:
    """Planar body motion (yaw only, constant height) sampled on IMU ticks."""

    def __init__(self, k0: int, yaw: np.ndarray, vel: np.ndarray, pos: np.ndarray):
        self.k0 = k0
        self.yaw = yaw
        self.vel = vel
        self.pos = pos
        self.dt = IMU_DIV / BASE_RATE

    @classmethod
    def from_commands(cls, commands, duration: float, height: float) -> "BodyTrajectory":
        pad = int(round(PAD_SECONDS * BASE_RATE / IMU_DIV))
        k_end = int(np.ceil(duration * BASE_RATE / IMU_DIV)) + pad
        k = np.arange(-pad, k_end + 1)
        dt = IMU_DIV / BASE_RATE
        t = k * dt
        (ts, vs), (tl, vl), (ty, vy) = commands
        speed = np.interp(t, ts, vs)
        lateral = np.interp(t, tl, vl)
        rate = np.interp(t, ty, vy)
        yaw = np.concatenate([[0.0], np.cumsum(0.5 * (rate[1:] + rate[:-1]) * dt)])
        yaw -= yaw[pad]
        c, s = np.cos(yaw), np.sin(yaw)
        vel = np.stack([c * speed - s * lateral, s * speed + c * lateral, np.zeros_like(t)], axis=1)
        pos = np.concatenate([np.zeros((1, 3)), np.cumsum(0.5 * (vel[1:] + vel[:-1]) * dt, axis=0)])
        pos -= pos[pad]
        pos[:, 2] = height
        return cls(-pad, yaw, vel, pos)

    def _split(self, ticks):
        ticks = np.asarray(ticks)
        k = np.floor_divide(ticks, IMU_DIV).astype(int)
        tau = (ticks - IMU_DIV * k) / BASE_RATE
        i = k - self.k0
        if np.any(i < 0) or np.any(i + 1 >= self.yaw.size):
            raise ValueError("tick outside the simulated body trajectory")
        return i, tau

    def state(self, ticks):
        """Yaw, rotation, position, world velocity, world acceleration, body yaw rate."""
        i, tau = self._split(ticks)
        rate = (self.yaw[i + 1] - self.yaw[i]) / self.dt
        acc = (self.vel[i + 1] - self.vel[i]) / self.dt
        tau3 = tau[..., None]
        yaw = self.yaw[i] + rate * tau
        vel = self.vel[i] + acc * tau3
        pos = self.pos[i] + self.vel[i] * tau3 + 0.5 * acc * tau3 * tau3
        omega = np.zeros(np.shape(yaw) + (3,))
        omega[..., 2] = rate
        return yaw, rot_z(yaw), pos, vel, acc, omega

    def imu_tick_state(self, k):
        """Yaw and world velocity exactly at IMU tick index ``k``."""
        i = np.asarray(k) - self.k0
        return self.yaw[i], self.vel[i]


@dataclass
class GaitSchedule:
    """Integer-tick stance timing of the trot."""

    period: int
    stance: int
    offsets: np.ndarray  # (4,) ticks

    @classmethod
    def from_config(cls, gait: GaitConfig) -> "GaitSchedule":
        period = gait.period * BASE_RATE
        stance = gait.duty * period
        if abs(period - round(period)) > 1e-9 or abs(stance - round(stance)) > 1e-9:
            raise ValueError("gait period and stance must be whole base ticks")
        if not 0.0 < gait.duty < 1.0:
            raise ValueError("duty factor must lie in (0, 1)")
        period, stance = int(round(period)), int(round(stance))
        offsets = np.round(PHASE_OFFSET * period).astype(int)
        return cls(period, stance, offsets)

    def phase(self, leg: int, ticks):
        rel = np.asarray(ticks) - self.offsets[leg]
        k = np.floor_divide(rel, self.period)
        local = rel - k * self.period
        return k, local

    def contact(self, ticks) -> np.ndarray:
        ticks = np.asarray(ticks)
        out = np.zeros(ticks.shape + (4,), dtype=bool)
        for j in range(4):
            _, local = self.phase(j, ticks)
            out[..., j] = local < self.stance
        return out

    def touchdown(self, leg: int, k):
        return np.asarray(k) * self.period + self.offsets[leg]


def nominal_foot_offsets(model: kin.LegModel) -> np.ndarray:
    """Horizontal body-frame foot positions of a neutral stance."""
    out = model.hip_offsets.copy()
    out[:, 1] += kin.LEFT * model.l_hip
    out[:, 2] = 0.0
    return out


def _hermite(u):
    """Cubic Hermite basis and its u-derivative."""
    u2, u3 = u * u, u**3
    h = np.stack([2 * u3 - 3 * u2 + 1, u3 - 2 * u2 + u, -2 * u3 + 3 * u2, u3 - u2])
    dh = np.stack([6 * u2 - 6 * u, 3 * u2 - 4 * u + 1, -6 * u2 + 6 * u, 3 * u2 - 2 * u])
    return h, dh


@dataclass
class GaitTruth:
    """Body and feet on the joint-rate grid, before or after slip."""

    config: ScenarioConfig
    body: BodyTrajectory
    schedule: GaitSchedule
    ticks: np.ndarray  # (N,) base ticks of joint samples
    rotation: np.ndarray  # (N,3,3)
    position: np.ndarray  # (N,3)
    velocity: np.ndarray  # (N,3) world
    acceleration: np.ndarray  # (N,3) world
    omega: np.ndarray  # (N,3) body
    contact: np.ndarray  # (N,4)
    foot_world: np.ndarray  # (N,4,3)
    foot_velocity: np.ndarray  # (N,4,3) world
    angles: np.ndarray  # (N,12)
    rates: np.ndarray  # (N,12)
    footholds: list  # per leg: (k_first, (K,3) touchdown points)


def _no_drift(leg, td, ticks):
    z = np.zeros(np.shape(ticks) + (3,))
    return z, z.copy()


def plan_footholds(body, schedule, nominal, ticks, drift=_no_drift):
    """Touchdown points that centre every stance stroke under its hip.

    The point is chosen so that, after the stance foot has drifted, the foot
    sits at its nominal body-frame offset at mid-stance. The stroke seen by
    the legs is therefore symmetric whatever the ground does.
    """
    footholds = []
    for j in range(4):
        k_first = int(schedule.phase(j, ticks[0])[0])
        k_last = int(schedule.phase(j, ticks[-1])[0]) + 1
        ks = np.arange(k_first, k_last + 1)
        td = schedule.touchdown(j, ks)
        mid = td + schedule.stance // 2
        _, R, p, _, _, _ = body.state(mid)
        d, _ = drift(j, td, mid)
        points = p + np.einsum("kij,j->ki", R, nominal[j]) - d
        points[:, 2] = 0.0
        footholds.append((k_first, points))
    return footholds


def _relative(body, ticks, world, world_vel):
    """Body-frame position and velocity of a world point."""
    _, R, p, v, _, w = body.state(ticks)
    Rt = np.swapaxes(R, -1, -2)
    rel = np.einsum("nij,nj->ni", Rt, world - p)
    rel_vel = np.einsum("nij,nj->ni", Rt, world_vel - v) - np.cross(w, rel)
    return rel, rel_vel


def foot_tracks(body, schedule, footholds, ticks, swing_height, drift=_no_drift):
    """World foot positions and velocities for all legs.

    ``drift(leg, touchdown_ticks, ticks)`` returns the stance-foot
    displacement from its touchdown point and its rate of change. Swing is a
    cubic Hermite curve in the body frame that joins the relative foot
    velocity at liftoff and touchdown, plus a lift bump with flat ends.
    """
    n = ticks.size
    pos = np.zeros((n, 4, 3))
    vel = np.zeros((n, 4, 3))
    swing_ticks = schedule.period - schedule.stance
    t_swing = swing_ticks / BASE_RATE
    for j in range(4):
        k_first, points = footholds[j]
        k, local = schedule.phase(j, ticks)
        idx = k - k_first
        td = schedule.touchdown(j, k)
        stance = local < schedule.stance
        d, dd = drift(j, td[stance], ticks[stance])
        pos[stance, j] = points[idx[stance]] + d
        vel[stance, j] = dd

        sw = ~stance
        lo = td[sw] + schedule.stance
        td_next = td[sw] + schedule.period
        d_lo, dd_lo = drift(j, td[sw], lo)
        _, dd_td = drift(j, td_next, td_next)
        r0, m0 = _relative(body, lo, points[idx[sw]] + d_lo, dd_lo)
        r1, m1 = _relative(body, td_next, points[idx[sw] + 1], dd_td)
        u = (ticks[sw] - lo) / swing_ticks
        h, dh = _hermite(u)
        rel = h[0, :, None] * r0 + h[1, :, None] * t_swing * m0 + h[2, :, None] * r1 + h[3, :, None] * t_swing * m1
        rel_dot = (dh[0, :, None] * r0 + dh[1, :, None] * t_swing * m0 + dh[2, :, None] * r1 + dh[3, :, None] * t_swing * m1) / t_swing
        rel[:, 2] += 16.0 * swing_height * u**2 * (1 - u) ** 2
        rel_dot[:, 2] += 32.0 * swing_height * u * (1 - u) * (1 - 2 * u) / t_swing
        _, R, p, v, _, w = body.state(ticks[sw])
        pos[sw, j] = p + np.einsum("nij,nj->ni", R, rel)
        vel[sw, j] = v + np.einsum("nij,nj->ni", R, rel_dot + np.cross(w, rel))
    return pos, vel


def leg_joints(model, rotation, position, velocity, omega, foot_pos, foot_vel):
    """Closed-form IK plus joint rates from foot motion relative to the body."""
    Rt = np.swapaxes(rotation, -1, -2)
    n = position.shape[0]
    angles = np.zeros((n, 12))
    rates = np.zeros((n, 12))
    for j in range(4):
        p_b = np.einsum("nij,nj->ni", Rt, foot_pos[:, j] - position)
        v_b = np.einsum("nij,nj->ni", Rt, foot_vel[:, j] - velocity) - np.cross(omega, p_b)
        try:
            q = kin.ik_batch(model, j, p_b)
            model.check_limits(q, j)
        except (kin.IKUnreachable, kin.JointLimit) as exc:
            raise kin.IKUnreachable(f"commanded motion leaves the leg workspace: {exc}") from exc
        J = kin.jacobian_batch(model, j, q)
        angles[:, 3 * j : 3 * j + 3] = q
        rates[:, 3 * j : 3 * j + 3] = np.linalg.solve(J, v_b[..., None])[..., 0]
    return angles, rates


def generate_gait(config: ScenarioConfig) -> GaitTruth:
    """Kinematic trot following the configured commands; stance feet never move."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    commands = command_profile(config.motion, config.duration, rng)
    body = BodyTrajectory.from_commands(commands, config.duration, config.gait.body_height)
    schedule = GaitSchedule.from_config(config.gait)
    last = int(round(config.duration * BASE_RATE))
    ticks = np.arange(0, last + 1, JOINT_DIV)

    footholds = plan_footholds(body, schedule, nominal_foot_offsets(config.leg_model), ticks)
    _, R, p, v, a, w = body.state(ticks)
    foot_pos, foot_vel = foot_tracks(body, schedule, footholds, ticks, config.gait.swing_height)
    angles, rates = leg_joints(config.leg_model, R, p, v, w, foot_pos, foot_vel)
    return GaitTruth(
        config=config,
        body=body,
        schedule=schedule,
        ticks=ticks,
        rotation=R,
        position=p,
        velocity=v,
        acceleration=a,
        omega=w,
        contact=schedule.contact(ticks),
        foot_world=foot_pos,
        foot_velocity=foot_vel,
        angles=angles,
        rates=rates,
        footholds=footholds,
    )
