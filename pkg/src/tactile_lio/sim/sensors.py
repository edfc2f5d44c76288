"""Sensor synthesis on top of a prescribed gait: slip, forces, IMU, encoders, LiDAR."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .. import kinematics as kin
from ..lie import se3_exp
from .config import GRAVITY, DegeneracySchedule, NoiseConfig, PayloadSchedule, ScenarioConfig, TerrainProfile, TerrainSegment
from .gait import BASE_RATE, IMU_DIV, JOINT_DIV, LIDAR_DIV, GaitTruth, foot_tracks, generate_gait, leg_joints, nominal_foot_offsets, plan_footholds

# slip speed at which sliding friction saturates (m/s)
SLIP_SATURATION = 0.02
CONTACT_FORCE_THRESHOLD = 1.0


@dataclass
class LidarObservations:
    ticks: np.ndarray  # (M,)
    rotation: np.ndarray  # (M,3,3)
    position: np.ndarray  # (M,3)
    observed: np.ndarray  # (M,6) bool, tangent order Rx..Tz


@dataclass
class SimStream:
    """All sensor streams and ground truth of one simulated run.

    Truth lives on the union of joint and IMU ticks (``ticks``); each sensor
    carries an index array into that union. Torques and foot forces are only
    reachable through accessors that count reads, so ablations can prove
    they never touched tactile data.
    """

    config: ScenarioConfig
    ticks: np.ndarray
    rotation: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    omega: np.ndarray
    contact: np.ndarray
    joint_index: np.ndarray
    angles: np.ndarray
    rates: np.ndarray
    _torques: np.ndarray
    _foot_force: np.ndarray
    foot_force_true: np.ndarray
    slip_region: np.ndarray
    payload: np.ndarray
    imu_index: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    bias_accel: np.ndarray
    bias_gyro: np.ndarray
    lidar: LidarObservations | None = None
    tactile_reads: int = field(default=0, compare=False)

    @property
    def times(self) -> np.ndarray:
        return self.ticks / BASE_RATE

    @property
    def joint_ticks(self) -> np.ndarray:
        return self.ticks[self.joint_index]

    @property
    def imu_ticks(self) -> np.ndarray:
        return self.ticks[self.imu_index]

    def torques(self) -> np.ndarray:
        self.tactile_reads += 1
        return self._torques

    def foot_forces(self) -> np.ndarray:
        self.tactile_reads += 1
        return self._foot_force

    def truth_index(self, ticks) -> np.ndarray:
        idx = np.searchsorted(self.ticks, ticks)
        if np.any(idx >= self.ticks.size) or np.any(self.ticks[np.minimum(idx, self.ticks.size - 1)] != ticks):
            raise KeyError("tick not on the truth timeline")
        return idx

    def keyframe_ticks(self, rate: float | None = None) -> np.ndarray:
        rate = rate or self.config.lidar_rate
        step = int(round(BASE_RATE / rate))
        return np.arange(0, self.ticks[-1] + 1, step)


def _segment_profiles(terrain) -> tuple:
    if isinstance(terrain, TerrainProfile):
        return (TerrainSegment(0.0, terrain, terrain.kind),)
    return tuple(terrain)


def _patch_mask(arc, start_arc, length, rng):
    """Alternating gap/patch intervals along the travelled distance."""
    total = arc[-1] - start_arc + 2 * length
    edges = [start_arc]
    while edges[-1] < start_arc + total:
        edges.append(edges[-1] + rng.uniform(0.5, 1.5) * length)
    edges = np.asarray(edges)
    interval = np.searchsorted(edges, arc, side="right") - 1
    return interval % 2 == 1


@dataclass
class TerrainField:
    """Per-base-tick effective terrain quantities."""

    ticks: np.ndarray
    region: np.ndarray
    slip: np.ndarray
    sink_rate: np.ndarray
    friction: np.ndarray
    force_scale: np.ndarray
    mass: np.ndarray
    slip_integral: np.ndarray  # (n,3) of slip * horizontal body velocity
    sink_integral: np.ndarray

    def at(self, ticks):
        return np.asarray(ticks) - self.ticks[0]


def terrain_field(truth: GaitTruth, segments, payload: PayloadSchedule, seed: int) -> TerrainField:
    cfg = truth.config
    sched = truth.schedule
    first = int(truth.ticks[0]) - 2 * sched.period
    last = int(truth.ticks[-1]) + 2 * sched.period
    ticks = np.arange(first, last + 1)
    t = ticks / BASE_RATE
    _, _, _, vel, _, _ = truth.body.state(ticks)
    v_h = vel.copy()
    v_h[:, 2] = 0.0
    speed = np.linalg.norm(v_h, axis=1)
    arc = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) / BASE_RATE)])

    starts = np.array([s.start for s in segments])
    seg = np.clip(np.searchsorted(starts, t + 1e-9, side="right") - 1, 0, None)
    region = np.zeros(ticks.size, dtype=bool)
    gain = np.zeros(ticks.size)
    sinkage = np.zeros(ticks.size)
    friction = np.zeros(ticks.size)
    scale = np.ones(ticks.size)
    for i, s in enumerate(segments):
        here = seg == i
        if not here.any():
            continue
        prof = s.profile
        if prof.kind == "slippery-patch":
            rng = np.random.default_rng(np.random.SeedSequence([seed, 2, i]))
            on = _patch_mask(arc, arc[np.argmax(here)], prof.patch_length, rng)
        else:
            on = np.ones(ticks.size, dtype=bool)
        on &= here
        region |= on
        gain[on] = prof.slip_gain
        sinkage[on] = prof.sinkage
        friction[on] = prof.friction
        scale[on] = prof.force_scale

    mass = cfg.base_mass + payload.mass_at(t)
    load = mass / cfg.base_mass
    slip = gain * load
    t_stance = sched.stance / BASE_RATE
    sink_rate = sinkage * load / t_stance
    rate = slip[:, None] * v_h
    dt = 1.0 / BASE_RATE
    slip_int = np.concatenate([np.zeros((1, 3)), np.cumsum(0.5 * (rate[1:] + rate[:-1]) * dt, axis=0)])
    sink_int = np.concatenate([[0.0], np.cumsum(0.5 * (sink_rate[1:] + sink_rate[:-1]) * dt)])
    return TerrainField(ticks, region, slip, sink_rate, friction, scale, mass, slip_int, sink_int)


def _drift_fn(tf: TerrainField, truth: GaitTruth):
    def drift(leg, td, ticks):
        i, i0 = tf.at(ticks), tf.at(td)
        d = -(tf.slip_integral[i] - tf.slip_integral[i0])
        d[:, 2] = -(tf.sink_integral[i] - tf.sink_integral[i0])
        _, _, _, vel, _, _ = truth.body.state(ticks)
        dd = -tf.slip[i, None] * vel
        dd[:, 2] = -tf.sink_rate[i]
        return d, dd

    return drift


def contact_forces(truth: GaitTruth, tf: TerrainField, foot_vel) -> np.ndarray:
    """World-frame ground reaction force on each foot (N,4,3)."""
    i = tf.at(truth.ticks)
    contact = truth.contact
    n_stance = np.maximum(contact.sum(axis=1), 1)
    mass = tf.mass[i]
    fz = mass * (GRAVITY + truth.acceleration[:, 2]) / n_stance * tf.force_scale[i]
    f_h = mass[:, None] * truth.acceleration[:, :2] / n_stance[:, None]
    v_h = truth.velocity[:, :2]
    speed = np.linalg.norm(v_h, axis=1)
    direction = np.where(speed[:, None] > 1e-9, v_h / np.maximum(speed, 1e-9)[:, None], 0.0)
    grf = np.zeros(contact.shape + (3,))
    for j in range(4):
        slip_speed = np.linalg.norm(foot_vel[:, j, :2], axis=1)
        fric = tf.friction[i] * fz * np.tanh(slip_speed / SLIP_SATURATION)
        grf[:, j, :2] = f_h + fric[:, None] * direction
        grf[:, j, 2] = fz
    return grf * contact[..., None]


def synthesize_sensors(
    truth: GaitTruth,
    terrain: TerrainProfile | Sequence[TerrainSegment] | None = None,
    payload: PayloadSchedule | None = None,
    noise: NoiseConfig | None = None,
    seed: int | None = None,
) -> SimStream:
    """Inject slip and produce IMU, encoder, torque and foot-force streams."""
    cfg = truth.config
    segments = _segment_profiles(cfg.terrain if terrain is None else terrain)
    payload = cfg.payload if payload is None else payload
    noise = cfg.noise if noise is None else noise
    seed = cfg.seed if seed is None else seed
    model = cfg.leg_model

    tf = terrain_field(truth, segments, payload, seed)
    drift = _drift_fn(tf, truth)
    footholds = plan_footholds(truth.body, truth.schedule, nominal_foot_offsets(model), truth.ticks, drift)
    foot_pos, foot_vel = foot_tracks(truth.body, truth.schedule, footholds, truth.ticks, cfg.gait.swing_height, drift)
    angles, rates = leg_joints(model, truth.rotation, truth.position, truth.velocity, truth.omega, foot_pos, foot_vel)
    grf = contact_forces(truth, tf, foot_vel * truth.contact[..., None])

    rng_j = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    rng_f = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    n = truth.ticks.size
    grf_meas = grf + noise.grf * rng_f.standard_normal(grf.shape) * truth.contact[..., None]
    f_body = np.einsum("nji,nkj->nki", truth.rotation, grf_meas)
    torques = np.zeros((n, 12))
    for j in range(4):
        J = kin.jacobian_batch(model, j, angles[:, 3 * j : 3 * j + 3])
        torques[:, 3 * j : 3 * j + 3] = -np.einsum("nij,ni->nj", J, f_body[:, j])
    torques += noise.torque * rng_f.standard_normal(torques.shape)
    force = np.where(truth.contact, np.maximum(grf[..., 2] + noise.force * rng_f.standard_normal((n, 4)), 0.0), 0.0)
    q_meas = angles + noise.encoder * rng_j.standard_normal(angles.shape)
    dq_meas = rates + noise.encoder_velocity * rng_j.standard_normal(rates.shape)

    accel, gyro, imu_ticks, ba, bg = _imu(truth, noise, seed)

    union = np.union1d(truth.ticks, imu_ticks)
    _, R, p, v, _, w = truth.body.state(union)
    stream = SimStream(
        config=replace(cfg, terrain=segments, payload=payload, noise=noise, seed=seed),
        ticks=union,
        rotation=R,
        position=p,
        velocity=v,
        omega=w,
        contact=truth.schedule.contact(union),
        joint_index=np.searchsorted(union, truth.ticks),
        angles=q_meas,
        rates=dq_meas,
        _torques=torques,
        _foot_force=force,
        foot_force_true=grf[..., 2],
        slip_region=tf.region[tf.at(truth.ticks)] & (tf.slip[tf.at(truth.ticks)] > 0),
        payload=tf.mass[tf.at(truth.ticks)] - cfg.base_mass,
        imu_index=np.searchsorted(union, imu_ticks),
        accel=accel,
        gyro=gyro,
        bias_accel=ba,
        bias_gyro=bg,
    )
    return stream


def _imu(truth: GaitTruth, noise: NoiseConfig, seed: int):
    """Sample k at tick 25k integrates the interval that ends at it."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    k_last = int(truth.ticks[-1]) // IMU_DIV
    k = np.arange(0, k_last + 1)
    yaw0, v0 = truth.body.imu_tick_state(k - 1)
    yaw1, v1 = truth.body.imu_tick_state(k)
    dt = IMU_DIV / BASE_RATE
    c, s = np.cos(yaw0), np.sin(yaw0)
    a_w = (v1 - v0) / dt
    a_w[:, 2] += GRAVITY
    spec = np.stack([c * a_w[:, 0] + s * a_w[:, 1], -s * a_w[:, 0] + c * a_w[:, 1], a_w[:, 2]], axis=1)
    rate = np.zeros((k.size, 3))
    rate[:, 2] = (yaw1 - yaw0) / dt

    steps = rng.standard_normal((k.size, 6)) * noise.bias_rw * np.sqrt(dt)
    steps[0] = rng.standard_normal(6) * np.repeat([noise.accel_bias0, noise.gyro_bias0], 3)
    bias = np.cumsum(steps, axis=0)
    white = rng.standard_normal((k.size, 6))
    accel = spec + bias[:, :3] + noise.accel * white[:, :3]
    gyro = rate + bias[:, 3:] + noise.gyro * white[:, 3:]
    return accel, gyro, k * IMU_DIV, bias[:, :3], bias[:, 3:]


def lidar_observation(truth: GaitTruth, schedule: DegeneracySchedule, rate: float, noise: NoiseConfig, rng) -> LidarObservations:
    """True pose perturbed on the right by small tangent noise, plus the axis mask."""
    step = BASE_RATE / rate
    if abs(step - round(step)) > 1e-9 or int(round(step)) % JOINT_DIV:
        raise ValueError("LiDAR rate must land on joint ticks")
    ticks = np.arange(0, int(truth.ticks[-1]) + 1, int(round(step)))
    _, R, p, _, _, _ = truth.body.state(ticks)
    xi = rng.standard_normal((ticks.size, 6)) * np.repeat([noise.lidar_rot, noise.lidar_trans], 3)
    dR, dt = se3_exp(xi)
    R_obs = R @ dR
    p_obs = p + np.einsum("nij,nj->ni", R, dt)
    return LidarObservations(ticks, R_obs, p_obs, schedule.observed_at(ticks / BASE_RATE))


def simulate(config: ScenarioConfig) -> SimStream:
    truth = generate_gait(config)
    stream = synthesize_sensors(truth)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 6]))
    stream.lidar = lidar_observation(truth, config.degeneracy, config.lidar_rate, config.noise, rng)
    return stream


__all__ = [
    "CONTACT_FORCE_THRESHOLD",
    "LIDAR_DIV",
    "LidarObservations",
    "SimStream",
    "contact_forces",
    "lidar_observation",
    "simulate",
    "synthesize_sensors",
    "terrain_field",
]
