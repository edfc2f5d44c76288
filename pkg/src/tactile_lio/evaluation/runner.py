"""Drive the smoother over a simulated stream for one estimation method."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .. import kinematics as kin
from ..dataset import keyframe_frames, latest_at_or_before, reference_twists
from ..fusion.factors import NetworkTwist
from ..fusion.preintegration import preintegrate
from ..fusion.smoother import FixedLagSmoother, SmootherConfig
from ..network import NeuralModel, stack_windows
from ..sim.gait import BASE_RATE, IMU_DIV
from ..sim.sensors import CONTACT_FORCE_THRESHOLD, SimStream
from .metrics import Trajectory, compute_ate, compute_rte

log = logging.getLogger(__name__)

METHODS = ("ours", "no-online", "no-tactile", "lio-only", "conventional-leg")
LEARNED = ("ours", "no-online", "no-tactile")
# keeps the IMU factor's information finite on noise-free streams
IMU_NOISE_FLOOR = 1e-4


class MissingModel(ValueError):
    pass


@dataclass
class KeyframeInputs:
    """Everything the smoother consumes, indexed by keyframe."""

    ticks: np.ndarray
    times: np.ndarray
    imu: list  # entry k: (accel, gyro) samples in (t_{k-1}, t_k]; entry 0 is None
    obs: list  # (R, p, mask) per keyframe
    windows: np.ndarray | None = None  # row k-2 feeds the factor ending at keyframe k
    joint_index: np.ndarray | None = None  # latest joint sample at each keyframe
    legs: bool = False

    def leg_row(self, k: int):
        if not self.legs or k < 2:
            return None
        return k - 2


def keyframe_inputs(stream: SimStream, model: NeuralModel | None = None, legs: bool | None = None) -> KeyframeInputs:
    """Smoother inputs; ``legs`` defaults to whether a model supplies windows."""
    ticks = stream.keyframe_ticks()
    lidar = stream.lidar
    if lidar is None or not np.array_equal(lidar.ticks, ticks):
        raise ValueError("keyframes must coincide with LiDAR frames")
    imu_ticks = stream.imu_ticks
    bounds = np.searchsorted(imu_ticks, ticks, side="right")
    imu = [None]
    for k in range(1, ticks.size):
        lo, hi = bounds[k - 1], bounds[k]
        imu.append((stream.accel[lo:hi], stream.gyro[lo:hi]))
    obs = [(lidar.rotation[k], lidar.position[k], lidar.observed[k]) for k in range(ticks.size)]
    windows = None
    if model is not None:
        frames = keyframe_frames(stream, ticks, tactile=model.tactile)
        windows = stack_windows(model.standardizer.apply(frames))
    joints = latest_at_or_before(stream.joint_ticks, ticks)
    legs = model is not None if legs is None else legs
    return KeyframeInputs(ticks, ticks / BASE_RATE, imu, obs, windows, joints, legs)


@dataclass
class RunResult:
    method: str
    rows: list  # per-keyframe JSON-ready records
    estimate: Trajectory
    m_history: np.ndarray | None
    report: dict
    seconds: float = 0.0
    smoother: FixedLagSmoother | None = field(default=None, repr=False)


def _omega_slices(stream, joints):
    return latest_at_or_before(stream.imu_ticks, stream.joint_ticks[joints])


def run_scenario(stream: SimStream, method: str, model: NeuralModel | None = None,
                 config: SmootherConfig = SmootherConfig(), initial_sequence: str | None = None) -> RunResult:
    """Run one method over the whole stream and score it against the stream's truth.

    Estimates are the newest keyframe's state right after its own
    optimization, i.e. what an online odometry would publish.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method in LEARNED and model is None:
        raise MissingModel(f"method {method!r} needs a model blob")
    if method == "no-tactile" and model.tactile:
        raise ValueError("the no-tactile method needs a model trained without tactile channels")
    if method in ("ours", "no-online") and not model.tactile:
        raise ValueError(f"method {method!r} needs a tactile model")
    inputs = keyframe_inputs(stream, model if method in LEARNED else None)
    twist, m0 = None, None
    if method in LEARNED:
        twist = NetworkTwist(model, inputs.windows)
        m0 = model.initial_online(initial_sequence)
    smoother = FixedLagSmoother(config, twist=twist, m0=m0, learn=method != "no-online")
    run = drive(stream, inputs, smoother, conventional=method == "conventional-leg")
    run.method = method
    run.report = metrics_report(run.estimate, stream)
    run.report["method"] = method
    return run


def drive(stream: SimStream, inputs: KeyframeInputs, smoother: FixedLagSmoother, conventional: bool = False) -> RunResult:
    """Feed every keyframe to ``smoother``; the report is left empty."""
    if conventional:
        forces = stream.foot_forces()[inputs.joint_index]
        imu_at = _omega_slices(stream, inputs.joint_index)
        leg_model = stream.config.leg_model

    noise = stream.config.noise
    rows, poses, ms = [], [], []
    started = time.perf_counter()
    for k, t in enumerate(inputs.times):
        pim, velocity = None, None
        if k > 0:
            prev = smoother.nodes[-1]
            accel, gyro = inputs.imu[k]
            pim = preintegrate(accel, gyro, IMU_DIV / BASE_RATE, prev.b, max(noise.accel, IMU_NOISE_FLOOR),
                               max(noise.gyro, IMU_NOISE_FLOOR))
            if conventional:
                contacts = forces[k] > CONTACT_FORCE_THRESHOLD
                if contacts.any():
                    j = inputs.joint_index[k]
                    joints = kin.JointState(stream.angles[j], stream.rates[j], np.zeros(12))
                    omega = stream.gyro[imu_at[k]] - prev.b[3:]
                    velocity = kin.conventional_leg_velocity(leg_model, joints, omega, contacts)
        leg_row = inputs.leg_row(k)
        node = smoother.add_keyframe(float(t), pim, inputs.obs[k], leg_row,
                                     (inputs.ticks[k] - inputs.ticks[k - 1]) / BASE_RATE if k else 0.0, velocity)
        poses.append((node.R.copy(), node.p.copy()))
        m = smoother.online_parameters(node)
        if m is not None:
            ms.append(m.copy())
        rows.append(_row(smoother, node, k, leg_row is not None))
    seconds = time.perf_counter() - started
    estimate = Trajectory(inputs.times.copy(), np.array([R for R, _ in poses]), np.array([p for _, p in poses]))
    return RunResult("", rows, estimate, np.array(ms) if ms else None, {}, seconds, smoother)


def _row(smoother, node, k, has_leg):
    m = smoother.online_parameters(node)
    return {
        "keyframe": k,
        "t": round(node.t, 9),
        "rotation": node.R.tolist(),
        "position": node.p.tolist(),
        "velocity": node.v.tolist(),
        "bias": node.b.tolist(),
        "m_on": None if m is None else m.tolist(),
        "leg_residual": smoother.last_leg_residual.tolist() if has_leg else None,
        "leg_variance": smoother.leg_var.tolist(),
        "factor_costs": {name: v["cost"] for name, v in sorted(smoother.factor_report().items())},
        "iterations": smoother.last_iterations,
    }


def truth_trajectory(stream: SimStream, ticks=None) -> Trajectory:
    ticks = stream.keyframe_ticks() if ticks is None else ticks
    idx = stream.truth_index(ticks)
    return Trajectory(ticks / BASE_RATE, stream.rotation[idx], stream.position[idx])


def metrics_report(estimate: Trajectory, stream: SimStream) -> dict:
    """ATE and RTE over the whole run plus the same figures per terrain label."""
    truth = truth_trajectory(stream)
    ate = compute_ate(estimate, truth)
    t_rte, r_rte = compute_rte(estimate, truth)
    out = {"ate": ate.as_dict(), "rte_trans": t_rte.as_dict(), "rte_rot_deg": r_rte.as_dict(), "segments": {}}
    labels = stream.config.terrain_label(estimate.times)
    for label in sorted(set(labels.tolist())):
        idx = np.nonzero(labels == label)[0]
        if idx.size < 3:
            continue
        seg = {"keyframes": int(idx.size), "ate": compute_ate(estimate.subset(idx), truth.subset(idx)).as_dict()}
        try:
            a, b = compute_rte(estimate.subset(idx), truth.subset(idx))
            seg["rte_trans"], seg["rte_rot_deg"] = a.as_dict(), b.as_dict()
        except ValueError:
            pass
        out["segments"][str(label)] = seg
    return out


def network_motion_errors(stream: SimStream, model: NeuralModel, m_rows: np.ndarray) -> np.ndarray:
    """Per-keyframe translation error of the network's own step, ||(xi - xi_true) dt||.

    ``m_rows`` gives the online parameters used for each window row.
    """
    ticks = stream.keyframe_ticks()
    windows = stack_windows(model.standardizer.apply(keyframe_frames(stream, ticks, tactile=model.tactile)))
    twist, _ = NetworkTwist(model, windows)(np.arange(windows.shape[0]), m_rows)
    truth = reference_twists(stream, ticks)[1:]
    dt = np.diff(ticks)[1:] / BASE_RATE
    return np.linalg.norm((twist[:, 3:] - truth[:, 3:]) * dt[:, None], axis=1)
