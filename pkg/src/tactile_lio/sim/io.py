"""JSONL stream format (schema ``tactile-lio/stream/1``).

Line 1 is a header ``{"schema", "base_rate", "config"}``. Every following
line is one frame on the 1500 Hz base clock::

    tick, t                  integer base tick and seconds
    truth   {R (9, row-major), p, v, omega, contact}
    imu     {accel, gyro, bias_accel, bias_gyro} or null      (60 Hz)
    joints  {q, dq, tau, foot_force, foot_force_true,
             slip_region, payload} or null                    (500 Hz)
    lidar   {R, p, observed (6 bools, Rx..Tz)} or null        (10 Hz)

Floats are written with ``repr`` precision, so a write/read cycle is exact.
"""

from __future__ import annotations

import json

import numpy as np

from .config import ScenarioConfig
from .gait import BASE_RATE
from .sensors import LidarObservations, SimStream

STREAM_SCHEMA = "tactile-lio/stream/1"


def _f(a):
    return [float(x) for x in np.ravel(a)]


def iter_lines(stream: SimStream):
    yield json.dumps({"schema": STREAM_SCHEMA, "base_rate": BASE_RATE, "config": stream.config.to_dict()}, sort_keys=True)
    n = stream.ticks.size
    joint_at = np.full(n, -1)
    joint_at[stream.joint_index] = np.arange(stream.joint_index.size)
    imu_at = np.full(n, -1)
    imu_at[stream.imu_index] = np.arange(stream.imu_index.size)
    lidar_at = {}
    if stream.lidar is not None:
        lidar_at = {int(t): i for i, t in enumerate(stream.lidar.ticks)}
    tau, force = stream._torques, stream._foot_force
    for r in range(n):
        tick = int(stream.ticks[r])
        frame = {
            "tick": tick,
            "t": tick / BASE_RATE,
            "truth": {
                "R": _f(stream.rotation[r]),
                "p": _f(stream.position[r]),
                "v": _f(stream.velocity[r]),
                "omega": _f(stream.omega[r]),
                "contact": [bool(c) for c in stream.contact[r]],
            },
            "imu": None,
            "joints": None,
            "lidar": None,
        }
        if imu_at[r] >= 0:
            k = imu_at[r]
            frame["imu"] = {
                "accel": _f(stream.accel[k]),
                "gyro": _f(stream.gyro[k]),
                "bias_accel": _f(stream.bias_accel[k]),
                "bias_gyro": _f(stream.bias_gyro[k]),
            }
        if joint_at[r] >= 0:
            j = joint_at[r]
            frame["joints"] = {
                "q": _f(stream.angles[j]),
                "dq": _f(stream.rates[j]),
                "tau": _f(tau[j]),
                "foot_force": _f(force[j]),
                "foot_force_true": _f(stream.foot_force_true[j]),
                "slip_region": bool(stream.slip_region[j]),
                "payload": float(stream.payload[j]),
            }
        if tick in lidar_at:
            m = lidar_at[tick]
            frame["lidar"] = {
                "R": _f(stream.lidar.rotation[m]),
                "p": _f(stream.lidar.position[m]),
                "observed": [bool(x) for x in stream.lidar.observed[m]],
            }
        yield json.dumps(frame, sort_keys=True)


def write_stream(stream: SimStream, path) -> None:
    with open(path, "w") as fh:
        for line in iter_lines(stream):
            fh.write(line)
            fh.write("\n")


def read_stream(path) -> SimStream:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != STREAM_SCHEMA:
            raise ValueError(f"not a {STREAM_SCHEMA} file: {path}")
        if header.get("base_rate") != BASE_RATE:
            raise ValueError("unsupported base rate")
        frames = [json.loads(line) for line in fh if line.strip()]
    config = ScenarioConfig.from_dict(header["config"])

    ticks = np.array([f["tick"] for f in frames], dtype=int)
    truth = [f["truth"] for f in frames]
    joint_rows = [i for i, f in enumerate(frames) if f["joints"] is not None]
    imu_rows = [i for i, f in enumerate(frames) if f["imu"] is not None]
    lidar_rows = [i for i, f in enumerate(frames) if f["lidar"] is not None]

    def stack(rows, group, key, shape=None):
        arr = np.array([frames[i][group][key] for i in rows], dtype=float)
        return arr.reshape((len(rows),) + shape) if shape else arr

    lidar = None
    if lidar_rows:
        lidar = LidarObservations(
            ticks[lidar_rows],
            stack(lidar_rows, "lidar", "R", (3, 3)),
            stack(lidar_rows, "lidar", "p"),
            np.array([frames[i]["lidar"]["observed"] for i in lidar_rows], dtype=bool),
        )
    return SimStream(
        config=config,
        ticks=ticks,
        rotation=np.array([t["R"] for t in truth], dtype=float).reshape(-1, 3, 3),
        position=np.array([t["p"] for t in truth], dtype=float),
        velocity=np.array([t["v"] for t in truth], dtype=float),
        omega=np.array([t["omega"] for t in truth], dtype=float),
        contact=np.array([t["contact"] for t in truth], dtype=bool),
        joint_index=np.array(joint_rows, dtype=int),
        angles=stack(joint_rows, "joints", "q"),
        rates=stack(joint_rows, "joints", "dq"),
        _torques=stack(joint_rows, "joints", "tau"),
        _foot_force=stack(joint_rows, "joints", "foot_force"),
        foot_force_true=stack(joint_rows, "joints", "foot_force_true"),
        slip_region=np.array([frames[i]["joints"]["slip_region"] for i in joint_rows], dtype=bool),
        payload=np.array([frames[i]["joints"]["payload"] for i in joint_rows], dtype=float),
        imu_index=np.array(imu_rows, dtype=int),
        accel=stack(imu_rows, "imu", "accel"),
        gyro=stack(imu_rows, "imu", "gyro"),
        bias_accel=stack(imu_rows, "imu", "bias_accel"),
        bias_gyro=stack(imu_rows, "imu", "bias_gyro"),
        lidar=lidar,
    )
