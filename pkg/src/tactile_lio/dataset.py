"""Keyframe-rate network inputs and references extracted from a simulated stream."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import se3_log
from .network import FRAME_DIM, TACTILE, Standardizer, stack_windows
from .sim.gait import BASE_RATE
from .sim.sensors import CONTACT_FORCE_THRESHOLD, SimStream


def latest_at_or_before(sample_ticks: np.ndarray, ticks: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(sample_ticks, ticks, side="right") - 1
    if np.any(idx < 0):
        raise ValueError("no sample at or before the requested tick")
    return idx


def keyframe_frames(stream: SimStream, ticks: np.ndarray, tactile: bool = True) -> np.ndarray:
    """34-channel frames on the given ticks; tactile slots stay zero when disabled."""
    ticks = np.asarray(ticks)
    ji = latest_at_or_before(stream.joint_ticks, ticks)
    ii = latest_at_or_before(stream.imu_ticks, ticks)
    out = np.zeros((ticks.size, FRAME_DIM))
    out[:, 0:3] = stream.accel[ii]
    out[:, 3:6] = stream.gyro[ii]
    out[:, 6:18] = stream.angles[ji]
    if tactile:
        out[:, 18:30] = stream.torques()[ji]
        out[:, 30:34] = stream.foot_forces()[ji]
    return out


def reference_twists(stream: SimStream, ticks: np.ndarray) -> np.ndarray:
    """log(T_{i-1}^-1 T_i) / dt for each consecutive keyframe pair; row i-1 ends at tick i."""
    idx = stream.truth_index(ticks)
    R, p = stream.rotation[idx], stream.position[idx]
    Rt = np.swapaxes(R[:-1], 1, 2)
    dR = Rt @ R[1:]
    dp = np.einsum("nij,nj->ni", Rt, p[1:] - p[:-1])
    dt = np.diff(ticks) / BASE_RATE
    return se3_log(dR, dp) / dt[:, None]


def reference_contacts(stream: SimStream, ticks: np.ndarray) -> np.ndarray:
    """Contacts from thresholding the noise-free foot forces."""
    ji = latest_at_or_before(stream.joint_ticks, ticks)
    return (stream.foot_force_true[ji] > CONTACT_FORCE_THRESHOLD).astype(float)


@dataclass
class TrainingSequence:
    """Raw keyframe frames plus references; window row k ends at keyframe k+2."""

    name: str
    terrain: str
    payload: str
    frames: np.ndarray  # (K, 34) raw
    twists: np.ndarray  # (K-2, 6)
    contacts: np.ndarray  # (K-2, 4)
    slip: np.ndarray  # (K-2,) bool, interval touched a slipping region
    ticks: np.ndarray  # (K,)

    def windows(self, standardizer: Standardizer) -> np.ndarray:
        return stack_windows(standardizer.apply(self.frames))

    def split(self, holdout: float = 0.1):
        """Index arrays (train, validation) with the last contiguous fraction held out."""
        n = self.twists.shape[0]
        cut = int(round(n * (1.0 - holdout)))
        return np.arange(cut), np.arange(cut, n)

    def without_tactile(self) -> "TrainingSequence":
        frames = self.frames.copy()
        frames[:, TACTILE] = 0.0
        return TrainingSequence(self.name, self.terrain, self.payload, frames, self.twists, self.contacts, self.slip, self.ticks)


def build_sequence(stream: SimStream, name: str, terrain: str = "", payload: str = "", tactile: bool = True) -> TrainingSequence:
    ticks = stream.keyframe_ticks()
    frames = keyframe_frames(stream, ticks, tactile)
    twists = reference_twists(stream, ticks)[1:]
    contacts = reference_contacts(stream, ticks)[2:]
    ji = stream.joint_ticks
    count = np.concatenate([[0], np.cumsum(stream.slip_region)])
    lo = np.searchsorted(ji, ticks[1:-1], side="right")
    hi = np.searchsorted(ji, ticks[2:], side="right")
    region = count[hi] > count[lo]
    return TrainingSequence(name, terrain, payload, frames, twists, contacts, region, ticks)
