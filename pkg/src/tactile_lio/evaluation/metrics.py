"""Trajectory error metrics: aligned ATE and per-distance RTE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..lie import so3_log


class NoOverlap(ValueError):
    pass


class TooShort(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray  # (N,)
    rotation: np.ndarray  # (N,3,3)
    position: np.ndarray  # (N,3)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return self.times.size

    def subset(self, idx) -> "Trajectory":
        return Trajectory(self.times[idx], self.rotation[idx], self.position[idx])

    def transformed(self, R, t) -> "Trajectory":
        """Left-multiply every pose by the rigid transform (R, t)."""
        return Trajectory(self.times, R @ self.rotation, self.position @ R.T + t)


@dataclass(frozen=True)
class Stat:
    mean: float
    std: float

    def as_dict(self):
        return {"mean": self.mean, "std": self.std}


def associate(est: Trajectory, ref: Trajectory, tolerance: float = 0.05):
    """Nearest-timestamp pairs within ``tolerance`` seconds."""
    j = np.clip(np.searchsorted(ref.times, est.times), 0, ref.times.size - 1)
    prev = np.maximum(j - 1, 0)
    use_prev = np.abs(est.times - ref.times[prev]) <= np.abs(est.times - ref.times[j])
    j = np.where(use_prev, prev, j)
    ok = np.abs(est.times - ref.times[j]) <= tolerance
    if not ok.any():
        raise NoOverlap("no timestamps within the association tolerance")
    return np.nonzero(ok)[0], j[ok]


def umeyama_se3(src: np.ndarray, dst: np.ndarray):
    """Rotation and translation minimizing sum ||dst - (R src + t)||^2 (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / src.shape[0]
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    R = u @ s @ vt
    return R, mu_d - R @ mu_s


def compute_ate(estimate: Trajectory, truth: Trajectory, tolerance: float = 0.05) -> Stat:
    ie, it = associate(estimate, truth, tolerance)
    src, dst = estimate.position[ie], truth.position[it]
    R, t = umeyama_se3(src, dst)
    err = np.linalg.norm(src @ R.T + t - dst, axis=1)
    return Stat(float(err.mean()), float(err.std()))


def segment_pairs(position: np.ndarray, length: float):
    """For every start index, the first index whose path length reaches ``length``."""
    step = np.linalg.norm(np.diff(position, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(step)])
    end = np.searchsorted(arc, arc + length - 1e-12, side="left")
    ok = end < arc.size
    return np.nonzero(ok)[0], end[ok]


def relative_errors(estimate: Trajectory, truth: Trajectory, length: float = 1.0, tolerance: float = 0.05):
    ie, it = associate(estimate, truth, tolerance)
    est, ref = estimate.subset(ie), truth.subset(it)
    i, j = segment_pairs(ref.position, length)
    if i.size == 0:
        raise TooShort(f"no ground-truth segment of {length} m")

    def rel(traj):
        Rt = np.swapaxes(traj.rotation[i], 1, 2)
        return Rt @ traj.rotation[j], np.einsum("nij,nj->ni", Rt, traj.position[j] - traj.position[i])

    Re, te = rel(est)
    Rr, tr = rel(ref)
    Rrt = np.swapaxes(Rr, 1, 2)
    dR = Rrt @ Re
    dt = np.einsum("nij,nj->ni", Rrt, te - tr)
    trans = np.linalg.norm(dt, axis=1)
    rot = np.degrees(np.linalg.norm(so3_log(dR), axis=1))
    return trans, rot


def compute_rte(estimate: Trajectory, truth: Trajectory, length: float = 1.0, tolerance: float = 0.05):
    trans, rot = relative_errors(estimate, truth, length, tolerance)
    return Stat(float(trans.mean()), float(trans.std())), Stat(float(rot.mean()), float(rot.std()))
