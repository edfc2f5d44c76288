"""Online per-axis variance of the leg-factor residual."""

from __future__ import annotations

from collections import deque

import numpy as np

VARIANCE_FLOOR = 1e-8


class LegResidualWindow:
    """Ring buffer of the last ``capacity`` residuals with per-axis reliability flags.

    An axis sample counts only if that axis was observed by the LiDAR in the
    keyframe that produced it. The variance is the zero-mean sum of squares
    over the reliable samples divided by (count - 1); axes with fewer than two
    reliable samples keep their previous value.
    """

    def __init__(self, capacity: int = 15, floor: float = VARIANCE_FLOOR):
        if capacity < 2:
            raise ValueError("the residual window needs room for two samples")
        self.capacity = capacity
        self.floor = floor
        self._res = deque(maxlen=capacity)
        self._ok = deque(maxlen=capacity)

    def __len__(self):
        return len(self._res)

    def push(self, residual, reliable) -> None:
        r = np.asarray(residual, dtype=float).reshape(6)
        ok = np.asarray(reliable, dtype=bool).reshape(6)
        self._res.append(r.copy())
        self._ok.append(ok.copy())

    def variances(self, previous) -> np.ndarray:
        previous = np.asarray(previous, dtype=float).reshape(6)
        if not self._res:
            return previous.copy()
        r = np.array(self._res)
        ok = np.array(self._ok)
        count = ok.sum(axis=0)
        ss = np.sum(np.where(ok, r * r, 0.0), axis=0)
        fresh = np.maximum(ss / np.maximum(count - 1, 1), self.floor)
        return np.where(count >= 2, fresh, previous)


def update_leg_covariance(window: LegResidualWindow, previous) -> np.ndarray:
    """Diagonal 6x6 covariance from the window, falling back per axis to ``previous``."""
    return np.diag(window.variances(np.diag(np.asarray(previous, dtype=float))))
