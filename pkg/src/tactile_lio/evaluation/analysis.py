"""Post-run analysis: a planar embedding of m_on histories and motion-error time series."""

from __future__ import annotations

import csv
import io

import numpy as np


class DegenerateHistory(ValueError):
    pass


def _pca_basis(X: np.ndarray, strict: bool):
    if X.shape[0] < 3:
        raise DegenerateHistory("an embedding needs at least three history points")
    if not np.all(np.isfinite(X)):
        raise DegenerateHistory("history contains non-finite values")
    mean = X.mean(axis=0)
    C = X - mean
    _, s, Vt = np.linalg.svd(C, full_matrices=False)
    scale = max(float(np.max(np.abs(X))), 1.0)
    if s.size == 0 or s[0] <= 1e-12 * scale * np.sqrt(X.shape[0]):
        if strict:
            raise DegenerateHistory("the history has zero variance")
        return mean, np.zeros((2, X.shape[1]))
    basis = np.zeros((2, X.shape[1]))
    for i in range(min(2, s.size)):
        if s[i] <= 1e-12 * s[0]:
            break  # rank-deficient: leave the remaining axis at zero
        v = Vt[i]
        # sign convention: the largest-magnitude loading is positive
        basis[i] = v if v[np.argmax(np.abs(v))] > 0 else -v
    return mean, basis


def embed_online_params(history, strict: bool = False) -> np.ndarray:
    """Project an (n, d) m_on history onto its two principal directions.

    A constant history maps every point to the origin; with ``strict`` it
    raises DegenerateHistory instead.
    """
    X = np.asarray(history, dtype=float)
    mean, basis = _pca_basis(X, strict)
    return (X - mean) @ basis.T


def embed_sessions(histories, strict: bool = False) -> list:
    """Embed several sessions in one shared basis so their paths are comparable."""
    arrays = [np.asarray(h, dtype=float) for h in histories]
    mean, basis = _pca_basis(np.vstack(arrays), strict)
    return [(X - mean) @ basis.T for X in arrays]


def path_length(points: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


def endpoint_ratio(a: np.ndarray, b: np.ndarray) -> float:
    """Endpoint distance of two embedded paths over their mean path length."""
    mean_len = 0.5 * (path_length(a) + path_length(b))
    if mean_len <= 0:
        return 0.0 if np.allclose(a[-1], b[-1]) else np.inf
    return float(np.linalg.norm(a[-1] - b[-1]) / mean_len)


def moving_average(times, values, window: float = 1.0) -> np.ndarray:
    """Trailing mean over samples with t in (t_i - window, t_i]."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    lo = np.searchsorted(times, times - window, side="right")
    hi = np.arange(1, times.size + 1)
    return (csum[hi] - csum[lo]) / (hi - lo)


def residual_history(times, online, frozen, window: float = 1.0) -> dict:
    """Per-keyframe network-only motion errors and their trailing averages."""
    return {
        "t": np.asarray(times, dtype=float),
        "online": np.asarray(online, dtype=float),
        "online_avg": moving_average(times, online, window),
        "frozen": np.asarray(frozen, dtype=float),
        "frozen_avg": moving_average(times, frozen, window),
    }


def history_csv(history: dict) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    keys = list(history)
    writer.writerow(keys)
    for row in zip(*(history[k] for k in keys)):
        writer.writerow([f"{v:.9g}" for v in row])
    return out.getvalue()
