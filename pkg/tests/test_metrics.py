import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from tactile_lio.evaluation.metrics import (
    NoOverlap,
    TooShort,
    Trajectory,
    associate,
    compute_ate,
    compute_rte,
    umeyama_se3,
)
from tactile_lio.lie import so3_exp


def wander(n=400, dt=0.1, seed=0):
    """A smooth planar-ish walk with a little height wobble."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) * dt
    yaw = np.cumsum(rng.normal(scale=0.02, size=n))
    speed = 0.6 + 0.2 * np.sin(0.3 * t)
    step = np.stack([np.cos(yaw) * speed * dt, np.sin(yaw) * speed * dt, 0.01 * np.cos(t) * dt], axis=1)
    p = np.cumsum(step, axis=0)
    R = so3_exp(np.stack([np.zeros(n), np.zeros(n), yaw], axis=1))
    return Trajectory(t, R, p)


def straight(n=600, dt=0.05, speed=0.5):
    t = np.arange(n) * dt
    p = np.zeros((n, 3))
    p[:, 0] = speed * t
    return Trajectory(t, np.tile(np.eye(3), (n, 1, 1)), p)


def test_ate_identity_is_zero():
    tr = wander()
    ate = compute_ate(tr, tr)
    assert ate.mean < 1e-12 and ate.std < 1e-12


def test_ate_invariant_to_rigid_offset():
    tr = wander(seed=1)
    R = so3_exp(np.array([0.3, -0.2, 1.1]))
    moved = tr.transformed(R, np.array([5.0, -2.0, 0.7]))
    assert compute_ate(moved, tr).mean < 1e-10


def test_ate_matches_brute_force_alignment():
    tr = wander(seed=2)
    rng = np.random.default_rng(3)
    noisy = Trajectory(tr.times, tr.rotation, tr.position + rng.normal(scale=0.1, size=tr.position.shape))
    est = noisy.transformed(so3_exp(np.array([0.1, 0.2, -0.4])), np.array([1.0, 2.0, 0.0]))

    def cost(x):
        R = so3_exp(x[:3])
        return np.sum((est.position @ R.T + x[3:] - tr.position) ** 2)

    best = minimize(cost, np.zeros(6), method="BFGS", options={"gtol": 1e-10})
    R = so3_exp(best.x[:3])
    err = np.linalg.norm(est.position @ R.T + best.x[3:] - tr.position, axis=1)
    ate = compute_ate(est, tr)
    assert abs(ate.mean - err.mean()) < 1e-6
    assert abs(ate.std - err.std()) < 1e-6


def test_umeyama_never_returns_a_reflection():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(50, 3))
    dst = src * np.array([1.0, 1.0, -1.0])
    R, _ = umeyama_se3(src, dst)
    assert np.isclose(np.linalg.det(R), 1.0)


def test_association_tolerance():
    tr = wander(n=50)
    late = Trajectory(tr.times + 1.0e3, tr.rotation, tr.position)
    with pytest.raises(NoOverlap):
        compute_ate(late, tr)
    shifted = Trajectory(tr.times + 0.03, tr.rotation, tr.position)
    ie, it = associate(shifted, tr)
    assert np.array_equal(ie, it)


def test_rte_identity_is_zero():
    tr = wander()
    t, r = compute_rte(tr, tr)
    assert t.mean < 1e-12 and r.mean < 1e-9


def test_rte_one_percent_scale_error():
    tr = straight()
    est = Trajectory(tr.times, tr.rotation, 1.01 * tr.position)
    t, _ = compute_rte(est, tr)
    # segments end at the first sample past 1 m, so they are at most one step (0.025 m) long
    assert abs(t.mean - 0.01) < 0.01 * 0.025 + 1e-12


def test_rte_heading_drift_one_degree_per_metre():
    tr = straight()
    arc = tr.position[:, 0]
    drift = so3_exp(np.stack([np.zeros_like(arc), np.zeros_like(arc), np.radians(arc)], axis=1))
    est = Trajectory(tr.times, tr.rotation @ drift, tr.position)
    _, r = compute_rte(est, tr)
    assert abs(r.mean - 1.0) < 0.03


def test_rte_too_short():
    tr = straight(n=10)
    with pytest.raises(TooShort):
        compute_rte(tr, tr)


def test_timestamps_must_increase():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), np.tile(np.eye(3), (2, 1, 1)), np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3),
    st.lists(st.floats(-50.0, 50.0), min_size=3, max_size=3),
)
def test_metrics_invariant_to_joint_rigid_transform(rotvec, shift):
    tr = wander(n=200, seed=5)
    rng = np.random.default_rng(6)
    est = Trajectory(
        tr.times,
        tr.rotation @ so3_exp(rng.normal(scale=0.01, size=(200, 3))),
        tr.position + rng.normal(scale=0.05, size=(200, 3)),
    )
    R, t = so3_exp(np.array(rotvec)), np.array(shift)
    a, b = est.transformed(R, t), tr.transformed(R, t)
    assert abs(compute_ate(a, b).mean - compute_ate(est, tr).mean) < 1e-9
    (t0, r0), (t1, r1) = compute_rte(est, tr), compute_rte(a, b)
    assert abs(t0.mean - t1.mean) < 1e-9 and abs(r0.mean - r1.mean) < 1e-7
