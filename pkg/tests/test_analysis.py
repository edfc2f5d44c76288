import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tactile_lio.evaluation.analysis import (
    DegenerateHistory,
    embed_online_params,
    embed_sessions,
    endpoint_ratio,
    history_csv,
    moving_average,
    path_length,
    residual_history,
)


def test_constant_history_collapses_to_one_point():
    pts = embed_online_params(np.tile(np.arange(168.0), (10, 1)))
    assert np.all(pts == pts[0])
    with pytest.raises(DegenerateHistory):
        embed_online_params(np.ones((10, 168)), strict=True)


def test_too_short_history_is_rejected():
    with pytest.raises(DegenerateHistory):
        embed_online_params(np.random.default_rng(0).normal(size=(2, 168)))


def test_linear_drift_embeds_on_a_line():
    rng = np.random.default_rng(1)
    a, d = rng.normal(size=168), rng.normal(size=168)
    t = np.linspace(0.0, 3.0, 40)
    pts = embed_online_params(a + t[:, None] * d)
    # collinearity: every point lies on the line through the first and last
    u = (pts[-1] - pts[0]) / np.linalg.norm(pts[-1] - pts[0])
    off = (pts - pts[0]) - np.outer((pts - pts[0]) @ u, u)
    assert np.max(np.abs(off)) < 1e-9
    # distances along the line are the true parameter distances
    assert path_length(pts) == pytest.approx(3.0 * np.linalg.norm(d), rel=1e-9)


def test_sign_convention_makes_the_largest_loading_positive():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(30, 5)) * np.array([5.0, 2.0, 0.1, 0.1, 0.1])
    pts = embed_online_params(X)
    flipped = embed_online_params(-X)
    # negating the data must not flip the embedding's orientation convention
    C = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(C, full_matrices=False)
    for i in range(2):
        v = Vt[i] * np.sign(Vt[i][np.argmax(np.abs(Vt[i]))])
        assert np.allclose(pts[:, i], C @ v, atol=1e-12)
        assert np.allclose(flipped[:, i], -C @ v, atol=1e-12)


def test_shared_basis_keeps_identical_sessions_together():
    rng = np.random.default_rng(3)
    X = np.cumsum(rng.normal(size=(50, 168)), axis=0)
    a, b = embed_sessions([X, X.copy()])
    assert np.array_equal(a, b)
    assert endpoint_ratio(a, b) == 0.0


def test_endpoint_ratio_direct():
    a = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    b = np.array([[0.0, 1.0], [2.0, 1.0]])
    assert endpoint_ratio(a, b) == pytest.approx(1.0 / 2.0)


def brute_moving_average(times, values, window):
    return np.array([values[(times > t - window) & (times <= t)].mean() for t in times])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=40), st.floats(0.05, 3.0))
def test_moving_average_matches_brute_force(values, window):
    times = 0.1 * np.arange(len(values))
    values = np.array(values)
    assert np.allclose(moving_average(times, values, window), brute_moving_average(times, values, window), atol=1e-9)


def test_residual_history_csv_layout():
    t = 0.1 * np.arange(1, 21)
    hist = residual_history(t, np.ones(20), 2.0 * np.ones(20))
    text = history_csv(hist)
    lines = text.splitlines()
    assert lines[0] == "t,online,online_avg,frozen,frozen_avg"
    assert len(lines) == 21
    assert lines[1] == "0.1,1,1,2,2"
