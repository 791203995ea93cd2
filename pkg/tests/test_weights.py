"""Weight schedule map: values, floor invariant, derivatives."""

import numpy as np
import pytest

from mhelearn import weights
from mhelearn.weights import (
    IDX_GAMMA_Q,
    IDX_GAMMA_R,
    N_THETA,
    SL_P,
    SL_Q,
    SL_R,
    WEIGHT_FLOOR,
    d2_schedule,
    d_schedule,
    expand,
    sigmoid,
)

HORIZON = 10


def test_zero_theta_gives_floor_matrices():
    sched = expand(np.zeros(N_THETA), HORIZON)
    eye = WEIGHT_FLOOR * np.eye(12)
    assert np.array_equal(sched.P, eye)
    for k in range(HORIZON + 1):
        assert np.array_equal(sched.R[k], WEIGHT_FLOOR * np.eye(6))
    for k in range(HORIZON):
        assert np.array_equal(sched.Q[k], WEIGHT_FLOOR * np.eye(6))


def test_min_diagonal_at_least_floor():
    rng = np.random.default_rng(0)
    for _ in range(300):
        theta = 10.0 * rng.standard_normal(N_THETA)
        sched = expand(theta, HORIZON)
        smallest = min(np.diag(sched.P).min(),
                       min(np.diag(r).min() for r in sched.R),
                       min(np.diag(q).min() for q in sched.Q))
        assert smallest >= WEIGHT_FLOOR


def test_matrices_are_diagonal_psd():
    rng = np.random.default_rng(1)
    theta = rng.standard_normal(N_THETA)
    sched = expand(theta, HORIZON)
    for mat in (sched.P, *sched.R, *sched.Q):
        assert np.array_equal(mat, np.diag(np.diag(mat)))
        assert np.all(np.diag(mat) > 0)


def test_discount_makes_older_weights_smaller():
    theta = np.zeros(N_THETA)
    theta[SL_R] = 1.0
    theta[SL_Q] = 1.0
    # raw factors at 0 squash to gamma = 0.5
    sched = expand(theta, HORIZON)
    r_diag = np.array([np.diag(r)[0] for r in sched.R])
    q_diag = np.array([np.diag(q)[0] for q in sched.Q])
    assert np.all(np.diff(r_diag) > 0)  # newest sample weighs most
    assert np.all(np.diff(q_diag) > 0)
    assert np.isclose(r_diag[-1], WEIGHT_FLOOR + 1.0)
    assert np.isclose(r_diag[0], WEIGHT_FLOOR + 0.5 ** HORIZON)


def test_gamma_parameters_act_on_their_own_schedule():
    theta = np.ones(N_THETA)
    base = expand(theta, HORIZON)
    bumped = theta.copy()
    bumped[IDX_GAMMA_R] += 0.5
    sched = expand(bumped, HORIZON)
    assert not np.allclose(sched.R[:HORIZON], base.R[:HORIZON])
    assert np.allclose(sched.Q, base.Q)
    assert np.allclose(sched.P, base.P)
    bumped = theta.copy()
    bumped[IDX_GAMMA_Q] += 0.5
    sched = expand(bumped, HORIZON)
    assert np.allclose(sched.R, base.R)
    assert not np.allclose(sched.Q[:HORIZON - 1], base.Q[:HORIZON - 1])


def test_newest_entries_ignore_the_discount():
    rng = np.random.default_rng(2)
    theta = rng.standard_normal(N_THETA)
    sched = expand(theta, HORIZON)
    assert np.allclose(np.diag(sched.R[-1]),
                       WEIGHT_FLOOR + theta[SL_R] ** 2)
    assert np.allclose(np.diag(sched.Q[-1]),
                       WEIGHT_FLOOR + theta[SL_Q] ** 2)
    assert np.allclose(np.diag(sched.P), WEIGHT_FLOOR + theta[SL_P] ** 2)


def test_sigmoid_range_and_symmetry():
    # stay where the open interval is representable in float64
    zs = np.linspace(-30, 30, 17)
    vals = np.array([sigmoid(z) for z in zs])
    assert np.all((vals > 0) & (vals < 1))
    assert np.allclose(vals + vals[::-1], 1.0)
    assert np.isfinite(sigmoid(1e4)) and np.isfinite(sigmoid(-1e4))


def test_first_derivatives_match_fd():
    rng = np.random.default_rng(3)
    eps = 1e-5
    for _ in range(5):
        theta = rng.standard_normal(N_THETA)
        dsched = d_schedule(theta, HORIZON)
        for j in range(N_THETA):
            shift = np.zeros(N_THETA)
            shift[j] = eps
            plus = expand(theta + shift, HORIZON)
            minus = expand(theta - shift, HORIZON)
            assert np.allclose(dsched.dP[j], (plus.P - minus.P) / (2 * eps),
                               atol=1e-6)
            assert np.allclose(dsched.dR[:, j],
                               (plus.R - minus.R) / (2 * eps), atol=1e-6)
            assert np.allclose(dsched.dQ[:, j],
                               (plus.Q - minus.Q) / (2 * eps), atol=1e-6)


def test_second_derivatives_match_fd_of_first():
    rng = np.random.default_rng(4)
    eps = 1e-5
    for _ in range(3):
        theta = rng.standard_normal(N_THETA)
        d2 = d2_schedule(theta, HORIZON)
        for j in range(N_THETA):
            shift = np.zeros(N_THETA)
            shift[j] = eps
            plus = d_schedule(theta + shift, HORIZON)
            minus = d_schedule(theta - shift, HORIZON)
            assert np.allclose(d2.d2P[j], (plus.dP - minus.dP) / (2 * eps),
                               atol=1e-5)
            assert np.allclose(d2.d2R[:, j],
                               (plus.dR - minus.dR) / (2 * eps), atol=1e-5)
            assert np.allclose(d2.d2Q[:, j],
                               (plus.dQ - minus.dQ) / (2 * eps), atol=1e-5)


def test_second_derivatives_symmetric():
    rng = np.random.default_rng(5)
    theta = rng.standard_normal(N_THETA)
    d2 = d2_schedule(theta, HORIZON)
    assert np.array_equal(d2.d2P, np.transpose(d2.d2P, (1, 0, 2, 3)))
    assert np.array_equal(d2.d2R, np.transpose(d2.d2R, (0, 2, 1, 3, 4)))
    assert np.array_equal(d2.d2Q, np.transpose(d2.d2Q, (0, 2, 1, 3, 4)))


def test_shapes_and_edge_horizon():
    theta = np.zeros(N_THETA)
    sched = expand(theta, 0)
    assert sched.R.shape == (1, 6, 6)
    assert sched.Q.shape == (0, 6, 6)
    assert sched.horizon == 0
    dsched = d_schedule(theta, 0)
    assert dsched.dR.shape == (1, N_THETA, 6, 6)
    assert dsched.dQ.shape == (0, N_THETA, 6, 6)


def test_input_validation():
    with pytest.raises(ValueError):
        expand(np.zeros(25), HORIZON)
    with pytest.raises(ValueError):
        expand(np.zeros(N_THETA), -1)


def test_custom_floor_propagates():
    sched = weights.expand(np.zeros(N_THETA), 3, 0.5)
    assert np.allclose(np.diag(sched.P), 0.5)
    assert np.allclose(np.diag(sched.R[0]), 0.5)
