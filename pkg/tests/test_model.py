"""Dynamics, Jacobians and curvature of the process models."""

import numpy as np
import pytest

from mhelearn.model import (
    DIST_IDX,
    LinearModel,
    QuadrotorModel,
    QuadrotorParams,
)


def fd_jacobian(fn, x, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    out0 = fn(x)
    jac = np.empty((out0.size, x.size))
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = eps
        jac[:, i] = (fn(x + dx) - fn(x - dx)) / (2 * eps)
    return jac


def test_step_jacobians_match_fd():
    model = QuadrotorModel()
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.standard_normal(12)
        w = rng.standard_normal(6)
        der = model.jacobians(x)
        F_fd = fd_jacobian(lambda xx: model.step(xx, w), x)
        G_fd = fd_jacobian(lambda ww: model.step(x, ww), w)
        assert np.allclose(der.F, F_fd, atol=1e-7)
        assert np.allclose(der.G, G_fd, atol=1e-10)


def test_measurement_selects_velocity_and_rates():
    model = QuadrotorModel()
    x = np.arange(12.0)
    y = model.measure(x)
    assert np.array_equal(y, np.r_[x[0:3], x[6:9]])
    der = model.jacobians(x)
    assert np.array_equal(der.H @ x, y)


def test_curvature_matches_fd_of_jacobian():
    model = QuadrotorModel()
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.standard_normal(12)
        lam = rng.standard_normal(12)
        analytic = model.curvature_contraction(x, lam)

        def lam_dot_step_grad(xx):
            return model.jacobians(xx).F.T @ lam

        fd = fd_jacobian(lam_dot_step_grad, x)
        assert np.allclose(analytic, analytic.T, atol=1e-12)
        assert np.allclose(analytic, fd, atol=1e-6)


def test_fxx_only_in_body_rate_rows():
    model = QuadrotorModel()
    der = model.jacobians(np.zeros(12))
    nonzero_rows = np.where(np.any(der.fxx != 0.0, axis=(1, 2)))[0]
    assert set(nonzero_rows) <= {6, 7, 8}


def test_hover_is_equilibrium():
    params = QuadrotorParams()
    model = QuadrotorModel(params)
    x = np.zeros(12)
    x[5] = params.mass * params.gravity  # vertical force balances gravity
    dx = model.continuous_dynamics(x, np.zeros(6))
    assert np.allclose(dx, 0.0, atol=1e-12)


def test_disturbance_states_are_random_walks():
    model = QuadrotorModel()
    x = np.zeros(12)
    w = np.arange(1.0, 7.0)
    nxt = model.step(x, w)
    assert np.allclose(nxt[DIST_IDX], model.dt * w)


def test_state_validation():
    model = QuadrotorModel()
    with pytest.raises(ValueError):
        model.step(np.zeros(11), np.zeros(6))
    with pytest.raises(ValueError):
        model.step(np.full(12, np.nan), np.zeros(6))
    with pytest.raises(ValueError):
        QuadrotorModel(dt=0.0)
    with pytest.raises(ValueError):
        QuadrotorParams(mass=-1.0)


def test_linear_model_interface():
    model = LinearModel.default()
    assert (model.nx, model.nw, model.ny) == (12, 6, 6)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(12)
    w = rng.standard_normal(6)
    assert np.allclose(model.step(x, w), model.A @ x + model.B @ w)
    assert np.allclose(model.measure(x), model.C @ x)
    der = model.jacobians(x)
    assert np.array_equal(der.F, model.A)
    assert np.array_equal(der.G, model.B)
    assert not np.any(der.fxx)
    assert not np.any(model.curvature_contraction(x, rng.standard_normal(12)))


def test_linear_model_shape_validation():
    with pytest.raises(ValueError):
        LinearModel(np.eye(3), np.zeros((2, 1)), np.zeros((1, 3)))
