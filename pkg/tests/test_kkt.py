"""Assembly of the differentiated optimality system."""

import numpy as np

from mhelearn import kf, kkt, mhe, network, training, weights
from mhelearn.data import generate_synthetic
from mhelearn.model import LinearModel, QuadrotorModel


def solved_linear(seed=0, M=6):
    model = LinearModel.default()
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(model.nx)
    ws = 0.1 * rng.standard_normal((M, model.nw))
    ys = np.array([model.measure(x) for x in mhe.rollout(model, x0, ws)])
    window = mhe.MHEWindow(ys=ys, prior=x0 + 0.05 * rng.standard_normal(model.nx),
                           dt=model.dt)
    theta = rng.standard_normal(weights.N_THETA)
    sched = weights.expand(theta, M)
    sol = mhe.solve(model, window, sched, tol=1e-12)
    assert sol.converged
    return model, window, theta, sched, sol


def solved_quad(seed=0, t=20, M=5):
    ds = generate_synthetic("sine", duration_s=0.25, seed=seed)
    model = QuadrotorModel()
    window = mhe.MHEWindow(ys=ds.y[t - M:t + 1],
                           prior=training.default_prior(ds.y[t - M]),
                           dt=model.dt)
    theta = network.forward(network.kaiming_init(seed), ds.y[t])
    sched = weights.expand(theta, M)
    sol = mhe.solve(model, window, sched, tol=1e-12)
    assert sol.converged
    return model, window, theta, sched, sol


def first_order_pack(model, window, theta, sched, sol):
    dsched = weights.d_schedule(theta, window.horizon)
    return kkt.first_order(model, window, sched, dsched, sol), dsched


def test_linear_model_stage_matrices():
    model, window, theta, sched, sol = solved_linear()
    foc, dsched = first_order_pack(model, window, theta, sched, sol)
    H = model.jacobians(sol.xs[0]).H
    assert foc.horizon == window.horizon
    for k in range(window.horizon + 1):
        # no dynamics curvature on a linear model
        assert np.allclose(foc.Lbar[k], H.T @ sched.R[k] @ H)
    for k in range(window.horizon):
        assert np.array_equal(foc.Lww[k], sched.Q[k])
        assert not np.any(foc.Lxw[k])
        assert np.allclose(
            foc.Lwt[k],
            np.einsum("jab,b->aj", dsched.dQ[k], sol.ws[k]))


def test_forcing_columns_match_manual():
    model, window, theta, sched, sol = solved_quad()
    foc, dsched = first_order_pack(model, window, theta, sched, sol)
    H = foc.H
    for k in range(window.horizon + 1):
        resid = model.measure(sol.xs[k]) - window.ys[k]
        expect = np.einsum("yi,jyz,z->ij", H, dsched.dR[k], resid)
        if k == 0:
            expect += np.einsum("jab,b->aj", dsched.dP,
                                sol.xs[0] - window.prior)
        assert np.allclose(foc.Lxt[k], expect)


def test_full_xx_adds_arrival_weight_once():
    model, window, theta, sched, sol = solved_quad(seed=1)
    foc, _ = first_order_pack(model, window, theta, sched, sol)
    assert np.array_equal(foc.full_xx(0), foc.Lbar[0] + sched.P)
    for k in range(1, window.horizon + 1):
        assert np.array_equal(foc.full_xx(k), foc.Lbar[k])


def test_curvature_enters_state_blocks():
    model, window, theta, sched, sol = solved_quad(seed=2)
    foc, _ = first_order_pack(model, window, theta, sched, sol)
    H = foc.H
    k = window.horizon // 2
    der = model.jacobians(sol.xs[k])
    manual = H.T @ sched.R[k] @ H - der.contract(sol.lams[k])
    assert np.allclose(foc.Lbar[k], manual)
    # duals are nonzero on a window with informative measurements
    assert np.any(sol.lams[:-1])


def second_order_pack(model, window, theta, sched, sol, prior_sens=None):
    foc, dsched = first_order_pack(model, window, theta, sched, sol)
    d2sched = weights.d2_schedule(theta, window.horizon)
    p = theta.size
    if prior_sens is None:
        prior_sens = np.zeros((model.nx, p))
    traj = kf.gradient_trajectory(foc, prior_sens)
    soc = kkt.second_order(model, window, sched, sol, traj, dsched, d2sched,
                           prior_sens)
    return foc, traj, soc


def test_second_order_tensors_symmetric():
    model, window, theta, sched, sol = solved_quad(seed=3)
    _, _, soc = second_order_pack(model, window, theta, sched, sol)
    assert np.allclose(soc.Lxt2, np.swapaxes(soc.Lxt2, 2, 3), atol=1e-12)
    assert np.allclose(soc.Lwt2, np.swapaxes(soc.Lwt2, 2, 3), atol=1e-12)
    assert np.allclose(soc.Llam2, np.swapaxes(soc.Llam2, 2, 3), atol=1e-12)


def test_linear_model_has_no_dual_curvature():
    model, window, theta, sched, sol = solved_linear(seed=4)
    _, _, soc = second_order_pack(model, window, theta, sched, sol)
    assert not np.any(soc.Llam2)


def test_prior_sensitivity_cancels_boundary_pair():
    model, window, theta, sched, sol = solved_quad(seed=5)
    foc, traj, soc_zero = second_order_pack(model, window, theta, sched, sol)
    dsched = weights.d_schedule(theta, window.horizon)
    d2sched = weights.d2_schedule(theta, window.horizon)
    # feeding the solved sensitivity back as the prior's removes the
    # arrival pair term, and only that term
    soc_chained = kkt.second_order(model, window, sched, sol, traj, dsched,
                                   d2sched, traj.X[0])
    pair = np.einsum("lib,bj->ijl", dsched.dP, traj.X[0])
    diff = soc_zero.Lxt2[0] - soc_chained.Lxt2[0]
    assert np.allclose(diff, pair + np.transpose(pair, (0, 2, 1)), atol=1e-12)
    assert np.allclose(soc_zero.Lxt2[1:], soc_chained.Lxt2[1:])
    assert np.allclose(soc_zero.Lwt2, soc_chained.Lwt2)


def test_lift_helpers():
    rng = np.random.default_rng(0)
    mat = rng.standard_normal((3, 3))
    lifted = kkt.lift_matrix(mat, 2)
    assert lifted.shape == (6, 6)
    assert np.array_equal(lifted[:3, :3], mat)
    assert np.array_equal(lifted[3:, 3:], mat)
    assert not np.any(lifted[:3, 3:])

    tensor = rng.standard_normal((3, 2, 2))
    stacked = kkt.lift_forcing(tensor)
    assert stacked.shape == (6, 2)
    for a in range(3):
        for j in range(2):
            for l in range(2):
                assert stacked[j * 3 + a, l] == tensor[a, j, l]
