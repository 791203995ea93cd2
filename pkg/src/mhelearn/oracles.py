"""Independent reference implementations for derivative verification.

Everything here is deliberately slow and direct: a dense factorization of
the stacked stationarity system, finite differences pushed through the
estimator, and a closed-form least-squares derivative for the linear test
model.  The fast recursive solver is checked against these; none of this
code is used on the hot path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kf, kkt, mhe, network, weights
from .model import LinearModel


# ---------------------------------------------------------------------------
# dense stacked solve
# ---------------------------------------------------------------------------

def dense_trajectory(foc, rhs_x, rhs_w, prior, rhs_lam=None):
    """Solve the differential stationarity system by one dense factorization.

    Takes the same stage coefficients as the recursive solver: ``foc``
    carries ``F, G, Lbar, Lxw, Lww, P``; ``rhs_x``/``rhs_w`` are the
    parameter couplings; ``prior`` the arrival-channel forcing; ``rhs_lam``
    the optional dynamics-level forcing of the second-order pass.  Unknowns
    are stacked per step as (X_k, W_k, Lam_k) and solved in one shot.
    """
    F = np.asarray(foc.F, dtype=np.float64)
    G = np.asarray(foc.G, dtype=np.float64)
    Lbar = np.asarray(foc.Lbar, dtype=np.float64)
    Lxw = np.asarray(foc.Lxw, dtype=np.float64)
    Lww = np.asarray(foc.Lww, dtype=np.float64)
    P = np.asarray(foc.P, dtype=np.float64)
    rhs_x = np.asarray(rhs_x, dtype=np.float64)
    rhs_w = np.asarray(rhs_w, dtype=np.float64)
    M, n, q = G.shape
    m = rhs_x.shape[2]
    D = np.zeros((M, n, m)) if rhs_lam is None else np.asarray(rhs_lam,
                                                               dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)

    nz = (M + 1) * n + M * q + M * n
    A = np.zeros((nz, nz))
    b = np.zeros((nz, m))

    def xi(k):
        return k * (2 * n + q)

    def wi(k):
        return xi(k) + n

    def li(k):
        return xi(k) + n + q

    row = 0
    # state stationarity, first step carries the arrival term
    A[row:row + n, xi(0):xi(0) + n] = Lbar[0] + P
    if M > 0:
        A[row:row + n, wi(0):wi(0) + q] = Lxw[0]
        A[row:row + n, li(0):li(0) + n] = -F[0].T
    b[row:row + n] = P @ prior - rhs_x[0]
    row += n
    for k in range(1, M):
        A[row:row + n, li(k - 1):li(k - 1) + n] = np.eye(n)
        A[row:row + n, xi(k):xi(k) + n] = Lbar[k]
        A[row:row + n, wi(k):wi(k) + q] = Lxw[k]
        A[row:row + n, li(k):li(k) + n] = -F[k].T
        b[row:row + n] = -rhs_x[k]
        row += n
    if M > 0:
        A[row:row + n, li(M - 1):li(M - 1) + n] = np.eye(n)
        A[row:row + n, xi(M):xi(M) + n] = Lbar[M]
        b[row:row + n] = -rhs_x[M]
        row += n
    # noise stationarity
    for k in range(M):
        A[row:row + q, xi(k):xi(k) + n] = Lxw[k].T
        A[row:row + q, wi(k):wi(k) + q] = Lww[k]
        A[row:row + q, li(k):li(k) + n] = -G[k].T
        b[row:row + q] = -rhs_w[k]
        row += q
    # linearized dynamics
    for k in range(M):
        A[row:row + n, xi(k + 1):xi(k + 1) + n] = np.eye(n)
        A[row:row + n, xi(k):xi(k) + n] = -F[k]
        A[row:row + n, wi(k):wi(k) + q] = -G[k]
        b[row:row + n] = -D[k]
        row += n

    Z = np.linalg.solve(A, b)
    X = np.stack([Z[xi(k):xi(k) + n] for k in range(M + 1)])
    W = (np.stack([Z[wi(k):wi(k) + q] for k in range(M)])
         if M > 0 else np.zeros((0, q, m)))
    Lam = (np.stack([Z[li(k):li(k) + n] for k in range(M)] + [np.zeros((n, m))])
           if M > 0 else np.zeros((1, n, m)))
    return X, W, Lam


def random_stage_coeffs(n, q, m, M, seed=0, couple_xw=True):
    """Random well-conditioned stage coefficients plus forcings.

    Returns ``(foc, rhs_x, rhs_w, prior, rhs_lam)`` sized for a width-``m``
    solve; useful for exercising both solver forms at small sizes.
    """
    rng = np.random.default_rng(seed)

    def spd(size):
        a = rng.standard_normal((size, size))
        return a @ a.T + size * np.eye(size)

    foc = kkt.FirstOrderCoeffs(
        P=spd(n) / n,
        Lbar=np.stack([spd(n) for _ in range(M + 1)]),
        Lxw=rng.standard_normal((M, n, q)) * (0.3 if couple_xw else 0.0),
        Lww=np.stack([spd(q) for _ in range(M)]),
        Lxt=np.zeros((M + 1, n, m)),
        Lwt=np.zeros((M, q, m)),
        F=np.eye(n) + 0.1 * rng.standard_normal((M, n, n)),
        G=0.5 * rng.standard_normal((M, n, q)),
        H=np.zeros((M + 1, 1, n)),
    )
    rhs_x = rng.standard_normal((M + 1, n, m))
    rhs_w = rng.standard_normal((M, q, m))
    prior = rng.standard_normal((n, m))
    rhs_lam = rng.standard_normal((M, n, m))
    return foc, rhs_x, rhs_w, prior, rhs_lam


# ---------------------------------------------------------------------------
# finite differences through the estimator
# ---------------------------------------------------------------------------

FD_EPS_GRAD = 1e-4
FD_EPS_HESS = 1e-4
# reference solves must sit far below the difference quotient's scale,
# otherwise solver slack masquerades as derivative error
FD_SOLVE_TOL = 1e-13
FD_SOLVE_MAX_ITER = 80


def _resolve_states(model, window, theta, warm, tol):
    sched = weights.expand(theta, window.horizon)
    sol = mhe.solve(model, window, sched, warm_start=warm, tol=tol,
                    max_iter=FD_SOLVE_MAX_ITER)
    return sol


def fd_state_gradient(model, window, theta, prior_sens=None,
                      eps: float = FD_EPS_GRAD):
    """Central difference of the optimal states w.r.t. each tuning entry.

    ``prior_sens`` (n, 26) shifts the arrival prior along with the
    parameter, matching the chained semantics of the analytic pass.
    Returns an array shaped like the gradient trajectory ``X``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    base = _resolve_states(model, window, theta, None, FD_SOLVE_TOL)
    warm = mhe.WarmStart(base.xs, base.ws)
    M = window.horizon
    out = np.empty((M + 1, model.nx, theta.size))
    for j in range(theta.size):
        shift = np.zeros(theta.size)
        shift[j] = eps
        wplus = window if prior_sens is None else mhe.MHEWindow(
            ys=window.ys, prior=window.prior + eps * prior_sens[:, j],
            dt=window.dt)
        wminus = window if prior_sens is None else mhe.MHEWindow(
            ys=window.ys, prior=window.prior - eps * prior_sens[:, j],
            dt=window.dt)
        xp = _resolve_states(model, wplus, theta + shift, warm, FD_SOLVE_TOL).xs
        xm = _resolve_states(model, wminus, theta - shift, warm, FD_SOLVE_TOL).xs
        out[:, :, j] = (xp - xm) / (2.0 * eps)
    return out


def analytic_state_gradient(model, window, theta, prior_sens=None,
                            solve_tol: float = FD_SOLVE_TOL):
    """Gradient trajectory from the recursive solver, for comparison."""
    theta = np.asarray(theta, dtype=np.float64)
    sol = _resolve_states(model, window, theta, None, solve_tol)
    sched = weights.expand(theta, window.horizon)
    dsched = weights.d_schedule(theta, window.horizon)
    foc = kkt.first_order(model, window, sched, dsched, sol)
    if prior_sens is None:
        prior_sens = np.zeros((model.nx, theta.size))
    return kf.gradient_trajectory(foc, prior_sens), sol, foc


def fd_gradient_error(model, window, theta, eps: float = FD_EPS_GRAD):
    """Worst relative error of the analytic gradient trajectory vs FD."""
    traj, _, _ = analytic_state_gradient(model, window, theta)
    ref = fd_state_gradient(model, window, theta, eps=eps)
    return _worst_rel(traj.X, ref, atol=1e-6, rtol=1e-3), traj, ref


def fd_hessian_error(model, window, theta, eps: float = FD_EPS_HESS):
    """Worst relative error of the analytic Hessian trajectory vs FD.

    The reference is a central difference of the analytic gradient pass,
    which keeps the comparison clean of solver noise at second order.
    """
    theta = np.asarray(theta, dtype=np.float64)
    traj, sol, foc = analytic_state_gradient(model, window, theta)
    sched = weights.expand(theta, window.horizon)
    dsched = weights.d_schedule(theta, window.horizon)
    d2sched = weights.d2_schedule(theta, window.horizon)
    zero_sens = np.zeros((model.nx, theta.size))
    soc = kkt.second_order(model, window, sched, sol, traj, dsched, d2sched,
                           zero_sens)
    hesstraj = kf.hessian_trajectory(
        foc, soc, np.zeros((model.nx, theta.size, theta.size)))

    ref = np.empty_like(hesstraj.X)
    for j in range(theta.size):
        shift = np.zeros(theta.size)
        shift[j] = eps
        tp, _, _ = analytic_state_gradient(model, window, theta + shift)
        tm, _, _ = analytic_state_gradient(model, window, theta - shift)
        ref[:, :, j, :] = (tp.X - tm.X) / (2.0 * eps)
    ref = 0.5 * (ref + np.swapaxes(ref, 2, 3))
    return _worst_rel(hesstraj.X, ref, atol=1e-5, rtol=1e-2), hesstraj, ref


def _worst_rel(value, ref, atol, rtol):
    # worst <= rtol is the same as |value - ref| <= atol + rtol * |ref|,
    # so entries below the absolute floor never fail the relative bound
    denom = atol / rtol + np.abs(ref)
    return float(np.max(np.abs(value - ref) / denom))


# ---------------------------------------------------------------------------
# linear-model closed form
# ---------------------------------------------------------------------------

def linear_solution_and_gradient(model: LinearModel, window, theta):
    """States and their tuning derivative for the linear test model.

    On a linear model the estimation problem is an unconstrained linear
    least-squares in the initial state and noise sequence; the optimum
    follows from the normal equations and its derivative from implicit
    differentiation of them.  Built straight from the weight schedule, with
    no stage recursion, so it shares nothing with the fast path.
    """
    theta = np.asarray(theta, dtype=np.float64)
    M = window.horizon
    n, q, p = model.nx, model.nw, model.ny
    sched = weights.expand(theta, M)
    dsched = weights.d_schedule(theta, M)

    # map decision z = (x0, w_0..w_{M-1}) to stacked states
    A, B, C = model.A, model.B, model.C
    nz = n + M * q
    Phi = np.zeros((M + 1, n, nz))
    Phi[0, :, :n] = np.eye(n)
    for k in range(M):
        Phi[k + 1] = A @ Phi[k]
        Phi[k + 1, :, n + k * q: n + (k + 1) * q] += B

    # residual blocks: measurements, noise, arrival
    K = np.zeros((nz, nz))
    rhs = np.zeros(nz)
    dK = np.zeros((theta.size, nz, nz))
    drhs = np.zeros((theta.size, nz))

    for k in range(M + 1):
        J = C @ Phi[k]
        K += J.T @ sched.R[k] @ J
        rhs += J.T @ sched.R[k] @ window.ys[k]
        dK += np.einsum("ba,jbc,cd->jad", J, dsched.dR[k], J)
        drhs += np.einsum("ba,jbc,c->ja", J, dsched.dR[k], window.ys[k])
    for k in range(M):
        sl = slice(n + k * q, n + (k + 1) * q)
        K[sl, sl] += sched.Q[k]
        dK[:, sl, sl] += dsched.dQ[k]
    sel0 = Phi[0]
    K += sel0.T @ sched.P @ sel0
    rhs += sel0.T @ sched.P @ window.prior
    dK += np.einsum("ba,jbc,cd->jad", sel0, dsched.dP, sel0)
    drhs += np.einsum("ba,jbc,c->ja", sel0, dsched.dP, window.prior)

    z = np.linalg.solve(K, rhs)
    xs = np.einsum("knz,z->kn", Phi, z)
    dz = np.linalg.solve(K, (drhs - dK @ z).T)
    X = np.einsum("knz,zj->knj", Phi, dz)
    return xs, X


# ---------------------------------------------------------------------------
# named checks for the derivative checker command
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    worst: float
    limit: float

    @property
    def passed(self) -> bool:
        return self.worst < self.limit


def _window_from_dataset(dataset, t, horizon, model, params):
    """Replay the estimator up to sample ``t`` and return its window."""
    from . import training

    window = mhe.MHEWindow(ys=dataset.y[0][None, :],
                           prior=training.default_prior(dataset.y[0]),
                           dt=model.dt)
    warm = None
    for s in range(t):
        theta = network.forward(params, dataset.y[s])
        sched = weights.expand(theta, window.horizon)
        sol = mhe.solve(model, window, sched, warm_start=warm, tol=1e-10)
        window, warm = mhe.advance_window(model, window, sol,
                                          dataset.y[s + 1], horizon)
    return window


def run_checks(windows: int = 4, horizon: int = 10, hessian_windows: int = 2,
               hessian_horizon: int = 5, seed: int = 0, dense_size=(3, 2, 2, 5),
               first_order_fn=None, progress=None):
    """Run every registered derivative check; returns a list of results.

    ``first_order_fn`` substitutes the stage-coefficient builder inside the
    FD checks (test hook for fault injection).
    """
    from . import data, training
    from .model import QuadrotorModel

    if first_order_fn is None:
        first_order_fn = kkt.first_order
    model = QuadrotorModel()
    rng = np.random.default_rng(seed)
    params = network.kaiming_init(seed)
    dataset = data.generate_synthetic("sine", duration_s=0.25, seed=seed)
    results = []

    def note(msg):
        if progress is not None:
            progress(msg)

    worst = 0.0
    for i in range(windows):
        t = int(rng.integers(horizon + 2, len(dataset)))
        window = _window_from_dataset(dataset, t, horizon, model, params)
        theta = network.forward(params, dataset.y[t])
        sol = _resolve_states(model, window, theta, None, FD_SOLVE_TOL)
        sched = weights.expand(theta, window.horizon)
        dsched = weights.d_schedule(theta, window.horizon)
        foc = first_order_fn(model, window, sched, dsched, sol)
        traj = kf.gradient_trajectory(
            foc, np.zeros((model.nx, theta.size)))
        ref = fd_state_gradient(model, window, theta)
        worst = max(worst, _worst_rel(traj.X, ref, atol=1e-6, rtol=1e-3))
        note(f"first_order window {i + 1}/{windows}: worst {worst:.3e}")
    results.append(CheckResult("first_order_fd", worst, 1e-3))

    worst = 0.0
    for i in range(hessian_windows):
        t = int(rng.integers(hessian_horizon + 2, len(dataset)))
        window = _window_from_dataset(dataset, t, hessian_horizon, model,
                                      params)
        theta = network.forward(params, dataset.y[t])
        err, _, _ = fd_hessian_error(model, window, theta)
        worst = max(worst, err)
        note(f"second_order window {i + 1}/{hessian_windows}: worst {worst:.3e}")
    results.append(CheckResult("second_order_fd", worst, 1e-2))

    n, q, m, M = dense_size
    worst_g = 0.0
    worst_h = 0.0
    for i in range(3):
        foc, rhs_x, rhs_w, prior, rhs_lam = random_stage_coeffs(
            n, q, m, M, seed=seed + i)
        for use_lam, tag in ((None, "g"), (rhs_lam, "h")):
            Xd, Wd, Ld = dense_trajectory(foc, rhs_x, rhs_w, prior, use_lam)
            inputs, Lwwi = kf.build_auxiliary_inputs(foc, rhs_x, rhs_w,
                                                     prior, use_lam)
            Xk, Lk = kf.solve_auxiliary(inputs)
            Wk = kf._recover_np(Xk, Lk, foc.Lxw, Lwwi, rhs_w, foc.G)
            err = max(float(np.abs(Xd - Xk).max()),
                      float(np.abs(Wd - Wk).max()),
                      float(np.abs(Ld - Lk).max()))
            if tag == "g":
                worst_g = max(worst_g, err)
            else:
                worst_h = max(worst_h, err)
    results.append(CheckResult("dense_gradient_form", worst_g, 1e-8))
    results.append(CheckResult("dense_hessian_form", worst_h, 1e-8))
    note(f"dense forms: {worst_g:.3e} / {worst_h:.3e}")

    lin = LinearModel.default(dt=model.dt)
    worst = 0.0
    for i in range(3):
        rngl = np.random.default_rng(seed + 10 + i)
        M = 6
        ys = rngl.standard_normal((M + 1, lin.ny))
        window = mhe.MHEWindow(ys=ys, prior=rngl.standard_normal(lin.nx),
                               dt=lin.dt)
        theta = rngl.standard_normal(weights.N_THETA)
        xs_ref, X_ref = linear_solution_and_gradient(lin, window, theta)
        traj, sol, _ = analytic_state_gradient(lin, window, theta)
        worst = max(worst, float(np.abs(sol.xs - xs_ref).max()),
                    float(np.abs(traj.X - X_ref).max()))
    results.append(CheckResult("linear_model_closed_form", worst, 1e-7))
    note(f"linear model: {worst:.3e}")
    return results
