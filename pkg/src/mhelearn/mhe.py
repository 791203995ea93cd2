"""Nonlinear moving horizon estimator, solved by Gauss-Newton SQP.

The decision variables are the window-start state and the process-noise
sequence; states inside the window always come from an exact nonlinear
rollout, so dynamic feasibility holds at every iterate and only the
stationarity conditions need driving to zero.  Each Gauss-Newton subproblem
is a linear MHE with the same block structure as the sensitivity systems,
so it is solved by the same linear-cost sweep (:func:`mhelearn.kf.solve_auxiliary`)
with a single right-hand side column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kf
from .kkt import FirstOrderCoeffs

KKT_TOL = 1e-8
MAX_ITER = 50
ARMIJO_C = 1e-4
BACKTRACK = 0.5
MIN_STEP = 2.0 ** -20


@dataclass
class MHEWindow:
    """Measurements, arrival prior and sample time of one estimation window."""

    ys: np.ndarray     # (M+1, ny)
    prior: np.ndarray  # (nx,)
    dt: float

    def __post_init__(self):
        self.ys = np.atleast_2d(np.asarray(self.ys, dtype=np.float64))
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if not np.all(np.isfinite(self.ys)) or not np.all(np.isfinite(self.prior)):
            raise ValueError("window data must be finite")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def horizon(self) -> int:
        return self.ys.shape[0] - 1


@dataclass
class WarmStart:
    xs: np.ndarray  # (M+1, nx)
    ws: np.ndarray  # (M, nw)


@dataclass
class MHESolution:
    """Solved window: trajectories, duals and solver diagnostics.

    ``lams[k]`` is the multiplier of the step-``k`` dynamics constraint;
    the terminal entry is identically zero.  ``cost_trace`` records the
    objective after each accepted step (first entry: initial guess).
    """

    xs: np.ndarray    # (M+1, nx)
    ws: np.ndarray    # (M, nw)
    lams: np.ndarray  # (M+1, nx)
    kkt_residual: float
    cost: float
    iterations: int
    converged: bool
    cost_trace: list = field(default_factory=list, repr=False)


def rollout(model, x0, ws) -> np.ndarray:
    """States from an exact nonlinear rollout of the noise sequence."""
    M = len(ws)
    xs = np.empty((M + 1, model.nx))
    xs[0] = x0
    for k in range(M):
        xs[k + 1] = model.step(xs[k], ws[k])
    return xs


def evaluate_cost(model, window, schedule, xs, ws) -> float:
    """Arrival, measurement and process-noise cost of a feasible trajectory."""
    dx = xs[0] - window.prior
    cost = 0.5 * dx @ schedule.P @ dx
    for k in range(window.horizon + 1):
        r = model.measure(xs[k]) - window.ys[k]
        cost += 0.5 * r @ schedule.R[k] @ r
    for k in range(window.horizon):
        cost += 0.5 * ws[k] @ schedule.Q[k] @ ws[k]
    return float(cost)


def adjoint_duals(model, window, schedule, xs) -> np.ndarray:
    """Multipliers that zero the interior state stationarity conditions.

    Backward recursion from the zero terminal multiplier; at a stationary
    point these coincide with the constraint multipliers of the window
    problem.
    """
    M = window.horizon
    lams = np.zeros((M + 1, model.nx))
    for k in range(M, 0, -1):
        der = model.jacobians(xs[k])
        grad = der.H.T @ schedule.R[k] @ (model.measure(xs[k]) - window.ys[k])
        lams[k - 1] = -grad
        if k < M:
            lams[k - 1] += der.F.T @ lams[k]
    return lams


def _reduced_gradients(model, window, schedule, xs, ws, lams):
    """Stationarity residuals in the reduced variables (x0 and noises)."""
    M = window.horizon
    der0 = model.jacobians(xs[0])
    g0 = schedule.P @ (xs[0] - window.prior)
    g0 += der0.H.T @ schedule.R[0] @ (model.measure(xs[0]) - window.ys[0])
    if M:
        g0 -= der0.F.T @ lams[0]
    gw = np.empty_like(ws)
    for k in range(M):
        gw[k] = schedule.Q[k] @ ws[k] - model.jacobians(xs[k]).G.T @ lams[k]
    return g0, gw


def kkt_residual(model, window, schedule, sol) -> float:
    """Max-norm stationarity violation of a solution candidate.

    Dynamics defects are included for completeness; with rollout-based
    iterates they vanish identically.
    """
    g0, gw = _reduced_gradients(model, window, schedule, sol.xs, sol.ws, sol.lams)
    res = np.max(np.abs(g0))
    if gw.size:
        res = max(res, np.max(np.abs(gw)))
    for k in range(window.horizon):
        defect = sol.xs[k + 1] - model.step(sol.xs[k], sol.ws[k])
        res = max(res, np.max(np.abs(defect)))
    return float(res)


def _gauss_newton_coeffs(model, window, schedule, xs, ws) -> FirstOrderCoeffs:
    """Stage matrices of the Gauss-Newton subproblem (one column)."""
    M = window.horizon
    n, q = model.nx, model.nw
    F = np.zeros((M, n, n))
    G = np.zeros((M, n, q))
    Lbar = np.zeros((M + 1, n, n))
    Lxt = np.zeros((M + 1, n, 1))
    Lwt = np.zeros((M, q, 1))
    H = model.jacobians(xs[0]).H
    for k in range(M + 1):
        der = model.jacobians(xs[k])
        if k < M:
            F[k] = der.F
            G[k] = der.G
            Lwt[k, :, 0] = schedule.Q[k] @ ws[k]
        Lbar[k] = H.T @ schedule.R[k] @ H
        Lxt[k, :, 0] = H.T @ schedule.R[k] @ (model.measure(xs[k]) - window.ys[k])
    return FirstOrderCoeffs(P=schedule.P, Lbar=Lbar, Lxw=np.zeros((M, n, q)),
                            Lww=np.asarray(schedule.Q, dtype=np.float64).copy(),
                            Lxt=Lxt, Lwt=Lwt, F=F, G=G, H=H)


def solve(model, window, schedule, warm_start: WarmStart | None = None,
          tol: float = KKT_TOL, max_iter: int = MAX_ITER) -> MHESolution:
    """Solve one window to stationarity.

    Gauss-Newton steps with Armijo backtracking on the window objective;
    the subproblem weights are positive definite by construction, so every
    step is a descent direction.  A window that cannot reach ``tol`` within
    ``max_iter`` steps is returned flagged (``converged=False``) with the
    best iterate found.
    """
    M = window.horizon
    if warm_start is not None:
        xs = rollout(model, warm_start.xs[0], warm_start.ws)
        ws = np.array(warm_start.ws, dtype=np.float64).reshape(M, model.nw)
    else:
        ws = np.zeros((M, model.nw))
        xs = rollout(model, window.prior, ws)

    cost = evaluate_cost(model, window, schedule, xs, ws)
    trace = [cost]
    iterations = 0
    converged = False
    lams = adjoint_duals(model, window, schedule, xs)
    res = _current_residual(model, window, schedule, xs, ws, lams)

    for _ in range(max_iter):
        if res < tol:
            converged = True
            break
        foc = _gauss_newton_coeffs(model, window, schedule, xs, ws)
        prior_col = (window.prior - xs[0]).reshape(-1, 1)
        step = kf.gradient_trajectory(foc, prior_col)
        dx0 = step.X[0][:, 0]
        dws = step.W[:, :, 0] if M else np.zeros((0, model.nw))

        g0, gw = _reduced_gradients(model, window, schedule, xs, ws, lams)
        slope = g0 @ dx0 + float(np.sum(gw * dws))
        if not np.isfinite(slope) or slope >= 0:
            break

        alpha = 1.0
        accepted = False
        while alpha >= MIN_STEP:
            cand_ws = ws + alpha * dws
            cand_xs = rollout(model, xs[0] + alpha * dx0, cand_ws)
            cand_cost = evaluate_cost(model, window, schedule, cand_xs, cand_ws)
            if cand_cost <= cost + ARMIJO_C * alpha * slope:
                accepted = True
                break
            alpha *= BACKTRACK
        if not accepted:
            # Near stationarity the predicted decrease drops below the
            # rounding noise of the objective and the backtracking test
            # becomes meaningless; take the full step whenever it strictly
            # tightens stationarity instead of stalling.
            cand_ws = ws + dws
            cand_xs = rollout(model, xs[0] + dx0, cand_ws)
            cand_lams = adjoint_duals(model, window, schedule, cand_xs)
            cand_res = _current_residual(model, window, schedule, cand_xs,
                                         cand_ws, cand_lams)
            if cand_res < res:
                cand_cost = evaluate_cost(model, window, schedule, cand_xs,
                                          cand_ws)
                accepted = True
        if not accepted:
            break

        xs, ws, cost = cand_xs, cand_ws, cand_cost
        trace.append(cost)
        iterations += 1
        lams = adjoint_duals(model, window, schedule, xs)
        res = _current_residual(model, window, schedule, xs, ws, lams)

    return MHESolution(xs=xs, ws=ws, lams=lams, kkt_residual=res, cost=cost,
                       iterations=iterations, converged=converged,
                       cost_trace=trace)


def _current_residual(model, window, schedule, xs, ws, lams) -> float:
    g0, gw = _reduced_gradients(model, window, schedule, xs, ws, lams)
    res = np.max(np.abs(g0))
    if gw.size:
        res = max(res, np.max(np.abs(gw)))
    return float(res)


def advance_window(model, window: MHEWindow, sol: MHESolution, new_y,
                   horizon: int):
    """Extend or slide the window by one sample.

    Until the window holds ``horizon`` steps it grows with an unchanged
    prior; afterwards it slides, promoting the second solved state to the
    new arrival prior.  The warm start shifts the solved trajectories and
    repeats the last state through a zero-noise step.
    """
    new_y = np.asarray(new_y, dtype=np.float64)
    tail_x = model.step(sol.xs[-1], np.zeros(model.nw))
    if window.horizon < horizon:
        ys = np.vstack([window.ys, new_y])
        prior = window.prior
        xs = np.vstack([sol.xs, tail_x])
        ws = np.vstack([sol.ws.reshape(-1, model.nw), np.zeros(model.nw)])
    else:
        ys = np.vstack([window.ys[1:], new_y])
        prior = sol.xs[1].copy()
        xs = np.vstack([sol.xs[1:], tail_x])
        ws = np.vstack([sol.ws[1:], np.zeros(model.nw)])
    return MHEWindow(ys=ys, prior=prior, dt=window.dt), WarmStart(xs=xs, ws=ws)
