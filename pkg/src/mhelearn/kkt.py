"""Coefficients of the differentiated optimality system.

At a solved window the estimator's stationarity conditions hold; this module
assembles their derivatives around that solution.  ``first_order`` yields
the stage matrices and parameter couplings whose solution (via
:mod:`mhelearn.kf`) is the sensitivity of the estimate to the 26 tuning
parameters.  ``second_order`` builds the forcing terms of the twice
differentiated system; its stage matrices are shared with the first-order
system, so only right-hand sides are new.

Both builders assume dynamics affine in the process noise and a linear
measurement map, which holds for the quadrotor and the linear test model;
the corresponding cross terms (``Lxw`` and measurement curvature) are kept
as explicit zeros so the downstream solver stays general.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FirstOrderCoeffs:
    """Stage matrices of the once-differentiated optimality system.

    ``Lbar`` excludes the arrival weight, which enters separately through
    ``P`` at the window start.  ``Lxt``/``Lwt`` are the couplings of the
    state and noise stationarity conditions to the ``m`` differentiation
    directions (``m = 26`` for the sensitivity pass, ``m = 1`` when the same
    structure carries a Gauss-Newton subproblem).
    """

    P: np.ndarray     # (n, n)
    Lbar: np.ndarray  # (M+1, n, n)
    Lxw: np.ndarray   # (M, n, q)
    Lww: np.ndarray   # (M, q, q)
    Lxt: np.ndarray   # (M+1, n, m)
    Lwt: np.ndarray   # (M, q, m)
    F: np.ndarray     # (M, n, n)
    G: np.ndarray     # (M, n, q)
    H: np.ndarray     # (ny, n)

    @property
    def horizon(self) -> int:
        return self.Lbar.shape[0] - 1

    def full_xx(self, k: int) -> np.ndarray:
        """State curvature at step ``k`` including the arrival weight."""
        if k == 0:
            return self.Lbar[0] + self.P
        return self.Lbar[k]


@dataclass
class SecondOrderCoeffs:
    """Forcing tensors of the twice-differentiated optimality system.

    Indexed ``[step][component, j, l]`` over parameter pairs ``(j, l)``; all
    three tensors are symmetric in ``(j, l)``.
    """

    Lxt2: np.ndarray   # (M+1, n, p, p)
    Lwt2: np.ndarray   # (M, q, p, p)
    Llam2: np.ndarray  # (M, n, p, p)


def lift_matrix(mat: np.ndarray, p: int) -> np.ndarray:
    """Block-diagonal replication of a stage matrix over ``p`` directions."""
    return np.kron(np.eye(p), mat)


def lift_forcing(tensor: np.ndarray) -> np.ndarray:
    """Stack a ``(n, p, p)`` forcing into the ``(n p, p)`` matrix view."""
    n, p, _ = tensor.shape
    return np.transpose(tensor, (1, 0, 2)).reshape(n * p, p)


def first_order(model, window, schedule, dsched, sol) -> FirstOrderCoeffs:
    """Stage matrices of the sensitivity system at a solved window.

    Uses the exact Lagrangian curvature, contracting the solution duals
    against the dynamics second derivative.
    """
    xs, ws, lams = sol.xs, sol.ws, sol.lams
    M = window.horizon
    n, q, ny = model.nx, model.nw, model.ny
    p = dsched.dP.shape[0]

    F = np.zeros((M, n, n))
    G = np.zeros((M, n, q))
    Lbar = np.zeros((M + 1, n, n))
    Lxt = np.zeros((M + 1, n, p))
    Lww = np.asarray(schedule.Q, dtype=np.float64).copy()
    Lwt = np.zeros((M, q, p))
    Lxw = np.zeros((M, n, q))
    H = model.jacobians(xs[0]).H

    for k in range(M + 1):
        der = model.jacobians(xs[k])
        if k < M:
            F[k] = der.F
            G[k] = der.G
            Lwt[k] = np.einsum("jab,b->aj", dsched.dQ[k], ws[k])
        resid = model.measure(xs[k]) - window.ys[k]
        Lbar[k] = H.T @ schedule.R[k] @ H - der.contract(lams[k])
        Lxt[k] = np.einsum("yi,jyz,z->ij", H, dsched.dR[k], resid)
    Lxt[0] += np.einsum("jab,b->aj", dsched.dP, xs[0] - window.prior)

    return FirstOrderCoeffs(P=schedule.P, Lbar=Lbar, Lxw=Lxw, Lww=Lww,
                            Lxt=Lxt, Lwt=Lwt, F=F, G=G, H=H)


def second_order(model, window, schedule, sol, traj, dsched, d2sched,
                 prior_sens) -> SecondOrderCoeffs:
    """Forcing tensors of the second-order sensitivity system.

    ``traj`` is the first-order sensitivity solution (states, noises,
    duals); ``prior_sens`` is the first-order sensitivity of the arrival
    prior used in the boundary terms.
    """
    xs, ws = sol.xs, sol.ws
    X, W, Lam = traj.X, traj.W, traj.Lam
    M = window.horizon
    n, q = model.nx, model.nw
    p = dsched.dP.shape[0]
    H = model.jacobians(xs[0]).H

    Lxt2 = np.zeros((M + 1, n, p, p))
    Lwt2 = np.zeros((M, q, p, p))
    Llam2 = np.zeros((M, n, p, p))

    for k in range(M + 1):
        resid = model.measure(xs[k]) - window.ys[k]
        # weight-curvature couplings of the measurement term
        dRH = np.einsum("yi,lyz,zb->lib", H, dsched.dR[k], H)
        pair = np.einsum("lib,bj->ijl", dRH, X[k])
        sym = pair + np.transpose(pair, (0, 2, 1))
        sym += np.einsum("yi,jlyz,z->ijl", H, d2sched.d2R[k], resid)
        if k < M:
            fxx = model.jacobians(xs[k]).fxx
            if np.any(fxx):
                curv = -np.einsum("al,aib,bj->ijl", Lam[k], fxx, X[k])
                sym += curv + np.transpose(curv, (0, 2, 1))
                Llam2[k] = -np.einsum("ibc,bj,cl->ijl", fxx, X[k], X[k])
            dQW = np.einsum("lab,bj->ajl", dsched.dQ[k], W[k])
            Lwt2[k] = dQW + np.transpose(dQW, (0, 2, 1))
            Lwt2[k] += np.einsum("jlab,b->ajl", d2sched.d2Q[k], ws[k])
        Lxt2[k] = sym

    # arrival boundary terms
    dsens = X[0] - np.asarray(prior_sens, dtype=np.float64)
    bnd = np.einsum("lib,bj->ijl", dsched.dP, dsens)
    Lxt2[0] += bnd + np.transpose(bnd, (0, 2, 1))
    Lxt2[0] += np.einsum("jlib,b->ijl", d2sched.d2P, xs[0] - window.prior)
    return SecondOrderCoeffs(Lxt2=Lxt2, Lwt2=Lwt2, Llam2=Llam2)
