"""Riccati-style solver for the auxiliary linear estimation problems.

The estimator's optimality system, differentiated (once or twice) with
respect to the tuning parameters, is a block-tridiagonal linear system with
the structure of a linear MHE problem.  This module solves it with a single
forward/backward sweep whose cost is linear in the horizon length, instead
of factorizing the stacked system.

One entry point, :func:`solve_auxiliary`, serves three callers:

* the Gauss-Newton step inside the nonlinear estimator (right-hand side has
  one column),
* the first-order sensitivity pass (one column per tuning parameter),
* the second-order sensitivity pass (one column per parameter pair, sharing
  the covariance recursion across all columns).

Hot loops are compiled with numba when available; a pure-numpy twin of every
kernel is kept in sync and selected either by ``MHELEARN_NO_NUMBA=1`` or by
the explicit ``backend`` argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import maybe_njit, numba_enabled

COND_LIMIT = 1e12

_PRIOR_STEP = -2


class SingularCovarianceError(RuntimeError):
    """Covariance update became singular or ill-conditioned.

    ``step`` is the window index of the failing update; the prior weight
    inversion reports step -2.
    """

    def __init__(self, step: int):
        self.step = int(step)
        if self.step == _PRIOR_STEP:
            where = "prior weight inversion"
        else:
            where = f"covariance update at step {self.step}"
        super().__init__(
            f"auxiliary solve failed: {where} exceeded condition limit {COND_LIMIT:g}"
        )


@dataclass
class AuxiliaryProblemInputs:
    """Coefficients of one auxiliary linear estimation problem.

    Shapes use ``M`` dynamic steps, state size ``n`` and ``m`` right-hand
    side columns.  ``S``/``T`` include the terminal step (``M + 1`` entries);
    ``A``/``B``/``Fbar`` do not.
    """

    S: np.ndarray      # (M+1, n, n)
    T: np.ndarray      # (M+1, n, m)
    A: np.ndarray      # (M, n, m)
    B: np.ndarray      # (M, n, n)
    Fbar: np.ndarray   # (M, n, n)
    prior: np.ndarray  # (n, m)
    P: np.ndarray      # (n, n) prior weight (not its inverse)

    def __post_init__(self):
        M1, n, m = self.S.shape[0], self.S.shape[1], self.T.shape[2]
        M = M1 - 1
        expect = {
            "S": (M + 1, n, n),
            "T": (M + 1, n, m),
            "A": (M, n, m),
            "B": (M, n, n),
            "Fbar": (M, n, n),
            "prior": (n, m),
            "P": (n, n),
        }
        for name, shape in expect.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.S.shape[0] - 1

    @property
    def width(self) -> int:
        return self.T.shape[2]


@dataclass
class DerivativeTrajectory:
    """Solution of an auxiliary problem: states, noises and duals.

    ``X[k]`` maps to the state trajectory (``n x m``), ``W[k]`` to the noise
    trajectory (``q x m``) and ``Lam[k]`` to the duals; ``Lam[-1]`` is zero by
    the terminal condition.
    """

    X: np.ndarray    # (M+1, n, m)
    W: np.ndarray    # (M, q, m)
    Lam: np.ndarray  # (M+1, n, m)


@dataclass
class HessianTrajectory:
    """Second-order sensitivities, symmetrized over the parameter pair.

    ``max_asym`` records the largest absolute asymmetry removed by the
    symmetrization, as a sanity measure of the underlying solve.
    """

    X: np.ndarray    # (M+1, n, p, p)
    Lam: np.ndarray  # (M+1, n, p, p)
    max_asym: float


def _use_jit(backend: str | None) -> bool:
    if backend == "numba":
        if not _HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return True
    if backend == "numpy":
        return False
    if backend is not None:
        raise ValueError(f"unknown backend {backend!r}")
    return _HAVE_NUMBA and numba_enabled()


try:
    import numba  # noqa: F401

    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# jitted kernels
# ---------------------------------------------------------------------------

@maybe_njit(cache=True)
def _inv_guarded(mat):
    """Invert with partial-pivot elimination; flag ill-conditioning.

    Returns ``(inv, ok)`` where ok is False when a pivot vanishes or the
    1-norm condition estimate exceeds COND_LIMIT.
    """
    n = mat.shape[0]
    aug = np.empty((n, 2 * n))
    aug[:, :n] = mat
    aug[:, n:] = np.eye(n)
    for col in range(n):
        piv = col
        best = abs(aug[col, col])
        for r in range(col + 1, n):
            cand = abs(aug[r, col])
            if cand > best:
                best = cand
                piv = r
        if best == 0.0 or not np.isfinite(best):
            return np.eye(n), False
        if piv != col:
            for c in range(2 * n):
                tmp = aug[col, c]
                aug[col, c] = aug[piv, c]
                aug[piv, c] = tmp
        scale = 1.0 / aug[col, col]
        for c in range(2 * n):
            aug[col, c] *= scale
        for r in range(n):
            if r == col:
                continue
            factor = aug[r, col]
            if factor != 0.0:
                for c in range(2 * n):
                    aug[r, c] -= factor * aug[col, c]
    inv = np.ascontiguousarray(aug[:, n:])
    # 1-norm condition estimate
    norm_a = 0.0
    norm_i = 0.0
    for c in range(n):
        sa = 0.0
        si = 0.0
        for r in range(n):
            sa += abs(mat[r, c])
            si += abs(inv[r, c])
        if sa > norm_a:
            norm_a = sa
        if si > norm_i:
            norm_i = si
    cond = norm_a * norm_i
    if not np.isfinite(cond) or cond > COND_LIMIT:
        return inv, False
    return inv, True


@maybe_njit(cache=True)
def _assemble_jit(F, G, Lbar, Lxw, Lww, Lxt, Lwt, D):
    M = F.shape[0]
    n = F.shape[1]
    q = G.shape[2]
    m = Lxt.shape[2]
    S = np.empty((M + 1, n, n))
    T = np.empty((M + 1, n, m))
    A = np.empty((M, n, m))
    B = np.empty((M, n, n))
    Fbar = np.empty((M, n, n))
    Lwwi = np.empty((M, q, q))
    for k in range(M):
        wi = np.linalg.inv(Lww[k])
        Lwwi[k] = wi
        xw_wi = Lxw[k] @ wi          # (n, q)
        g_wi = G[k] @ wi             # (n, q)
        wx = Lxw[k].T                # (q, n)
        S[k] = xw_wi @ wx - Lbar[k]
        T[k] = xw_wi @ Lwt[k] - Lxt[k]
        A[k] = g_wi @ Lwt[k] + D[k]
        B[k] = g_wi @ G[k].T
        Fbar[k] = F[k] - g_wi @ wx
    S[M] = -Lbar[M]
    T[M] = -Lxt[M]
    return S, T, A, B, Fbar, Lwwi


@maybe_njit(cache=True)
def _solve_jit(S, T, A, B, Fbar, prior, P):
    M = S.shape[0] - 1
    n = S.shape[1]
    m = T.shape[2]
    eye = np.eye(n)
    X = np.empty((M + 1, n, m))
    Lam = np.zeros((M + 1, n, m))
    Xkf = np.empty((M + 1, n, m))
    C = np.empty((M + 1, n, n))

    P0, ok = _inv_guarded(P)
    if not ok:
        return X, Lam, _PRIOR_STEP
    Pk = P0
    for k in range(M + 1):
        if k > 0:
            Pk = Fbar[k - 1] @ C[k - 1] @ Fbar[k - 1].T + B[k - 1]
        Ck, ok = _inv_guarded(eye - Pk @ S[k])
        if not ok:
            return X, Lam, k
        Ck = Ck @ Pk
        C[k] = Ck
        if k == 0:
            pred = prior
        else:
            pred = Fbar[k - 1] @ Xkf[k - 1] - A[k - 1]
        Xkf[k] = pred + Ck @ (S[k] @ pred + T[k])

    for k in range(M, 0, -1):
        lam_prev = S[k] @ Xkf[k] + T[k]
        if k < M:
            lam_prev = lam_prev + (Fbar[k].T + S[k] @ (C[k] @ Fbar[k].T)) @ Lam[k]
        Lam[k - 1] = lam_prev

    for k in range(M):
        X[k] = Xkf[k] + C[k] @ (Fbar[k].T @ Lam[k])
    X[M] = Xkf[M]
    return X, Lam, -1


@maybe_njit(cache=True)
def _recover_jit(X, Lam, Lxw, Lwwi, Lwt, G):
    M = Lwt.shape[0]
    q = Lwt.shape[1]
    m = Lwt.shape[2]
    W = np.empty((M, q, m))
    for k in range(M):
        rhs = Lxw[k].T @ X[k] - G[k].T @ Lam[k] + Lwt[k]
        W[k] = -(Lwwi[k] @ rhs)
    return W


# ---------------------------------------------------------------------------
# numpy twins
# ---------------------------------------------------------------------------

def _assemble_np(F, G, Lbar, Lxw, Lww, Lxt, Lwt, D):
    M, n, q = G.shape
    m = Lxt.shape[2]
    S = np.empty((M + 1, n, n))
    T = np.empty((M + 1, n, m))
    if M:
        Lwwi = np.linalg.inv(Lww)
        Lwx = np.transpose(Lxw, (0, 2, 1))
        xw_wi = Lxw @ Lwwi
        g_wi = G @ Lwwi
        S[:M] = xw_wi @ Lwx - Lbar[:M]
        T[:M] = xw_wi @ Lwt - Lxt[:M]
        A = g_wi @ Lwt + D
        B = g_wi @ np.transpose(G, (0, 2, 1))
        Fbar = F - g_wi @ Lwx
    else:
        Lwwi = np.empty((0, q, q))
        A = np.empty((0, n, m))
        B = np.empty((0, n, n))
        Fbar = np.empty((0, n, n))
    S[M] = -Lbar[M]
    T[M] = -Lxt[M]
    return S, T, A, B, Fbar, Lwwi


def _inv_checked(mat, step):
    try:
        inv = np.linalg.inv(mat)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(step) from None
    cond = np.abs(mat).sum(axis=0).max() * np.abs(inv).sum(axis=0).max()
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularCovarianceError(step)
    return inv


def _solve_np(S, T, A, B, Fbar, prior, P):
    M = S.shape[0] - 1
    n, m = T.shape[1], T.shape[2]
    eye = np.eye(n)
    X = np.empty((M + 1, n, m))
    Lam = np.zeros((M + 1, n, m))
    Xkf = np.empty((M + 1, n, m))
    C = np.empty((M + 1, n, n))

    Pk = _inv_checked(P, _PRIOR_STEP)
    for k in range(M + 1):
        if k > 0:
            Pk = Fbar[k - 1] @ C[k - 1] @ Fbar[k - 1].T + B[k - 1]
        Ck = _inv_checked(eye - Pk @ S[k], k) @ Pk
        C[k] = Ck
        pred = prior if k == 0 else Fbar[k - 1] @ Xkf[k - 1] - A[k - 1]
        Xkf[k] = pred + Ck @ (S[k] @ pred + T[k])

    for k in range(M, 0, -1):
        lam_prev = S[k] @ Xkf[k] + T[k]
        if k < M:
            lam_prev = lam_prev + (Fbar[k].T + S[k] @ (C[k] @ Fbar[k].T)) @ Lam[k]
        Lam[k - 1] = lam_prev

    X[:M] = Xkf[:M] + C[:M] @ (np.transpose(Fbar, (0, 2, 1)) @ Lam[:M])
    X[M] = Xkf[M]
    return X, Lam


def _recover_np(X, Lam, Lxw, Lwwi, Lwt, G):
    if not Lwt.shape[0]:
        return np.empty_like(Lwt)
    rhs = np.transpose(Lxw, (0, 2, 1)) @ X[:-1]
    rhs -= np.transpose(G, (0, 2, 1)) @ Lam[:-1]
    rhs += Lwt
    return -(Lwwi @ rhs)


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def solve_auxiliary(inputs: AuxiliaryProblemInputs, backend: str | None = None):
    """Solve one auxiliary problem; returns ``(X, Lam)``.

    ``X`` has shape ``(M+1, n, m)``, ``Lam`` likewise with ``Lam[-1] == 0``.
    Raises :class:`SingularCovarianceError` when a covariance update fails
    the condition check.
    """
    if _use_jit(backend) and inputs.horizon >= 0:
        X, Lam, fail = _solve_jit(
            inputs.S, inputs.T, inputs.A, inputs.B, inputs.Fbar,
            inputs.prior, inputs.P,
        )
        if fail != -1:
            raise SingularCovarianceError(fail)
        return X, Lam
    return _solve_np(
        inputs.S, inputs.T, inputs.A, inputs.B, inputs.Fbar,
        inputs.prior, inputs.P,
    )


def _as_forcing(arr, M, rows, m):
    out = np.zeros((M, rows, m)) if arr is None else np.asarray(arr, dtype=np.float64)
    if out.shape != (M, rows, m):
        raise ValueError(f"forcing has shape {out.shape}, expected {(M, rows, m)}")
    return np.ascontiguousarray(out)


def build_auxiliary_inputs(foc, rhs_x, rhs_w, prior, rhs_lam=None,
                           backend: str | None = None):
    """Assemble :class:`AuxiliaryProblemInputs` from stage coefficients.

    ``foc`` carries the stage matrices (``F``, ``G``, ``Lbar``, ``Lxw``,
    ``Lww``, ``P``).  ``rhs_x`` (``(M+1, n, m)``) and ``rhs_w`` (``(M, q, m)``)
    are the parameter couplings of the state and noise stationarity
    conditions; ``rhs_lam`` is the extra dynamics-level forcing used by the
    second-order pass.  ``prior`` (``(n, m)``) enters through the arrival
    term.  Also returns the per-step noise-weight inverses for the noise
    recovery step.
    """
    F = np.ascontiguousarray(foc.F, dtype=np.float64)
    G = np.ascontiguousarray(foc.G, dtype=np.float64)
    Lbar = np.ascontiguousarray(foc.Lbar, dtype=np.float64)
    Lxw = np.ascontiguousarray(foc.Lxw, dtype=np.float64)
    Lww = np.ascontiguousarray(foc.Lww, dtype=np.float64)
    Lxt = np.ascontiguousarray(rhs_x, dtype=np.float64)
    Lwt = np.ascontiguousarray(rhs_w, dtype=np.float64)
    M, n, q = G.shape
    if Lxt.ndim != 3 or Lxt.shape[:2] != (M + 1, n):
        raise ValueError(f"rhs_x has shape {Lxt.shape}, expected "
                         f"({M + 1}, {n}, m)")
    m = Lxt.shape[2]
    if Lwt.shape != (M, q, m):
        raise ValueError(f"rhs_w has shape {Lwt.shape}, expected {(M, q, m)}")
    D = _as_forcing(rhs_lam, M, n, m)
    prior = np.ascontiguousarray(np.asarray(prior, dtype=np.float64).reshape(n, m))

    if _use_jit(backend) and M:
        S, T, A, B, Fbar, Lwwi = _assemble_jit(F, G, Lbar, Lxw, Lww, Lxt, Lwt, D)
    else:
        S, T, A, B, Fbar, Lwwi = _assemble_np(F, G, Lbar, Lxw, Lww, Lxt, Lwt, D)
    inputs = AuxiliaryProblemInputs(S=S, T=T, A=A, B=B, Fbar=Fbar,
                                    prior=prior, P=foc.P)
    return inputs, Lwwi


def gradient_trajectory(foc, prior_sens, backend: str | None = None
                        ) -> DerivativeTrajectory:
    """First-order sensitivities of the estimate along the window.

    ``prior_sens`` (``(n, m)``) is the sensitivity of the arrival prior; zero
    for an isolated window.  Returns state, noise and dual sensitivities.
    """
    inputs, Lwwi = build_auxiliary_inputs(
        foc, foc.Lxt, foc.Lwt, prior_sens, backend=backend)
    X, Lam = solve_auxiliary(inputs, backend=backend)
    if _use_jit(backend) and inputs.horizon:
        W = _recover_jit(X, Lam, np.ascontiguousarray(foc.Lxw), Lwwi,
                         np.ascontiguousarray(foc.Lwt),
                         np.ascontiguousarray(foc.G))
    else:
        W = _recover_np(X, Lam, foc.Lxw, Lwwi, foc.Lwt, foc.G)
    return DerivativeTrajectory(X=X, W=W, Lam=Lam)


def hessian_trajectory(foc, soc, prior_hess, backend: str | None = None
                       ) -> HessianTrajectory:
    """Second-order sensitivities, batched over all parameter pairs.

    ``soc`` carries the second-order forcings as ``(.., p, p)`` tensors;
    every parameter pair becomes one right-hand side column, so the
    covariance recursion is shared across the whole batch.  ``prior_hess``
    (``(n, p, p)``) is the second-order sensitivity of the arrival prior.
    The result is symmetrized over the parameter pair.
    """
    M1, n, p, _ = soc.Lxt2.shape
    M = M1 - 1
    q = foc.Lww.shape[1] if M else foc.G.shape[2]
    rhs_x = soc.Lxt2.reshape(M + 1, n, p * p)
    rhs_w = soc.Lwt2.reshape(M, q, p * p)
    rhs_lam = soc.Llam2.reshape(M, n, p * p)
    prior = np.asarray(prior_hess, dtype=np.float64).reshape(n, p * p)

    inputs, _ = build_auxiliary_inputs(
        foc, rhs_x, rhs_w, prior, rhs_lam=rhs_lam, backend=backend)
    X, Lam = solve_auxiliary(inputs, backend=backend)

    X = X.reshape(M + 1, n, p, p)
    Lam = Lam.reshape(M + 1, n, p, p)
    Xt = np.transpose(X, (0, 1, 3, 2))
    max_asym = float(np.max(np.abs(X - Xt))) if X.size else 0.0
    X = 0.5 * (X + Xt)
    Lam = 0.5 * (Lam + np.transpose(Lam, (0, 1, 3, 2)))
    return HessianTrajectory(X=X, Lam=Lam, max_asym=max_asym)
