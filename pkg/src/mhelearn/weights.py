"""Map the 26 tuning parameters to the estimator's weight matrices.

Parameter layout ``theta = [p (12), gamma_r_raw, r (6), gamma_q_raw, q (6)]``:

* arrival weight ``P = diag(floor + p_i^2)``,
* measurement weight ``R_k = gamma_r^(age) * diag(r_i^2) + floor * I`` with
  age counted backwards from the newest sample,
* process-noise weight ``Q_k = gamma_q^(age) * diag(q_i^2) + floor * I``,

with both forgetting factors squashed into (0, 1) by a logistic.  The floor
sits outside the discount so every diagonal entry stays at or above it no
matter how hard the forgetting factor decays; without that, a small factor
over a long window drives the oldest weights to zero and the noise-weight
inverses inside the recursive solver lose all conditioning.

All derivative bundles are dense tensors indexed by parameter; they are tiny
at these sizes and keep the assembly code free of sparsity bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_THETA = 26
WEIGHT_FLOOR = 1e-4

# parameter layout
SL_P = slice(0, 12)
IDX_GAMMA_R = 12
SL_R = slice(13, 19)
IDX_GAMMA_Q = 19
SL_Q = slice(20, 26)


def sigmoid(z: float) -> float:
    """Numerically stable logistic."""
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


@dataclass(frozen=True)
class WeightSchedule:
    """Dense weight matrices over one window of ``M`` dynamic steps.

    ``R[j]`` weighs the measurement ``j`` steps after the window start
    (``R[-1]`` is the newest); ``Q[j]`` weighs the noise on step ``j``.
    """

    P: np.ndarray  # (12, 12)
    R: np.ndarray  # (M+1, 6, 6)
    Q: np.ndarray  # (M, 6, 6)

    @property
    def horizon(self) -> int:
        return self.R.shape[0] - 1


@dataclass(frozen=True)
class WeightDerivatives:
    """First derivatives of the schedule with respect to theta."""

    dP: np.ndarray  # (26, 12, 12)
    dR: np.ndarray  # (M+1, 26, 6, 6)
    dQ: np.ndarray  # (M, 26, 6, 6)


@dataclass(frozen=True)
class WeightSecondDerivatives:
    """Second derivatives of the schedule with respect to theta."""

    d2P: np.ndarray  # (26, 26, 12, 12)
    d2R: np.ndarray  # (M+1, 26, 26, 6, 6)
    d2Q: np.ndarray  # (M, 26, 26, 6, 6)


def _check_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (N_THETA,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({N_THETA},)")
    return theta


def _discounts(gamma, count):
    """Exponents and powers for a backward-discounted sequence of length count."""
    ages = np.arange(count - 1, -1, -1, dtype=np.float64)
    return ages, gamma ** ages


def expand(theta, horizon: int, floor: float = WEIGHT_FLOOR) -> WeightSchedule:
    """Evaluate the weight schedule for a window of ``horizon`` steps."""
    theta = _check_theta(theta)
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    P = np.diag(floor + theta[SL_P] ** 2)

    gr = sigmoid(theta[IDX_GAMMA_R])
    _, pow_r = _discounts(gr, horizon + 1)
    R = pow_r[:, None, None] * np.diag(theta[SL_R] ** 2)[None] \
        + floor * np.eye(6)[None]

    gq = sigmoid(theta[IDX_GAMMA_Q])
    _, pow_q = _discounts(gq, horizon)
    Q = pow_q[:, None, None] * np.diag(theta[SL_Q] ** 2)[None] \
        + floor * np.eye(6)[None]
    return WeightSchedule(P=P, R=R, Q=Q)


def _discounted_first(raw, gamma_raw, count, jac_gamma_idx, jac_diag_sl):
    """First derivative tensor (count, 26, s, s) of a discounted diagonal family."""
    s = raw.size
    g = sigmoid(gamma_raw)
    sig_p = g * (1.0 - g)
    ages, powg = _discounts(g, count)
    diag = raw ** 2  # the floor is additive and drops out of every derivative
    out = np.zeros((count, N_THETA, s, s))
    idx = np.arange(s)
    # d / d raw_i: 2 raw_i * gamma^age at entry (i, i)
    out[:, jac_diag_sl.start + idx, idx, idx] = powg[:, None] * (2.0 * raw)[None, :]
    # d / d gamma_raw: age * gamma^(age-1) * sigmoid' * diag
    fac = np.where(ages > 0, ages * g ** np.maximum(ages - 1.0, 0.0), 0.0) * sig_p
    out[:, jac_gamma_idx, idx, idx] = fac[:, None] * diag[None, :]
    return out


def _discounted_second(raw, gamma_raw, count, jac_gamma_idx, jac_diag_sl):
    """Second derivative tensor (count, 26, 26, s, s)."""
    s = raw.size
    g = sigmoid(gamma_raw)
    sig_p = g * (1.0 - g)
    sig_pp = sig_p * (1.0 - 2.0 * g)
    ages, powg = _discounts(g, count)
    diag = raw ** 2
    out = np.zeros((count, N_THETA, N_THETA, s, s))
    idx = np.arange(s)
    base = jac_diag_sl.start

    # d2 / d raw_i^2 = 2 gamma^age
    out[:, base + idx, base + idx, idx, idx] = 2.0 * powg[:, None] * np.ones(s)[None, :]
    # d2 / d raw_i d gamma_raw = 2 raw_i * age * gamma^(age-1) * sigmoid'
    fac1 = np.where(ages > 0, ages * g ** np.maximum(ages - 1.0, 0.0), 0.0) * sig_p
    cross = fac1[:, None] * (2.0 * raw)[None, :]
    out[:, base + idx, jac_gamma_idx, idx, idx] = cross
    out[:, jac_gamma_idx, base + idx, idx, idx] = cross
    # d2 / d gamma_raw^2 = diag * (age (age-1) gamma^(age-2) sigmoid'^2
    #                              + age gamma^(age-1) sigmoid'')
    t1 = np.where(ages > 1, ages * (ages - 1.0) * g ** np.maximum(ages - 2.0, 0.0), 0.0)
    t2 = np.where(ages > 0, ages * g ** np.maximum(ages - 1.0, 0.0), 0.0)
    fac2 = t1 * sig_p ** 2 + t2 * sig_pp
    out[:, jac_gamma_idx, jac_gamma_idx, idx, idx] = fac2[:, None] * diag[None, :]
    return out


def d_schedule(theta, horizon: int) -> WeightDerivatives:
    """First derivatives of :func:`expand` with respect to every parameter."""
    theta = _check_theta(theta)
    dP = np.zeros((N_THETA, 12, 12))
    idx = np.arange(12)
    dP[idx, idx, idx] = 2.0 * theta[SL_P]
    dR = _discounted_first(theta[SL_R], theta[IDX_GAMMA_R], horizon + 1,
                           IDX_GAMMA_R, SL_R)
    dQ = _discounted_first(theta[SL_Q], theta[IDX_GAMMA_Q], horizon,
                           IDX_GAMMA_Q, SL_Q)
    return WeightDerivatives(dP=dP, dR=dR, dQ=dQ)


def d2_schedule(theta, horizon: int) -> WeightSecondDerivatives:
    """Second derivatives of :func:`expand` with respect to every pair."""
    theta = _check_theta(theta)
    d2P = np.zeros((N_THETA, N_THETA, 12, 12))
    idx = np.arange(12)
    d2P[idx, idx, idx, idx] = 2.0
    d2R = _discounted_second(theta[SL_R], theta[IDX_GAMMA_R], horizon + 1,
                             IDX_GAMMA_R, SL_R)
    d2Q = _discounted_second(theta[SL_Q], theta[IDX_GAMMA_Q], horizon,
                             IDX_GAMMA_Q, SL_Q)
    return WeightSecondDerivatives(d2P=d2P, d2R=d2R, d2Q=d2Q)
