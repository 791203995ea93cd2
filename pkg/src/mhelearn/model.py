"""Process models for the disturbance estimator.

The main model is a quadrotor whose unmeasured aerodynamic force and torque
are promoted to random-walk states, so the estimator reconstructs them from
velocity and body-rate measurements alone.  A generic linear model with the
same interface backs the numerical tests.

State layout (size 12): ``[v (3), F (3), omega (3), tau (3)]`` with ``v`` the
world-frame velocity, ``F`` the world-frame residual force, ``omega`` the
body rates and ``tau`` the body-frame residual torque.  Process noise (size
6) drives the force and torque random walks; measurements (size 6) are
``[v, omega]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NX = 12
NW = 6
NY = 6

# index blocks of the state vector
IDX_V = slice(0, 3)
IDX_F = slice(3, 6)
IDX_OMEGA = slice(6, 9)
IDX_TAU = slice(9, 12)
# rows of the disturbance block (force and torque) inside the state
DIST_IDX = np.r_[3:6, 9:12]


def _check_vector(x, size, name):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (size,):
        raise ValueError(f"{name} has shape {x.shape}, expected ({size},)")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


@dataclass(frozen=True)
class QuadrotorParams:
    """Inertial parameters of the vehicle."""

    mass: float = 0.772
    inertia_diag: tuple[float, float, float] = (0.0025, 0.0021, 0.0043)
    gravity: float = 9.81

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if any(j <= 0 for j in self.inertia_diag):
            raise ValueError("inertia entries must be positive")

    @property
    def inertia(self) -> np.ndarray:
        return np.diag(self.inertia_diag)

    @property
    def inertia_inv(self) -> np.ndarray:
        return np.diag([1.0 / j for j in self.inertia_diag])


@dataclass(frozen=True)
class ModelDerivatives:
    """Jacobians of one discrete step, plus the constant second derivative.

    ``fxx[a, b, c]`` is the second derivative of state component ``a`` of the
    discrete step map with respect to state components ``b`` and ``c``.
    """

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    fxx: np.ndarray = field(repr=False)

    def contract(self, lam: np.ndarray) -> np.ndarray:
        """Curvature of ``lam . step(x, w)`` with respect to the state."""
        return np.einsum("a,abc->bc", lam, self.fxx)


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


class QuadrotorModel:
    """Quadrotor with residual force/torque modeled as random walks.

    Continuous dynamics, with ``e3`` the world up axis:

    * ``v' = (F - m g e3) / m``
    * ``F' = w_f``
    * ``omega' = J^-1 (-omega x (J omega) + tau)``
    * ``tau' = w_tau``

    Discretization is a single forward-Euler step of length ``dt``, matching
    the linearization used throughout the estimator.
    """

    nx = NX
    nw = NW
    ny = NY

    def __init__(self, params: QuadrotorParams | None = None, dt: float = 1.0 / 400.0):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.params = params if params is not None else QuadrotorParams()
        self.dt = float(dt)
        self._J = self.params.inertia
        self._Ji = self.params.inertia_inv

        # constant input and measurement maps
        G = np.zeros((NX, NW))
        G[IDX_F, 0:3] = np.eye(3)
        G[IDX_TAU, 3:6] = np.eye(3)
        self._G = self.dt * G
        H = np.zeros((NY, NX))
        H[0:3, IDX_V] = np.eye(3)
        H[3:6, IDX_OMEGA] = np.eye(3)
        self._H = H

        # second derivative of the step map: only the body-rate rows are
        # nonlinear (quadratic in omega), so fxx is constant.
        fxx = np.zeros((NX, NX, NX))
        for a in range(3):
            basis = np.zeros(3)
            basis[a] = 1.0
            # d^2 omega_dot / d omega^2 for row a of J^-1(-omega x J omega)
            row = np.zeros((3, 3))
            for b in range(3):
                for c in range(3):
                    eb = np.zeros(3)
                    eb[b] = 1.0
                    ec = np.zeros(3)
                    ec[c] = 1.0
                    val = -(np.cross(eb, self._J @ ec) + np.cross(ec, self._J @ eb))
                    row[b, c] = (self._Ji @ val)[a]
            fxx[6 + a, IDX_OMEGA, IDX_OMEGA] = self.dt * row
        self._fxx = fxx

    def continuous_dynamics(self, x, w, u=None):
        """Time derivative of the state; the control slot is unused."""
        x = _check_vector(x, NX, "state")
        w = _check_vector(w, NW, "noise")
        p = self.params
        dx = np.empty(NX)
        dx[IDX_V] = (x[IDX_F] - np.array([0.0, 0.0, p.mass * p.gravity])) / p.mass
        dx[IDX_F] = w[0:3]
        omega = x[IDX_OMEGA]
        dx[IDX_OMEGA] = self._Ji @ (-np.cross(omega, self._J @ omega) + x[IDX_TAU])
        dx[IDX_TAU] = w[3:6]
        return dx

    def step(self, x, w, u=None):
        """One forward-Euler step of length ``dt``."""
        return np.asarray(x, dtype=np.float64) + self.dt * self.continuous_dynamics(x, w, u)

    def measure(self, x):
        return self._H @ np.asarray(x, dtype=np.float64)

    def jacobians(self, x, u=None) -> ModelDerivatives:
        """Jacobians of the discrete step and measurement at ``x``."""
        x = _check_vector(x, NX, "state")
        A = np.zeros((NX, NX))
        A[IDX_V, IDX_F] = np.eye(3) / self.params.mass
        omega = x[IDX_OMEGA]
        A[IDX_OMEGA, IDX_OMEGA] = self._Ji @ (_skew(self._J @ omega) - _skew(omega) @ self._J)
        A[IDX_OMEGA, IDX_TAU] = self._Ji
        F = np.eye(NX) + self.dt * A
        return ModelDerivatives(F=F, G=self._G, H=self._H, fxx=self._fxx)

    def curvature_contraction(self, x, lam) -> np.ndarray:
        """``sum_a lam_a * d2 step_a / dx2`` at ``x`` (state-independent here)."""
        lam = _check_vector(lam, NX, "multiplier")
        return np.einsum("a,abc->bc", lam, self._fxx)


class LinearModel:
    """Linear time-invariant model with the estimator interface.

    ``step(x, w) = A x + B w``; ``measure(x) = C x``.  Used by tests and by
    the derivative self-checks, where a model with zero curvature makes
    dense reference solutions cheap.
    """

    def __init__(self, A, B, C, dt: float = 1.0):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.C = np.asarray(C, dtype=np.float64)
        self.nx = self.A.shape[0]
        self.nw = self.B.shape[1]
        self.ny = self.C.shape[0]
        if self.A.shape != (self.nx, self.nx) or self.B.shape[0] != self.nx \
                or self.C.shape[1] != self.nx:
            raise ValueError("inconsistent linear model shapes")
        self.dt = float(dt)
        self._fxx = np.zeros((self.nx, self.nx, self.nx))

    def step(self, x, w, u=None):
        return self.A @ np.asarray(x, dtype=np.float64) + self.B @ np.asarray(w, dtype=np.float64)

    def measure(self, x):
        return self.C @ np.asarray(x, dtype=np.float64)

    def jacobians(self, x, u=None) -> ModelDerivatives:
        return ModelDerivatives(F=self.A, G=self.B, H=self.C, fxx=self._fxx)

    def curvature_contraction(self, x, lam) -> np.ndarray:
        return np.zeros((self.nx, self.nx))

    @classmethod
    def default(cls, dt: float = 1.0 / 400.0) -> "LinearModel":
        """Deterministic 12-state test system shaped like the vehicle model.

        Two integrator pairs driven by random-walk inputs, with the
        kinematic halves measured; matches the (12, 6, 6) sizes the weight
        schedule expects.
        """
        A = np.eye(12)
        A[0:3, 3:6] = 1.3 * dt * np.eye(3)
        A[6:9, 9:12] = 0.7 * dt * np.eye(3)
        B = np.zeros((12, 6))
        B[3:6, 0:3] = dt * np.eye(3)
        B[9:12, 3:6] = dt * np.eye(3)
        C = np.zeros((6, 12))
        C[0:3, 0:3] = np.eye(3)
        C[3:6, 6:9] = np.eye(3)
        return cls(A, B, C, dt=dt)
