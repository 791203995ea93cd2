"""Small MLP that maps a measurement to the 26 tuning parameters.

Architecture 6 -> 8 -> 8 -> 26 with Leaky-ReLU hidden activations (362
parameters).  Besides the forward pass the module provides the analytic
Jacobian and the per-output Hessian of the outputs with respect to the
flattened parameter vector; both are needed by the second-order trainer.

Because the activations are piecewise linear, every within-layer block of
the parameter Hessian vanishes; only cross-layer blocks are populated.  The
Hessian is exact wherever no pre-activation sits exactly on a kink, which
holds almost surely for continuous inputs.

Flattened parameter layout: ``[W1.ravel(), b1, W2.ravel(), b2, W3.ravel(),
b3]`` (row-major weights), total 362.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LAYER_SIZES = (6, 8, 8, 26)
DEFAULT_SLOPE = 0.01

_N_IN, _N_H1, _N_H2, _N_OUT = LAYER_SIZES
_SIZES = (
    _N_H1 * _N_IN, _N_H1,
    _N_H2 * _N_H1, _N_H2,
    _N_OUT * _N_H2, _N_OUT,
)
N_PARAMS = sum(_SIZES)
_OFFSETS = np.concatenate(([0], np.cumsum(_SIZES)))

# slices of the flat vector
SL_W1 = slice(int(_OFFSETS[0]), int(_OFFSETS[1]))
SL_B1 = slice(int(_OFFSETS[1]), int(_OFFSETS[2]))
SL_W2 = slice(int(_OFFSETS[2]), int(_OFFSETS[3]))
SL_B2 = slice(int(_OFFSETS[3]), int(_OFFSETS[4]))
SL_W3 = slice(int(_OFFSETS[4]), int(_OFFSETS[5]))
SL_B3 = slice(int(_OFFSETS[5]), int(_OFFSETS[6]))


@dataclass
class MLPParams:
    """Parameters of the tuning network."""

    W1: np.ndarray  # (8, 6)
    b1: np.ndarray  # (8,)
    W2: np.ndarray  # (8, 8)
    b2: np.ndarray  # (8,)
    W3: np.ndarray  # (26, 8)
    b3: np.ndarray  # (26,)
    slope: float = DEFAULT_SLOPE

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            self.W1.ravel(), self.b1,
            self.W2.ravel(), self.b2,
            self.W3.ravel(), self.b3,
        ])

    @classmethod
    def from_vector(cls, vec, slope: float = DEFAULT_SLOPE) -> "MLPParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (N_PARAMS,):
            raise ValueError(f"parameter vector has shape {vec.shape}, "
                             f"expected ({N_PARAMS},)")
        return cls(
            W1=vec[SL_W1].reshape(_N_H1, _N_IN).copy(),
            b1=vec[SL_B1].copy(),
            W2=vec[SL_W2].reshape(_N_H2, _N_H1).copy(),
            b2=vec[SL_B2].copy(),
            W3=vec[SL_W3].reshape(_N_OUT, _N_H2).copy(),
            b3=vec[SL_B3].copy(),
            slope=slope,
        )


def kaiming_init(seed: int, slope: float = DEFAULT_SLOPE) -> MLPParams:
    """He-normal weights adjusted for the Leaky-ReLU gain; zero biases."""
    rng = np.random.default_rng(seed)
    gain = 2.0 / (1.0 + slope ** 2)

    def draw(rows, cols):
        return rng.normal(0.0, np.sqrt(gain / cols), size=(rows, cols))

    return MLPParams(
        W1=draw(_N_H1, _N_IN), b1=np.zeros(_N_H1),
        W2=draw(_N_H2, _N_H1), b2=np.zeros(_N_H2),
        W3=draw(_N_OUT, _N_H2), b3=np.zeros(_N_OUT),
        slope=slope,
    )


def _lrelu(z, slope):
    return np.where(z >= 0, z, slope * z)


def _lrelu_grad(z, slope):
    # derivative at the kink follows the active (non-negative) branch
    return np.where(z >= 0, 1.0, slope)


def _trace(params: MLPParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (_N_IN,):
        raise ValueError(f"network input has shape {x.shape}, expected ({_N_IN},)")
    z1 = params.W1 @ x + params.b1
    a1 = _lrelu(z1, params.slope)
    z2 = params.W2 @ a1 + params.b2
    a2 = _lrelu(z2, params.slope)
    out = params.W3 @ a2 + params.b3
    return out, (x, z1, a1, z2, a2)


def forward(params: MLPParams, x) -> np.ndarray:
    """Tuning parameters for one measurement vector."""
    out, _ = _trace(params, x)
    return out


def jacobian_wrt_params(params: MLPParams, x) -> np.ndarray:
    """Jacobian of the outputs with respect to the flat parameter vector."""
    out, (x, z1, a1, z2, a2) = _trace(params, x)
    s1 = _lrelu_grad(z1, params.slope)
    s2 = _lrelu_grad(z2, params.slope)

    jac = np.zeros((_N_OUT, N_PARAMS))
    # output layer: d out_i / d W3[i, h] = a2[h]; d out_i / d b3[i] = 1
    jac[:, SL_W3] = np.kron(np.eye(_N_OUT), a2)
    jac[:, SL_B3] = np.eye(_N_OUT)
    # layer 2: d out / d W2[h, j] = W3[:, h] s2[h] a1[j]
    back2 = params.W3 * s2[None, :]                     # (26, 8) = d out / d z2
    jac[:, SL_W2] = np.einsum("ih,j->ihj", back2, a1).reshape(_N_OUT, -1)
    jac[:, SL_B2] = back2
    # layer 1: d out / d z1[c] = back2 @ (W2[:, c] s1[c])
    back1 = back2 @ (params.W2 * s1[None, :])           # (26, 8) = d out / d z1
    jac[:, SL_W1] = np.einsum("ic,d->icd", back1, x).reshape(_N_OUT, -1)
    jac[:, SL_B1] = back1
    return jac


def hessian_wrt_params(params: MLPParams, x) -> np.ndarray:
    """Per-output Hessians, shape (26, 362, 362), exact off the kinks.

    With piecewise-linear activations every within-layer block vanishes, so
    only cross-layer blocks are assembled; each is written once above the
    block diagonal and mirrored.
    """
    _, (x, z1, a1, z2, a2) = _trace(params, x)
    s1 = _lrelu_grad(z1, params.slope)
    s2 = _lrelu_grad(z2, params.slope)
    back2 = params.W3 * s2[None, :]                      # (26, 8): d out / d z2

    # d a2[h] / d b1[c] = s2[h] W2[h, c] s1[c]; W1[c, d] adds a factor x[d]
    da2_db1 = (params.W2 * s1[None, :]) * s2[:, None]    # (8, 8) [h, c]
    da2_dW1 = np.einsum("hc,d->hcd", da2_db1, x).reshape(_N_H2, -1)

    # shared factors of the (W3 row, layer-2 params) blocks
    w3_w2 = np.kron(np.diag(s2), a1[None, :])            # (8, 64)
    w3_b2 = np.diag(s2)
    # d a1[j] / d W1[j, d] = s1[j] x[d], block diagonal over j
    da1_dW1 = np.kron(np.diag(s1), x[None, :])           # (8, 48)
    da1_db1 = np.diag(s1)

    hess = np.zeros((_N_OUT, N_PARAMS, N_PARAMS))
    upper = np.zeros((N_PARAMS, N_PARAMS))
    for i in range(_N_OUT):
        upper[:] = 0.0
        rows3 = slice(SL_W3.start + i * _N_H2, SL_W3.start + (i + 1) * _N_H2)
        upper[rows3, SL_W2] = w3_w2
        upper[rows3, SL_B2] = w3_b2
        upper[rows3, SL_W1] = da2_dW1
        upper[rows3, SL_B1] = da2_db1
        # d2 out_i / d W2[h, j] d W1[c, d] = back2[i, h] delta_jc s1[j] x[d]
        upper[SL_W2, SL_W1] = np.kron(back2[i][:, None], da1_dW1)
        upper[SL_W2, SL_B1] = np.kron(back2[i][:, None], da1_db1)
        hess[i] = upper + upper.T
    return hess


def save_checkpoint(path, params: MLPParams, seed: int | None = None,
                    extra: dict | None = None) -> None:
    """Write a JSON checkpoint; floats round-trip exactly."""
    doc = {
        "layer_sizes": list(LAYER_SIZES),
        "activation_slope": params.slope,
        "seed": seed,
        "params": [float(v) for v in params.to_vector()],
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> MLPParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if tuple(doc["layer_sizes"]) != LAYER_SIZES:
        raise ValueError(f"checkpoint layer sizes {doc['layer_sizes']} do not "
                         f"match {list(LAYER_SIZES)}")
    vec = np.asarray(doc["params"], dtype=np.float64)
    return MLPParams.from_vector(vec, slope=float(doc["activation_slope"]))
