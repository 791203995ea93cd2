"""Moving horizon estimation with learned weights.

A nonlinear moving horizon estimator whose weighting matrices come from a
small neural network, plus the machinery to train that network: exact
first- and second-order sensitivities of the estimate with respect to the
26 tuning parameters, computed by a Kalman-filter-style recursion that is
linear in the horizon, and a trust-region trainer built on them.

Modules
-------
model     quadrotor dynamics with force/torque disturbance states
weights   tuning vector -> positive-definite weight schedule
network   the 6-8-8-26 multilayer perceptron and its derivatives
mhe       Gauss-Newton solver for one estimation window
kkt       differentiated stationarity systems (first and second order)
kf        linear-cost recursion solving those systems
training  trust-region and gradient-descent sweeps, evaluation
data      synthetic flight data and the CSV schema
oracles   independent reference implementations for verification
cli       command-line front end
"""

from . import data, kf, kkt, mhe, model, network, oracles, training, weights
from .data import FlightDataset, generate_synthetic, load_csv, write_csv
from .mhe import MHESolution, MHEWindow, WarmStart, solve
from .model import QuadrotorModel, QuadrotorParams
from .network import MLPParams, kaiming_init, load_checkpoint, save_checkpoint
from .training import (
    EvalResult,
    LossSpec,
    TrainResult,
    TrainSettings,
    TrustRegionConfig,
    evaluate,
    run_estimator,
    train_gradient_descent,
    train_trust_region,
)
from .weights import N_THETA, WEIGHT_FLOOR, WeightSchedule, expand

__version__ = "0.1.0"

__all__ = [
    "FlightDataset", "generate_synthetic", "load_csv", "write_csv",
    "MHESolution", "MHEWindow", "WarmStart", "solve",
    "QuadrotorModel", "QuadrotorParams",
    "MLPParams", "kaiming_init", "load_checkpoint", "save_checkpoint",
    "EvalResult", "LossSpec", "TrainResult", "TrainSettings",
    "TrustRegionConfig", "evaluate", "run_estimator",
    "train_gradient_descent", "train_trust_region",
    "N_THETA", "WEIGHT_FLOOR", "WeightSchedule", "expand",
    "data", "kf", "kkt", "mhe", "model", "network", "oracles", "training",
    "weights", "__version__",
]
