"""Flight-data containers, CSV interchange and synthetic trajectories.

CSV schema (one header row, then one row per sample)::

    t,vx,vy,vz,wx,wy,wz,Fx,Fy,Fz,taux,tauy,tauz

``t`` in seconds on a uniform grid; velocities in m/s, body rates in rad/s,
forces in N, torques in N m.  The six ground-truth columns are optional for
inference-only files.  Floats are written with 17 significant digits so
values round-trip exactly.

Synthetic trajectories integrate the quadrotor velocity and body-rate
dynamics with the same forward-Euler step the estimator linearizes, while a
disturbance profile prescribes the force and torque; the recorded truth is
therefore exact for the model class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import QuadrotorParams

COLUMNS = ["t", "vx", "vy", "vz", "wx", "wy", "wz",
           "Fx", "Fy", "Fz", "taux", "tauy", "tauz"]
_MEAS_COLS = COLUMNS[1:7]
_TRUTH_COLS = COLUMNS[7:13]

DEFAULT_RATE = 400.0
DEFAULT_NOISE = (0.0, 0.0)


@dataclass
class FlightDataset:
    """Uniformly sampled measurements with optional disturbance truth."""

    t: np.ndarray              # (T,)
    y: np.ndarray              # (T, 6): v then omega
    truth: np.ndarray | None   # (T, 6): force then torque, or None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.float64)
        T = self.t.shape[0]
        if T < 1 or self.y.shape != (T, 6):
            raise ValueError("dataset needs matching t (T,) and y (T, 6)")
        if self.truth is not None and self.truth.shape != (T, 6):
            raise ValueError("truth must be (T, 6) when present")
        for name in ("t", "y", "truth"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if T > 1:
            steps = np.diff(self.t)
            if steps.min() <= 0 or np.ptp(steps) > 1e-6 * steps.mean():
                raise ValueError("timestamps must be uniform and increasing")

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def dt(self) -> float:
        if len(self) < 2:
            raise ValueError("dt undefined for a single sample")
        return float(np.mean(np.diff(self.t)))

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.dt

    def slice(self, start_s: float, duration_s: float) -> "FlightDataset":
        """Contiguous half-open time slice ``[start, start + duration)``."""
        t0 = self.t[0]
        mask = (self.t >= t0 + start_s - 1e-12) & \
               (self.t < t0 + start_s + duration_s - 1e-12)
        if not mask.any():
            raise ValueError("empty slice")
        idx = np.flatnonzero(mask)
        truth = self.truth[idx] if self.truth is not None else None
        return FlightDataset(t=self.t[idx], y=self.y[idx], truth=truth)


def write_csv(dataset: FlightDataset, path) -> None:
    """Write the dataset in the documented schema."""
    has_truth = dataset.truth is not None
    cols = COLUMNS if has_truth else COLUMNS[:7]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(len(dataset)):
            row = [dataset.t[i], *dataset.y[i]]
            if has_truth:
                row += list(dataset.truth[i])
            writer.writerow(f"{v:.17g}" for v in row)


def load_csv(path) -> FlightDataset:
    """Read a dataset, tolerating files without ground-truth columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header == COLUMNS:
            has_truth = True
        elif header == COLUMNS[:7]:
            has_truth = False
        else:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no samples")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    truth = arr[:, 7:13] if has_truth else None
    return FlightDataset(t=arr[:, 0], y=arr[:, 1:7], truth=truth)


# ---------------------------------------------------------------------------
# disturbance profiles
# ---------------------------------------------------------------------------

@dataclass
class SineProfile:
    """Smooth multi-axis sinusoidal force and torque, zero at t = 0."""

    amp_force: tuple = (2.0, 2.0, 3.0)
    freq_force: tuple = (0.8, 1.0, 0.6)
    amp_torque: tuple = (0.02, 0.025, 0.03)
    freq_torque: tuple = (1.0, 0.8, 1.2)

    def force(self, t, v):
        return np.asarray(self.amp_force) * np.sin(
            2 * np.pi * np.asarray(self.freq_force) * t)

    def torque(self, t, omega):
        return np.asarray(self.amp_torque) * np.sin(
            2 * np.pi * np.asarray(self.freq_torque) * t)


@dataclass
class DragProfile:
    """State-dependent aerodynamic-style drag on both channels."""

    force_coeff: float = 0.35
    torque_coeff: float = 0.003

    def force(self, t, v):
        return -self.force_coeff * np.linalg.norm(v) * v

    def torque(self, t, omega):
        return -self.torque_coeff * np.linalg.norm(omega) * omega


@dataclass
class SpikeProfile:
    """Piecewise-constant pulses at seeded random onsets."""

    rng_seed: int = 0
    rate_hz: float = 2.0
    amp_force: float = 2.5
    amp_torque: float = 0.02
    duration_s: float = 10.0
    _events: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.rng_seed)
        count = max(1, int(self.rate_hz * self.duration_s))
        starts = np.sort(rng.uniform(0.0, self.duration_s, count))
        for s in starts:
            width = rng.uniform(0.05, 0.25)
            f = rng.uniform(-self.amp_force, self.amp_force, 3)
            tau = rng.uniform(-self.amp_torque, self.amp_torque, 3)
            self._events.append((s, s + width, f, tau))

    def _active(self, t):
        f = np.zeros(3)
        tau = np.zeros(3)
        for start, stop, fv, tv in self._events:
            if start <= t < stop:
                f += fv
                tau += tv
        return f, tau

    def force(self, t, v):
        return self._active(t)[0]

    def torque(self, t, omega):
        return self._active(t)[1]


def make_profile(name: str, seed: int = 0, duration_s: float = 10.0):
    """Profile registry used by the command line."""
    if name == "sine":
        return SineProfile()
    if name == "zero":
        return SineProfile(amp_force=(0.0, 0.0, 0.0), amp_torque=(0.0, 0.0, 0.0))
    if name == "drag":
        return DragProfile()
    if name == "spikes":
        return SpikeProfile(rng_seed=seed, duration_s=duration_s)
    raise ValueError(f"unknown profile {name!r}; "
                     "choose from sine, zero, drag, spikes")


def hover_force(params: QuadrotorParams | None = None) -> np.ndarray:
    """Force that exactly cancels gravity in the model's state convention."""
    params = params if params is not None else QuadrotorParams()
    return np.array([0.0, 0.0, params.mass * params.gravity])


def generate_synthetic(profile, duration_s: float, seed: int = 0,
                       rate_hz: float = DEFAULT_RATE,
                       noise_std: tuple = DEFAULT_NOISE,
                       params: QuadrotorParams | None = None,
                       v0=(0.0, 0.0, 0.0), omega0=(0.0, 0.0, 0.0),
                       compensate_gravity: bool = True) -> FlightDataset:
    """Simulate the vehicle under a disturbance profile.

    ``profile`` is a profile object or a registry name.  ``noise_std`` gives
    the measurement noise of the velocity and body-rate channels.  The force
    state of the model is the total applied force, so by default the profile
    rides on top of the hover force and velocities stay bounded; the truth
    column records the total at each sample instant.
    """
    if isinstance(profile, str):
        profile = make_profile(profile, seed=seed, duration_s=duration_s)
    params = params if params is not None else QuadrotorParams()
    noise_std = np.broadcast_to(np.asarray(noise_std, dtype=np.float64), (2,))
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate_hz
    count = int(round(duration_s * rate_hz))
    if count < 1:
        raise ValueError("duration too short for the sample rate")

    J = params.inertia
    Ji = params.inertia_inv
    grav = hover_force(params)
    base = grav if compensate_gravity else np.zeros(3)

    t = np.arange(count) * dt
    y = np.empty((count, 6))
    truth = np.empty((count, 6))
    v = np.asarray(v0, dtype=np.float64).copy()
    omega = np.asarray(omega0, dtype=np.float64).copy()
    for k in range(count):
        f = base + np.asarray(profile.force(t[k], v), dtype=np.float64)
        tau = np.asarray(profile.torque(t[k], omega), dtype=np.float64)
        truth[k, 0:3] = f
        truth[k, 3:6] = tau
        y[k, 0:3] = v + rng.normal(0.0, noise_std[0], 3)
        y[k, 3:6] = omega + rng.normal(0.0, noise_std[1], 3)
        v = v + dt * (f - grav) / params.mass
        omega = omega + dt * (Ji @ (-np.cross(omega, J @ omega) + tau))
    return FlightDataset(t=t, y=y, truth=truth)
