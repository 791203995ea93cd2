"""End-to-end acceptance gate.

Each test asserts one advertised property of the package at its stated
tolerance, in order: derivative correctness against finite differences,
agreement with dense linear-algebra oracles, linear runtime scaling,
training efficacy against an untrained baseline and a first-order
baseline, held-out estimation fidelity, and the module invariants.

The training comparison (criteria 5-7) trains ten seed pairs end to end
and takes tens of minutes; run this file with ``pytest -v`` to get one
pass/fail line per criterion.
"""

import csv
import time
from dataclasses import replace

import numpy as np
import pytest

from mhelearn import data, kf, kkt, network, oracles, training, weights
from mhelearn.cli import main
from mhelearn.model import QuadrotorModel
from mhelearn.training import TrainSettings, steihaug


# ---------------------------------------------------------------------------
# criteria 1-3: derivative checks at the advertised protocol sizes
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def derivative_checks():
    t0 = time.perf_counter()
    results = {r.name: r for r in oracles.run_checks(
        windows=20, horizon=10, hessian_windows=10, hessian_horizon=5,
        seed=0)}
    results["elapsed_s"] = time.perf_counter() - t0
    return results


def test_criterion_1_gradient_matches_finite_differences(derivative_checks):
    res = derivative_checks["first_order_fd"]
    assert res.worst < 1e-3, (
        f"worst relative gradient error {res.worst:.3e} over 20 windows "
        f"at horizon 10 (limit 1e-3, absolute floor 1e-6)")


def test_criterion_2_hessian_matches_fd_of_gradient(derivative_checks):
    res = derivative_checks["second_order_fd"]
    assert res.worst < 1e-2, (
        f"worst relative Hessian error {res.worst:.3e} over 10 windows "
        f"at horizon 5 (limit 1e-2, absolute floor 1e-5)")


def test_criterion_3_recursion_matches_dense_solves(derivative_checks):
    g = derivative_checks["dense_gradient_form"]
    h = derivative_checks["dense_hessian_form"]
    assert g.worst < 1e-8, (
        f"gradient-form recursion deviates {g.worst:.3e} from the dense "
        f"factorization at sizes (3, 2, 2, 5)")
    assert h.worst < 1e-8, (
        f"hessian-form recursion deviates {h.worst:.3e} from the dense "
        f"factorization at sizes (3, 2, 2, 5)")


# ---------------------------------------------------------------------------
# criterion 4: linear runtime scaling in the horizon
# ---------------------------------------------------------------------------

def test_criterion_4_runtime_scales_linearly_with_horizon(tmp_path):
    code = main(["bench", "--output-dir", str(tmp_path), "--reps", "21"])
    assert code == 0
    with open(tmp_path / "bench.csv", newline="", encoding="utf-8") as fh:
        rows = {row["pass"]: row for row in csv.DictReader(fh)}
    assert set(rows) == {"gradient", "hessian"}
    for name, row in rows.items():
        dev = float(row["fit_deviation"])
        ratio = float(row["ratio_80_10"])
        assert dev < 0.25, (
            f"{name} pass deviates {dev:.1%} from a proportional fit over "
            f"horizons 10-80 (limit 25%, time(80)/time(10) = {ratio:.2f})")


# ---------------------------------------------------------------------------
# criteria 5-7: training efficacy, baseline comparison, held-out fidelity
# ---------------------------------------------------------------------------

N_SEEDS = 10


@pytest.fixture(scope="module")
def seed_runs():
    """Train every seed with both methods on the default dataset."""
    dataset = data.generate_synthetic("sine", duration_s=0.25, seed=0)
    settings = TrainSettings()
    frozen = replace(settings, max_episodes=1, gd_learning_rate=0.0)
    runs = []
    for seed in range(N_SEEDS):
        params0 = network.kaiming_init(seed)
        untrained = training.train_gradient_descent(
            dataset, params0, frozen).episode_losses[0]
        t0 = time.perf_counter()
        tr = training.train_trust_region(dataset, params0, settings)
        tr_wall = time.perf_counter() - t0
        gd = training.train_gradient_descent(dataset, params0, settings)
        runs.append({"seed": seed, "untrained": untrained, "tr": tr,
                     "gd": gd, "tr_wall_s": tr_wall})
    return runs


def test_criterion_5_trust_region_reaches_tenth_of_untrained(seed_runs):
    hits = 0
    lines = []
    for run in seed_runs:
        best = min(run["tr"].episode_losses)
        ratio = best / run["untrained"]
        hits += ratio <= 0.1
        lines.append(f"seed {run['seed']}: best/untrained = {ratio:.4f}, "
                     f"wall {run['tr_wall_s']:.0f} s")
        assert run["tr_wall_s"] < 600.0, (
            f"seed {run['seed']} took {run['tr_wall_s']:.0f} s to train "
            f"(limit 600 s)\n" + "\n".join(lines))
    assert hits >= 8, (
        f"only {hits}/{N_SEEDS} seeds reached 10% of the untrained loss "
        f"within 20 episodes (need 8)\n" + "\n".join(lines))


def test_criterion_6_trust_region_beats_gradient_descent(seed_runs):
    wins = 0
    lines = []
    for run in seed_runs:
        tr_final = run["tr"].episode_losses[-1]
        gd_final = run["gd"].episode_losses[-1]
        wins += tr_final <= gd_final
        lines.append(f"seed {run['seed']}: tr {tr_final:.4f} "
                     f"vs gd {gd_final:.4f}")
    assert wins >= 7, (
        f"trust-region final loss beat gradient descent on only "
        f"{wins}/{N_SEEDS} seeds (need 7)\n" + "\n".join(lines))


def test_criterion_7_held_out_rmse(seed_runs):
    best = min(seed_runs, key=lambda run: min(run["tr"].episode_losses))
    params = best["tr"].params_best
    # same generator and seed: the first half is the training set,
    # the scored second half is unseen
    full = data.generate_synthetic("sine", duration_s=0.5, seed=0)
    ev = training.evaluate(full, params, burn_in_s=0.25)
    detail = (f"seed {best['seed']} held-out RMSE: "
              f"F {ev.rmse['F_N']:.4f} N (limit 0.2), "
              f"tau {ev.rmse['tau_Nm']:.5f} N*m (limit 0.02)")
    assert ev.rmse["F_N"] < 0.2, detail
    assert ev.rmse["tau_Nm"] < 0.02, detail


# ---------------------------------------------------------------------------
# criterion 8: module invariants, bundled and timed
# ---------------------------------------------------------------------------

def test_criterion_8_module_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    # weight schedules stay positive definite over 1000 random inputs
    for _ in range(1000):
        theta = rng.uniform(-8.0, 8.0, weights.N_THETA)
        sched = weights.expand(theta, horizon=10)
        assert np.all(np.diagonal(sched.P) >= weights.WEIGHT_FLOOR)
        assert all(np.all(np.diagonal(Q) >= weights.WEIGHT_FLOOR)
                   for Q in sched.Q)
        assert all(np.all(np.diagonal(R) >= weights.WEIGHT_FLOOR)
                   for R in sched.R)

    assert network.N_PARAMS == 362

    # tuning Hessian of the estimate is symmetric on a real window
    model = QuadrotorModel()
    dsq = data.generate_synthetic("sine", duration_s=0.25, seed=2)
    params = network.kaiming_init(2)
    window = oracles._window_from_dataset(dsq, 8, 4, model, params)
    theta = network.forward(params, dsq.y[8])
    traj, sol, foc = oracles.analytic_state_gradient(model, window, theta)
    sched = weights.expand(theta, window.horizon)
    dsched = weights.d_schedule(theta, window.horizon)
    d2sched = weights.d2_schedule(theta, window.horizon)
    p = weights.N_THETA
    zero_sens = np.zeros((model.nx, p))
    soc = kkt.second_order(model, window, sched, sol, traj, dsched,
                           d2sched, zero_sens)
    hesstraj = kf.hessian_trajectory(foc, soc, np.zeros((model.nx, p, p)))
    Hx = hesstraj.X[-1]
    assert Hx.shape == (model.nx, p, p)
    assert np.array_equal(Hx, Hx.transpose(0, 2, 1))
    assert hesstraj.max_asym < 1e-6

    # trust-region steps stay inside the radius and beat the Cauchy point
    for _ in range(200):
        dim = int(rng.integers(2, 12))
        A = rng.standard_normal((dim, dim))
        H = (A + A.T) / 2
        g = rng.standard_normal(dim)
        radius = float(rng.uniform(0.05, 2.0))
        step, hit, decrease = steihaug(g, H, radius)
        assert np.linalg.norm(step) <= radius * (1 + 1e-9)
        gnorm = float(np.linalg.norm(g))
        tau = radius / gnorm
        curv = float(g @ H @ g)
        if curv > 0:
            tau = min(tau, gnorm ** 2 / curv)
        cauchy = -tau * g
        cauchy_dec = -(g @ cauchy + 0.5 * cauchy @ H @ cauchy)
        assert decrease >= cauchy_dec - 1e-9

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"invariant suite took {elapsed:.1f} s"
