"""Command-line entry point: synth, train, eval, gradcheck, bench.

Configuration is one JSON document; flags override file values, and the
MHELEARN_OUTDIR environment variable overrides the configured output
directory.  Every artifact a run writes is suffixed with its seed so that
parallel seed workers never touch the same file, and step metrics stream
to disk as JSON lines while the run progresses.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data, kf, kkt, mhe, network, oracles, training, weights
from .model import QuadrotorModel

OUTDIR_ENV = "MHELEARN_OUTDIR"
BENCH_HORIZONS = (10, 20, 40, 60, 80)


@dataclass
class RunConfig:
    """Tunables shared by the commands, with the documented defaults."""

    horizon: int = 10
    dt: float = 1.0 / 400.0
    weight_floor: float = weights.WEIGHT_FLOOR
    activation_slope: float = network.DEFAULT_SLOPE
    loss_weights: tuple = (1.0, 1.0, 1.0, 100.0, 100.0, 100.0)
    accept_min: float = 0.05
    shrink_below: float = 0.25
    grow_above: float = 0.75
    shrink: float = 0.25
    grow: float = 2.0
    radius0: float = 1.0
    radius_max: float = 10.0
    learning_rate: float = 1e-4
    max_episodes: int = 20
    seeds: list = field(default_factory=lambda: [0])
    dataset: str | None = None
    checkpoint: str | None = None
    output_dir: str = "runs"
    workers: int | None = None

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.weight_floor <= 0:
            raise ValueError("weight_floor must be positive")
        if not 0 < self.activation_slope < 1:
            raise ValueError("activation_slope must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.max_episodes < 1:
            raise ValueError("max_episodes must be at least 1")
        if not self.seeds or any(int(s) != s for s in self.seeds):
            raise ValueError("seeds must be a non-empty list of integers")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be at least 1")
        # constructor validation covers the remaining module invariants
        training.LossSpec(tuple(self.loss_weights)).matrix()
        cfg = self.trm_config()
        if not 0 <= cfg.accept_min < cfg.shrink_below < cfg.grow_above <= 1:
            raise ValueError("need 0 <= accept_min < shrink_below "
                             "< grow_above <= 1")
        if not 0 < cfg.shrink < 1 < cfg.grow:
            raise ValueError("need 0 < shrink < 1 < grow")
        if not 0 < cfg.radius0 <= cfg.radius_max:
            raise ValueError("need 0 < radius0 <= radius_max")

    def trm_config(self) -> training.TrustRegionConfig:
        return training.TrustRegionConfig(
            accept_min=self.accept_min, shrink_below=self.shrink_below,
            grow_above=self.grow_above, shrink=self.shrink, grow=self.grow,
            radius0=self.radius0, radius_max=self.radius_max)

    def train_settings(self) -> training.TrainSettings:
        return training.TrainSettings(
            horizon=self.horizon,
            loss=training.LossSpec(tuple(self.loss_weights)),
            max_episodes=self.max_episodes,
            gd_learning_rate=self.learning_rate,
            weight_floor=self.weight_floor)


def load_config(path, overrides: dict) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus flag overrides."""
    doc = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if OUTDIR_ENV in os.environ and overrides.get("output_dir") is None:
        doc["output_dir"] = os.environ[OUTDIR_ENV]
    cfg = RunConfig(**doc)
    cfg.validate()
    return cfg


def parse_seeds(text: str) -> list:
    """'10' means seeds 0..9; '0,3,7' (or '5,') is an explicit list."""
    if "," in text:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    count = int(text)
    if count < 1:
        raise ValueError("seed count must be positive; use a trailing "
                         "comma ('5,') for one explicit seed")
    return list(range(count))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_one_seed(args):
    cfg, method, seed, dataset = args
    params0 = network.kaiming_init(seed, slope=cfg.activation_slope)
    settings = cfg.train_settings()
    metrics_path = os.path.join(cfg.output_dir,
                                f"metrics_{method}_seed{seed}.jsonl")
    t0 = time.perf_counter()
    with open(metrics_path, "w", encoding="utf-8") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec.to_json_dict()) + "\n")
            fh.flush()
        if method == "tr":
            result = training.train_trust_region(
                dataset, params0, settings, trm_cfg=cfg.trm_config(),
                on_record=on_record)
        else:
            result = training.train_gradient_descent(
                dataset, params0, settings, on_record=on_record)
    wall_s = time.perf_counter() - t0

    network.save_checkpoint(
        os.path.join(cfg.output_dir, f"checkpoint_{method}_seed{seed}.json"),
        result.params, seed=seed,
        extra={"method": method, "episode_losses": result.episode_losses})
    if result.params_best is not None:
        network.save_checkpoint(
            os.path.join(cfg.output_dir,
                         f"checkpoint_best_{method}_seed{seed}.json"),
            result.params_best, seed=seed,
            extra={"method": method, "best_episode": result.best_episode,
                   "best_loss": min(result.episode_losses)})
    curve = os.path.join(cfg.output_dir, f"loss_curve_{method}_seed{seed}.csv")
    with open(curve, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "mean_loss"])
        for ep, loss in enumerate(result.episode_losses):
            writer.writerow([ep, f"{loss:.17g}"])
    return {"seed": seed, "episodes": len(result.episode_losses),
            "final_loss": result.episode_losses[-1],
            "best_loss": min(result.episode_losses),
            "best_episode": result.best_episode,
            "solver_failures": result.solver_failures,
            "converged_episode": result.converged_episode,
            "wall_s": wall_s}


def cmd_train(args) -> int:
    cfg = load_config(args.config, {
        "dataset": args.dataset, "output_dir": args.output_dir,
        "horizon": args.horizon, "max_episodes": args.episodes,
        "learning_rate": args.lr, "workers": args.workers,
        "seeds": parse_seeds(args.seeds) if args.seeds else None,
    })
    if not cfg.dataset:
        raise ValueError("train needs a dataset (--dataset or config)")
    dataset = data.load_csv(cfg.dataset)
    if dataset.truth is None:
        raise ValueError("training data must include ground-truth columns")
    os.makedirs(cfg.output_dir, exist_ok=True)

    jobs = [(cfg, args.method, seed, dataset) for seed in cfg.seeds]
    if len(jobs) == 1:
        rows = [_train_one_seed(jobs[0])]
    else:
        workers = cfg.workers or min(len(jobs), os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_train_one_seed, jobs))

    summary_path = os.path.join(cfg.output_dir, f"summary_{args.method}.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump({"method": args.method, "config": _config_dict(cfg),
                   "seeds": rows}, fh, indent=1)
        fh.write("\n")
    print(f"{'seed':>4s} {'final_loss':>12s} {'best_loss':>12s} "
          f"{'episodes':>8s} {'wall_s':>7s}")
    for row in rows:
        print(f"{row['seed']:4d} {row['final_loss']:12.6f} "
              f"{row['best_loss']:12.6f} {row['episodes']:8d} "
              f"{row['wall_s']:7.1f}")
    print(f"artifacts in {cfg.output_dir}")
    return 0


def _config_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc["loss_weights"] = list(doc["loss_weights"])
    return doc


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = load_config(args.config, {
        "dataset": args.dataset, "checkpoint": args.checkpoint,
        "output_dir": args.output_dir, "horizon": args.horizon,
    })
    if not cfg.dataset or not cfg.checkpoint:
        raise ValueError("eval needs a dataset and a checkpoint")
    dataset = data.load_csv(cfg.dataset)
    params = network.load_checkpoint(cfg.checkpoint)
    os.makedirs(cfg.output_dir, exist_ok=True)

    est = training.run_estimator(dataset, params, horizon=cfg.horizon,
                                 model=QuadrotorModel(dt=cfg.dt),
                                 weight_floor=cfg.weight_floor)
    out_path = os.path.join(cfg.output_dir, "estimates.csv")
    est_cols = ["Fx_N", "Fy_N", "Fz_N", "taux_Nm", "tauy_Nm", "tauz_Nm"]
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["t"] + [f"est_{c}" for c in est_cols]
        if dataset.truth is not None:
            header += [f"true_{c}" for c in est_cols]
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [dataset.t[i], *est[i]]
            if dataset.truth is not None:
                row += list(dataset.truth[i])
            writer.writerow(f"{v:.17g}" for v in row)
    print(f"estimates written to {out_path}")

    if dataset.truth is not None:
        keep = dataset.t >= dataset.t[0] + args.burn_in - 1e-12
        if not np.any(keep):
            raise ValueError("--burn-in leaves no samples to score")
        if args.burn_in > 0:
            print(f"burn-in {args.burn_in:g} s: scoring "
                  f"{int(keep.sum())} of {len(dataset)} samples")
        err = est[keep] - dataset.truth[keep]

        def rms(cols):
            return float(np.sqrt(np.mean(np.sum(err[:, cols] ** 2, axis=1))))

        rmse = {"Fxy_N": rms([0, 1]), "Fz_N": rms([2]),
                "tauxy_Nm": rms([3, 4]), "tauz_Nm": rms([5]),
                "F_N": rms([0, 1, 2]), "tau_Nm": rms([3, 4, 5])}
        print(" ".join(f"{k:>10s}" for k in rmse))
        print(" ".join(f"{v:10.6f}" for v in rmse.values()))
    else:
        print("no ground-truth columns; RMSE section omitted")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _corrupted_first_order(model, window, sched, dsched, sol):
    foc = kkt.first_order(model, window, sched, dsched, sol)
    foc.Lxt[:] = -foc.Lxt
    return foc


def cmd_gradcheck(args) -> int:
    load_config(args.config, {})
    sizes = {"default": dict(windows=20, horizon=10, hessian_windows=10,
                             hessian_horizon=5),
             "small": dict(windows=4, horizon=10, hessian_windows=2,
                           hessian_horizon=5)}
    hook = _corrupted_first_order if args.corrupt_first_order else None
    progress = print if args.verbose else None
    results = oracles.run_checks(seed=args.seed, first_order_fn=hook,
                                 progress=progress, **sizes[args.size])
    failed = []
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{res.name:28s} worst {res.worst:.3e}  "
              f"limit {res.limit:.0e}  {status}")
        if not res.passed:
            failed.append(res.name)
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _bench_window(dataset, params, horizon, model):
    """Real window plus assembled sensitivity inputs at one horizon."""
    window = oracles._window_from_dataset(dataset, horizon + 1, horizon,
                                          model, params)
    theta = network.forward(params, dataset.y[horizon + 1])
    sched = weights.expand(theta, window.horizon)
    sol = mhe.solve(model, window, sched, tol=1e-10, max_iter=80)
    dsched = weights.d_schedule(theta, window.horizon)
    d2sched = weights.d2_schedule(theta, window.horizon)
    foc = kkt.first_order(model, window, sched, dsched, sol)
    zero_sens = np.zeros((model.nx, weights.N_THETA))
    traj = kf.gradient_trajectory(foc, zero_sens)
    soc = kkt.second_order(model, window, sched, sol, traj, dsched, d2sched,
                           zero_sens)
    prior_hess = np.zeros((model.nx, weights.N_THETA, weights.N_THETA))
    return foc, soc, zero_sens, prior_hess


def _median_ms(fn, reps) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def proportional_fit_deviation(horizons, times) -> float:
    """Largest relative deviation from the best time = c * N fit."""
    h = np.asarray(horizons, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    c = float(h @ t / (h @ h))
    return float(np.max(np.abs(t - c * h) / (c * h)))


def cmd_bench(args) -> int:
    cfg = load_config(args.config, {"output_dir": args.output_dir})
    backends = {"numba": ["numba"], "numpy": ["numpy"],
                "both": ["numba", "numpy"]}[args.backend]
    if "numba" in backends and not kf._HAVE_NUMBA:
        print("numba unavailable; falling back to numpy", file=sys.stderr)
        backends = ["numpy"]
    os.makedirs(cfg.output_dir, exist_ok=True)

    model = QuadrotorModel(dt=cfg.dt)
    duration = (max(BENCH_HORIZONS) + 5) * model.dt
    dataset = data.generate_synthetic("sine", duration_s=duration,
                                      seed=args.seed)
    params = network.kaiming_init(args.seed)

    rows = []
    for backend in backends:
        grad_ms, hess_ms = [], []
        for N in BENCH_HORIZONS:
            foc, soc, zsens, zhess = _bench_window(dataset, params, N, model)
            kf.gradient_trajectory(foc, zsens, backend=backend)  # warm-up
            kf.hessian_trajectory(foc, soc, zhess, backend=backend)
            grad_ms.append(_median_ms(
                lambda: kf.gradient_trajectory(foc, zsens, backend=backend),
                args.reps))
            hess_ms.append(_median_ms(
                lambda: kf.hessian_trajectory(foc, soc, zhess,
                                              backend=backend), args.reps))
        rows.append((backend, "gradient", grad_ms))
        rows.append((backend, "hessian", hess_ms))

    out_path = os.path.join(cfg.output_dir, "bench.csv")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["backend", "pass"] +
                        [f"N{N}_ms" for N in BENCH_HORIZONS] +
                        ["ratio_80_10", "fit_deviation"])
        print(f"{'backend':>8s} {'pass':>9s} " +
              " ".join(f"{f'N={N}':>9s}" for N in BENCH_HORIZONS) +
              f" {'80/10':>6s} {'fitdev':>7s}")
        for backend, name, times in rows:
            ratio = times[-1] / times[0]
            dev = proportional_fit_deviation(BENCH_HORIZONS, times)
            writer.writerow([backend, name] +
                            [f"{v:.6g}" for v in times] +
                            [f"{ratio:.3f}", f"{dev:.4f}"])
            print(f"{backend:>8s} {name:>9s} " +
                  " ".join(f"{v:9.3f}" for v in times) +
                  f" {ratio:6.2f} {dev:7.3f}")
    print(f"medians of {args.reps} repetitions, milliseconds; "
          f"table written to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    dataset = data.generate_synthetic(
        args.profile, duration_s=args.duration, seed=args.seed,
        noise_std=(args.noise_velocity, args.noise_rate))
    data.write_csv(dataset, args.out)
    print(f"{len(dataset)} samples written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mhelearn",
        description="neural-tuned moving horizon estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--output-dir", help=f"artifact directory "
                       f"(env {OUTDIR_ENV} overrides config)")

    p = sub.add_parser("train", help="train the weight network")
    common(p)
    p.add_argument("--method", choices=("tr", "gd"), default="tr")
    p.add_argument("--dataset", help="training CSV with truth columns")
    p.add_argument("--seeds", help="count ('10') or explicit list ('0,3,7')")
    p.add_argument("--episodes", type=int, help="episode budget")
    p.add_argument("--horizon", type=int, help="estimation horizon")
    p.add_argument("--lr", type=float, help="gradient-descent learning rate")
    p.add_argument("--workers", type=int, help="parallel seed workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run a checkpoint over a dataset")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint JSON")
    p.add_argument("--dataset", help="evaluation CSV")
    p.add_argument("--horizon", type=int, help="estimation horizon")
    p.add_argument("--burn-in", type=float, default=0.0,
                   help="seconds excluded from the RMSE at the start")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run derivative and oracle checks")
    common(p)
    p.add_argument("--size", choices=("default", "small"), default="default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--corrupt-first-order", action="store_true",
                   help=argparse.SUPPRESS)  # fault-injection test hook
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time the sensitivity passes")
    common(p)
    p.add_argument("--backend", choices=("numba", "numpy", "both"),
                   default="both")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p.add_argument("--profile", default="sine",
                   help="disturbance profile name")
    p.add_argument("--duration", type=float, default=0.25,
                   help="length in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-velocity", type=float, default=0.0,
                   help="velocity measurement noise std")
    p.add_argument("--noise-rate", type=float, default=0.0,
                   help="body-rate measurement noise std")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
