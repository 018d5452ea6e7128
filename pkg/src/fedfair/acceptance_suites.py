"""Canonical convergence-check suites shared by the CLI and the test suite.

Both suites are deliberately small enough to run on a laptop yet long enough
for the asymptotic regime to show: the strongly convex suite checks that the
objective gap decays like 1/T under an inverse-t step size with gradient
noise, and the non-convex suite checks that the running-minimum squared
gradient norm keeps shrinking under an inverse-sqrt step size.
"""

from __future__ import annotations

import numpy as np

from fedfair.diagnostics import solve_fair_quadratic_optimum
from fedfair.engine import EngineConfig, run_training
from fedfair.experiment import build_scenario, resolve_config
from fedfair.fairness import FairnessConfig, global_objective_direct, lambda_max
from fedfair.metrics import convergence_slope
from fedfair.schedules import LrSchedule

#: strongly convex suite: K clients of heterogeneous noisy quadratic bowls
QUADRATIC_SUITE = {
    "scenario": "quadratic",
    "clients": 20,
    "num_groups": 4,
    "dim": 8,
    "condition_number": 10.0,
    "optimum_spread": 1.0,
    "noise_sigma": 0.1,
    "pseudo_samples": 64,
    "count_min": 80,
    "count_max": 120,
    "rounds": 2000,
    "local_steps": 5,
    "batch_size": 1,
    "schedule_kind": "inverse-t",
    "schedule_beta": 2.0,
    "schedule_gamma": 40.0,
    "lambda_frac": 0.3,
    "metric_every": 1,
    "seed": 0,
}

QUADRATIC_WINDOW = (100, 10_000)

#: non-convex suite: group-shifted regression fitted by small tanh networks
MLP_SUITE = {
    "scenario": "mlp-regression",
    "clients": 10,
    "num_groups": 2,
    "dim": 4,
    "hidden_width": 6,
    "samples_per_client": 150,
    "group_shift": 1.5,
    "label_noise": 0.3,
    "rounds": 4000,
    "local_steps": 2,
    "batch_size": 20,
    "schedule_kind": "inverse-sqrt",
    "schedule_beta": 0.4,
    "schedule_gamma": 4.0,
    "lambda_frac": 0.3,
    "metric_every": 10,
    "seed": 0,
}

MLP_T0 = 2000


def _run_suite(suite: dict, seed: int):
    cfg = resolve_config({**suite, "seed": int(seed)})
    setup = build_scenario(cfg)
    lam = cfg["lambda_frac"] * lambda_max(setup.federation)
    engine_config = EngineConfig(
        rounds=cfg["rounds"],
        local_steps=cfg["local_steps"],
        schedule=LrSchedule(cfg["schedule_kind"], cfg["schedule_beta"],
                            cfg["schedule_gamma"]),
        lam=lam,
        batch_size=cfg["batch_size"],
        master_seed=cfg["seed"],
        metric_every=cfg["metric_every"],
    )
    losses = np.array([obj.value(setup.theta0) for obj in setup.objectives])
    from fedfair.fairness import group_losses

    initial = group_losses(losses, setup.federation)
    run = run_training(engine_config, setup.federation, setup.objectives,
                       setup.theta0, initial)
    return cfg, setup, lam, run


def quadratic_gap_slope(seed: int):
    """Log-log slope of H(theta_bar) - H* over the suite's step window."""
    cfg, setup, lam, run = _run_suite(QUADRATIC_SUITE, seed)
    theta_star = solve_fair_quadratic_optimum(setup.objectives, setup.federation, lam)
    h_star = global_objective_direct(
        theta_star, setup.objectives, FairnessConfig(lam, setup.federation)
    )
    slope = convergence_slope(run.records, "objective_gap", QUADRATIC_WINDOW,
                              h_star=h_star)
    return slope, run.records


def mlp_min_gradient_ratio(seed: int):
    """Running-min squared gradient norm at 4*T0 relative to its value at T0."""
    cfg, setup, lam, run = _run_suite(MLP_SUITE, seed)
    t0, t1 = MLP_T0, 4 * MLP_T0
    best = np.inf
    at_t0 = None
    at_t1 = None
    for record in run.records:
        best = min(best, record.grad_norm_sq)
        if record.step <= t0:
            at_t0 = best
        if record.step <= t1:
            at_t1 = best
    if at_t0 is None or at_t1 is None:
        raise ValueError("suite too short for the requested horizons")
    return at_t1 / at_t0, run.records
