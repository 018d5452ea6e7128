"""Batch command-line interface.

Subcommands:
    run CONFIG                one training run, writes CSV/manifest/checkpoint
    sweep CONFIG --grid ...   one run per fraction of lambda_max
    check-identity            fuzz the two forms of the fairness objective
    bench-convergence SUITE   empirical decay-rate check (quadratic | mlp)
    diagnose-gamma CONFIG     non-i.i.d.-ness diagnostics of a scenario

Exit codes: 0 success, 1 check failed, 2 configuration error, 3 divergence,
4 i/o error. Errors also emit one JSON line on stderr with a machine-readable
category.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

import fedfair
from fedfair import kernels
from fedfair.diagnostics import gamma_diagnostics
from fedfair.engine import DivergenceError
from fedfair.experiment import (
    ConfigError,
    build_scenario,
    load_config,
    resolve_config,
    resolve_lambda,
    run_experiment,
    sweep_lambda,
    write_sweep_csv,
)
from fedfair.fairness import (
    FairnessConfig,
    global_objective_direct,
    global_objective_weighted,
    lambda_max,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _fail(category: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return code


def _apply_overrides(config_source, seed):
    cfg = load_config(config_source)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _cmd_run(args) -> int:
    cfg = _apply_overrides(args.config, args.seed)
    result = run_experiment(cfg, args.out_dir)
    print(f"wrote {result.csv_path} ({len(result.run.records)} metric rows)")
    print(f"wrote {result.manifest_path}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _apply_overrides(args.config, args.seed)
    grid = [float(v) for v in args.grid.split(",") if v != ""]
    rows = sweep_lambda(cfg, grid, out_dir=args.out_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    write_sweep_csv(rows, path)
    print(f"wrote {path} ({len(rows)} rows)")
    for row in rows:
        print(
            f"lambda={row['lambda']:.6g} mean_loss={row['mean_loss']:.6g} "
            f"variance={row['loss_variance']:.6g} discrepancy={row['discrepancy']:.6g}"
        )
    return EXIT_OK


def _random_federation(rng):
    from fedfair.federation import FederationSpec

    d = int(rng.integers(2, 7))
    k = int(rng.integers(d, 61))
    groups = np.concatenate([np.arange(d), rng.integers(0, d, size=k - d)])
    rng.shuffle(groups)
    counts = rng.integers(1, 50, size=k)
    return FederationSpec(groups=groups, sample_counts=counts, num_groups=d)


def _cmd_check_identity(args) -> int:
    from fedfair.objectives import make_quadratic

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    worst = 0.0
    for _ in range(args.trials):
        fed = _random_federation(rng)
        dim = int(rng.integers(1, 5))
        cond = 1.0 if dim == 1 else float(rng.uniform(1.0, 20.0))
        objectives = [
            make_quadratic(dim, cond, rng.standard_normal(dim),
                           rng_seed=int(rng.integers(2**63)),
                           offset=float(rng.uniform(0.0, 1.0)))
            for _ in range(fed.num_clients)
        ]
        lam = float(rng.uniform(0.0, 0.999)) * lambda_max(fed)
        config = FairnessConfig(lam, fed)
        theta = rng.standard_normal(dim)
        direct = global_objective_direct(theta, objectives, config)
        weighted = global_objective_weighted(theta, objectives, config)
        err = abs(direct - weighted) / (1.0 + abs(direct))
        worst = max(worst, err)
    ok = worst <= 1e-10
    print(f"identity fuzz: {args.trials} trials, worst relative error {worst:.3e} "
          f"-> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_bench_convergence(args) -> int:
    from fedfair.acceptance_suites import (
        mlp_min_gradient_ratio,
        quadratic_gap_slope,
    )

    seed = args.seed if args.seed is not None else 0
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.suite == "quadratic":
        slope, records = quadratic_gap_slope(seed)
        from fedfair.metrics import write_metrics_csv

        write_metrics_csv(records, out / "bench_quadratic.csv")
        ok = -1.3 <= slope <= -0.8
        print(f"quadratic suite: log-log objective-gap slope {slope:.4f} "
              f"-> {'PASS' if ok else 'FAIL'} (target [-1.3, -0.8])")
        return EXIT_OK if ok else EXIT_CHECK_FAILED
    ratio, records = mlp_min_gradient_ratio(seed)
    from fedfair.metrics import write_metrics_csv

    write_metrics_csv(records, out / "bench_mlp.csv")
    ok = ratio <= 0.6
    print(f"mlp suite: min grad-norm-sq ratio (4T0 vs T0) {ratio:.4f} "
          f"-> {'PASS' if ok else 'FAIL'} (target <= 0.6)")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_diagnose_gamma(args) -> int:
    cfg = resolve_config(_apply_overrides(args.config, args.seed))
    setup = build_scenario(cfg)
    lam = resolve_lambda(cfg, setup.federation)
    diag = gamma_diagnostics(setup.federation, setup.objectives,
                             setup.theta0, lam=lam)
    payload = {
        "gamma_k": diag.gamma_k,
        "gamma_max": diag.gamma_max,
        "h_star": diag.h_star,
        "lambda": lam,
        "lambda_max": lambda_max(setup.federation),
    }
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "gamma.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedfair",
        description="Deterministic fair federated-learning simulator "
                    f"(v{fedfair.__version__}, {kernels.BACKEND} kernels)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out-dir", default="out",
                       help="directory for artifacts (default: ./out)")

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="path to a flat JSON config")
    common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep fractions of lambda_max")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--grid", default="0,0.3,0.6,0.9",
                         help="comma-separated fractions of lambda_max")
    common(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_ident = sub.add_parser("check-identity",
                             help="fuzz the penalty and rank-weighted objective forms")
    p_ident.add_argument("--trials", type=int, default=1000)
    common(p_ident)
    p_ident.set_defaults(func=_cmd_check_identity)

    p_bench = sub.add_parser("bench-convergence",
                             help="empirical convergence-rate suites")
    p_bench.add_argument("suite", choices=("quadratic", "mlp"))
    common(p_bench)
    p_bench.set_defaults(func=_cmd_bench_convergence)

    p_gamma = sub.add_parser("diagnose-gamma",
                             help="non-i.i.d.-ness diagnostics for a scenario")
    p_gamma.add_argument("config")
    common(p_gamma)
    p_gamma.set_defaults(func=_cmd_diagnose_gamma)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        return _fail("config", str(err), EXIT_CONFIG)
    except DivergenceError as err:
        return _fail("divergence", str(err), EXIT_DIVERGENCE)
    except OSError as err:
        return _fail("io", str(err), EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
