"""Experiment configuration, scenario construction, and run orchestration.

A configuration is one flat JSON object (see CONFIG_SCHEMA). run_experiment
builds the scenario, validates the fairness multiplier against lambda_max
before any training starts, runs the requested engine, and writes three
artifacts into the output directory:

    metrics.csv    - fixed schema, byte-identical across reruns
    manifest.json  - the fully resolved config plus lambda_max, seeds,
                     library version, kernel backend, and the CSV digest
    final.ckpt     - the final server state (binary checkpoint)

Data-backed scenarios split every client shard 70/10/20 into train/val/test
by a seeded permutation; training and the objective columns use the train
split, the loss columns of the CSV use the test split, and the validation
slice is reserved for tuning workflows.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

import fedfair
from fedfair import kernels
from fedfair.diagnostics import gamma_diagnostics
from fedfair.engine import EngineConfig, RunResult, run_training
from fedfair.fairness import lambda_max
from fedfair.federation import FederationSpec
from fedfair.checkpoint import save_checkpoint
from fedfair.metrics import write_metrics_csv
from fedfair.objectives import (
    SmallMLPObjective,
    make_least_squares,
    make_logistic,
    make_quadratic,
    make_small_mlp,
)
from fedfair.partition import (
    RegressionTask,
    partition_group_shifted,
    partition_label_skew,
    synthetic_classification_pool,
)
from fedfair.personalization import (
    DittoConfig,
    PersonalStates,
    run_ditto_training,
)
from fedfair.schedules import KINDS, LrSchedule
from fedfair.shards import DatasetShard, split_shard

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

SCENARIOS = (
    "quadratic",
    "iid-quadratic",
    "two-group-regression",
    "mlp-regression",
    "label-skew-logistic",
)

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scenario", "rounds", "local_steps", "schedule_kind",
                 "schedule_beta", "seed"],
    "properties": {
        "scenario": {"enum": list(SCENARIOS)},
        "rounds": {"type": "integer", "minimum": 0},
        "local_steps": {"type": "integer", "minimum": 1},
        "schedule_kind": {"enum": list(KINDS)},
        "schedule_beta": {"type": "number", "exclusiveMinimum": 0},
        "schedule_gamma": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "lambda_frac": {"type": "number", "minimum": 0},
        "lambda_value": {"type": "number", "minimum": 0},
        "participation": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "batch_size": {"type": ["integer", "null"], "minimum": 1},
        "sampling": {"enum": ["by-probability", "uniform"]},
        "metric_every": {"type": "integer", "minimum": 1},
        "refresh_loss_at": {"enum": ["local", "aggregate"]},
        "compute_gamma": {"type": "boolean"},
        "personalize": {"type": "boolean"},
        "ditto_lambda": {"type": "number", "exclusiveMinimum": 0},
        "personal_steps": {"type": "integer", "minimum": 0},
        "personal_schedule_kind": {"enum": list(KINDS)},
        "personal_schedule_beta": {"type": "number", "exclusiveMinimum": 0},
        "personal_schedule_gamma": {"type": "number", "exclusiveMinimum": 0},
        # scenario parameters
        "clients": {"type": "integer", "minimum": 2},
        "num_groups": {"type": "integer", "minimum": 2},
        "group_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "dim": {"type": "integer", "minimum": 1},
        "condition_number": {"type": "number", "minimum": 1},
        "optimum_spread": {"type": "number", "minimum": 0},
        "noise_sigma": {"type": "number", "minimum": 0},
        "pseudo_samples": {"type": "integer", "minimum": 0},
        "count_min": {"type": "integer", "minimum": 1},
        "count_max": {"type": "integer", "minimum": 1},
        "samples_per_client": {"type": "integer", "minimum": 2},
        "group_shift": {"type": "number", "minimum": 0},
        "label_noise": {"type": "number", "minimum": 0},
        "ridge": {"type": "number", "minimum": 0},
        "hidden_width": {"type": "integer", "minimum": 1},
        "classes": {"type": "integer", "minimum": 2},
        "classes_per_client": {"type": "integer", "minimum": 1},
    },
}

_DEFAULTS = {
    "schedule_gamma": 1.0,
    "lambda_frac": 0.0,
    "participation": 1.0,
    "batch_size": None,
    "sampling": "by-probability",
    "metric_every": 1,
    "refresh_loss_at": "local",
    "compute_gamma": False,
    "personalize": False,
    "personal_steps": 0,
    "clients": 10,
    "num_groups": 2,
    "dim": 6,
    "condition_number": 10.0,
    "optimum_spread": 1.0,
    "noise_sigma": 0.0,
    "pseudo_samples": 0,
    "count_min": 100,
    "count_max": 100,
    "samples_per_client": 200,
    "group_shift": 1.0,
    "label_noise": 0.5,
    "ridge": 0.0,
    "hidden_width": 6,
    "classes": 10,
    "classes_per_client": 5,
}


class ConfigError(ValueError):
    """The configuration is invalid; nothing was computed."""


def load_config(source) -> dict:
    """Accept a dict, a JSON string, or a path to a JSON file."""
    if isinstance(source, dict):
        return dict(source)
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.exists():
            text = path.read_text()
        else:
            text = str(source)
        try:
            config = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from err
        if not isinstance(config, dict):
            raise ConfigError("config must be a JSON object")
        return config
    raise ConfigError(f"unsupported config source {type(source)!r}")


def resolve_config(config: dict) -> dict:
    """Validate against the schema and fill in every default."""
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"invalid config: {err.message}") from err
    resolved = dict(_DEFAULTS)
    resolved.update(config)
    if "lambda_value" in resolved and resolved.get("lambda_frac", 0.0) > 0.0:
        raise ConfigError("give lambda_value or lambda_frac, not both")
    if "lambda_value" not in resolved and not 0.0 <= resolved["lambda_frac"] < 1.0:
        raise ConfigError("lambda_frac must lie in [0, 1)")
    if resolved["personalize"]:
        for key in ("ditto_lambda", "personal_schedule_kind", "personal_schedule_beta"):
            if key not in resolved:
                raise ConfigError(f"personalize=true requires {key}")
        resolved.setdefault("personal_schedule_gamma", 1.0)
        if resolved["personal_steps"] < 1:
            raise ConfigError("personalize=true requires personal_steps >= 1")
    return resolved


@dataclass
class SimulationSetup:
    """Everything a run needs: population, objectives, start point."""

    federation: FederationSpec
    objectives: list
    theta0: np.ndarray
    eval_objectives: list | None = None


def _counts(cfg, rng):
    lo, hi = cfg["count_min"], cfg["count_max"]
    if hi < lo:
        raise ConfigError("count_max must be >= count_min")
    if lo == hi:
        return np.full(cfg["clients"], lo, dtype=np.int64)
    return rng.integers(lo, hi + 1, size=cfg["clients"])


def _group_layout(cfg) -> np.ndarray:
    if "group_sizes" in cfg:
        sizes = np.asarray(cfg["group_sizes"], dtype=np.int64)
        if int(sizes.sum()) != cfg["clients"]:
            raise ConfigError("group_sizes must sum to clients")
        return sizes
    d, k = cfg["num_groups"], cfg["clients"]
    base = k // d
    sizes = np.full(d, base, dtype=np.int64)
    sizes[: k - base * d] += 1
    return sizes


def _build_quadratic(cfg, identical: bool) -> SimulationSetup:
    rng = np.random.default_rng(cfg["seed"])
    sizes = _group_layout(cfg)
    counts = _counts(cfg, rng)
    federation = FederationSpec(
        groups=np.repeat(np.arange(sizes.shape[0]), sizes),
        sample_counts=counts,
        num_groups=sizes.shape[0],
    )
    objectives = []
    shared = None
    for k in range(cfg["clients"]):
        if identical and shared is not None:
            objectives.append(shared)
            continue
        optimum = cfg["optimum_spread"] * rng.standard_normal(cfg["dim"])
        obj = make_quadratic(
            cfg["dim"], cfg["condition_number"], optimum,
            rng_seed=int(rng.integers(2**63)),
            noise_samples=cfg["pseudo_samples"],
            noise_sigma=cfg["noise_sigma"],
        )
        objectives.append(obj)
        shared = obj
    return SimulationSetup(
        federation=federation,
        objectives=objectives,
        theta0=np.zeros(cfg["dim"]),
    )


def _split_objectives(shards, rng, build):
    """70/10/20 split per client; returns (train, test) objective lists and
    the per-client training sample counts."""
    train_objs, test_objs, train_counts = [], [], []
    for shard in shards:
        train, _val, test = split_shard(shard, SPLIT_FRACTIONS, rng)
        train_objs.append(build(train))
        test_objs.append(build(test))
        train_counts.append(train.num_samples)
    return train_objs, test_objs, np.asarray(train_counts, dtype=np.int64)


def _build_two_group_regression(cfg) -> SimulationSetup:
    rng = np.random.default_rng(cfg["seed"])
    sizes = _group_layout(cfg)
    direction = rng.standard_normal(cfg["dim"])
    direction /= np.linalg.norm(direction)
    base = rng.standard_normal(cfg["dim"])
    shift = cfg["group_shift"]
    tasks = [
        RegressionTask(
            coefficients=base + (i - (sizes.shape[0] - 1) / 2.0) * shift * direction,
            label_noise=cfg["label_noise"],
        )
        for i in range(sizes.shape[0])
    ]
    federation, shards = partition_group_shifted(
        cfg["clients"], sizes, tasks, cfg["samples_per_client"],
        rng_seed=int(rng.integers(2**63)),
    )
    train, test, counts = _split_objectives(
        shards, rng, lambda s: make_least_squares(s, ridge=cfg["ridge"])
    )
    federation = FederationSpec(
        groups=federation.groups, sample_counts=counts,
        num_groups=federation.num_groups,
    )
    return SimulationSetup(
        federation=federation, objectives=train,
        theta0=np.zeros(cfg["dim"]), eval_objectives=test,
    )


def _build_mlp_regression(cfg) -> SimulationSetup:
    rng = np.random.default_rng(cfg["seed"])
    sizes = _group_layout(cfg)
    direction = rng.standard_normal(cfg["dim"])
    direction /= np.linalg.norm(direction)
    base = rng.standard_normal(cfg["dim"])
    tasks = [
        RegressionTask(
            coefficients=base
            + (i - (sizes.shape[0] - 1) / 2.0) * cfg["group_shift"] * direction,
            label_noise=cfg["label_noise"],
        )
        for i in range(sizes.shape[0])
    ]
    federation, shards = partition_group_shifted(
        cfg["clients"], sizes, tasks, cfg["samples_per_client"],
        rng_seed=int(rng.integers(2**63)),
    )
    init_seed = int(rng.integers(2**63))
    theta0 = None
    train_objs, test_objs, counts = [], [], []
    for shard in shards:
        train, _val, test = split_shard(shard, SPLIT_FRACTIONS, rng)
        obj, init = make_small_mlp(train, cfg["hidden_width"], init_seed)
        if theta0 is None:
            theta0 = init  # every client shares the same seeded init
        train_objs.append(obj)
        test_objs.append(SmallMLPObjective(test, cfg["hidden_width"]))
        counts.append(train.num_samples)
    federation = FederationSpec(
        groups=federation.groups,
        sample_counts=np.asarray(counts, dtype=np.int64),
        num_groups=federation.num_groups,
    )
    return SimulationSetup(
        federation=federation, objectives=train_objs,
        theta0=theta0, eval_objectives=test_objs,
    )


def _build_label_skew_logistic(cfg) -> SimulationSetup:
    rng = np.random.default_rng(cfg["seed"])
    k = cfg["clients"]
    pool = synthetic_classification_pool(
        num_samples=max(cfg["classes"] * cfg["samples_per_client"], 5000),
        num_classes=cfg["classes"], dim=cfg["dim"],
        rng_seed=int(rng.integers(2**63)),
    )
    shards = partition_label_skew(
        pool, k, cfg["classes_per_client"], cfg["samples_per_client"],
        rng_seed=int(rng.integers(2**63)),
    )
    # binary task: is the sample's class in the lower half of the label space
    cut = cfg["classes"] / 2.0
    shards = [
        DatasetShard(s.features, (s.labels < cut).astype(np.float64))
        for s in shards
    ]
    train, test, counts = _split_objectives(
        shards, rng, lambda s: make_logistic(s, ridge=max(cfg["ridge"], 1e-3))
    )
    # individual fairness: every client is its own group
    federation = FederationSpec(
        groups=np.arange(k, dtype=np.int64), sample_counts=counts, num_groups=k
    )
    return SimulationSetup(
        federation=federation, objectives=train,
        theta0=np.zeros(cfg["dim"]), eval_objectives=test,
    )


def build_scenario(cfg: dict) -> SimulationSetup:
    scenario = cfg["scenario"]
    if scenario == "quadratic":
        return _build_quadratic(cfg, identical=False)
    if scenario == "iid-quadratic":
        return _build_quadratic(cfg, identical=True)
    if scenario == "two-group-regression":
        return _build_two_group_regression(cfg)
    if scenario == "mlp-regression":
        return _build_mlp_regression(cfg)
    if scenario == "label-skew-logistic":
        return _build_label_skew_logistic(cfg)
    raise ConfigError(f"unknown scenario {scenario!r}")


def resolve_lambda(cfg: dict, federation: FederationSpec) -> float:
    bound = lambda_max(federation)
    if "lambda_value" in cfg:
        lam = float(cfg["lambda_value"])
        if lam >= bound:
            raise ConfigError(
                f"lambda_value {lam} is not below lambda_max {bound}"
            )
        return lam
    return float(cfg["lambda_frac"]) * bound


@dataclass
class ExperimentResult:
    resolved_config: dict
    run: RunResult
    lam: float
    lambda_max: float
    csv_path: Path | None = None
    manifest_path: Path | None = None


def execute(cfg: dict) -> ExperimentResult:
    """Build the scenario and run training; no files are written."""
    setup = build_scenario(cfg)
    lam = resolve_lambda(cfg, setup.federation)
    engine_config = EngineConfig(
        rounds=cfg["rounds"],
        local_steps=cfg["local_steps"],
        schedule=LrSchedule(cfg["schedule_kind"], cfg["schedule_beta"],
                            cfg["schedule_gamma"]),
        lam=lam,
        participation=cfg["participation"],
        batch_size=cfg["batch_size"],
        sampling=cfg["sampling"],
        master_seed=cfg["seed"],
        metric_every=cfg["metric_every"],
        refresh_loss_at=cfg["refresh_loss_at"],
    )
    theta0 = setup.theta0
    initial_losses = _initial_group_losses(setup, theta0)
    if cfg["personalize"]:
        ditto = DittoConfig(
            lam_prox=cfg["ditto_lambda"],
            personal_steps=cfg["personal_steps"],
            schedule=LrSchedule(cfg["personal_schedule_kind"],
                                cfg["personal_schedule_beta"],
                                cfg["personal_schedule_gamma"]),
        )
        v0 = PersonalStates.initial(setup.federation.num_clients, theta0)
        run = run_ditto_training(
            engine_config, ditto, setup.federation, setup.objectives,
            theta0, v0, initial_losses,
            metric_objectives=setup.eval_objectives,
        )
    else:
        run = run_training(
            engine_config, setup.federation, setup.objectives, theta0,
            initial_losses, metric_objectives=setup.eval_objectives,
        )
    if cfg["compute_gamma"] and run.records:
        diag = gamma_diagnostics(setup.federation, setup.objectives,
                                 run.theta, lam=lam)
        run.records[-1] = dataclasses.replace(run.records[-1], gamma_k=diag.gamma_k)
    return ExperimentResult(
        resolved_config=cfg, run=run, lam=lam,
        lambda_max=lambda_max(setup.federation),
    )


def _initial_group_losses(setup: SimulationSetup, theta0) -> np.ndarray:
    from fedfair.fairness import group_losses

    losses = np.array([obj.value(theta0) for obj in setup.objectives])
    return group_losses(losses, setup.federation)


def run_experiment(config_source, out_dir) -> ExperimentResult:
    """Full batch entry point: validate, run, write CSV + manifest + checkpoint."""
    cfg = resolve_config(load_config(config_source))
    result = execute(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    write_metrics_csv(result.run.records, csv_path)
    ckpt_path = out / "final.ckpt"
    personal = getattr(result.run, "personal", None)
    save_checkpoint(ckpt_path, result.run.state, personal)
    digest = hashlib.sha256(csv_path.read_bytes()).hexdigest()
    manifest = {
        "config": cfg,
        "lambda": result.lam,
        "lambda_max": result.lambda_max,
        "seed": cfg["seed"],
        "version": fedfair.__version__,
        "kernel_backend": kernels.BACKEND,
        "metrics_csv": csv_path.name,
        "metrics_sha256": digest,
        "checkpoint": ckpt_path.name,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    result.csv_path = csv_path
    result.manifest_path = manifest_path
    return result


def sweep_lambda(base_config, grid, out_dir=None) -> list[dict]:
    """One full run per fraction of lambda_max, identical seeds throughout.

    Returns one row per grid value with the final-round spread metrics,
    sorted by lambda. Grid values must lie in [0, 1).
    """
    cfg = resolve_config(load_config(base_config))
    rows = []
    for frac in grid:
        frac = float(frac)
        if not 0.0 <= frac < 1.0:
            raise ConfigError(f"grid value {frac} outside [0, 1)")
        run_cfg = dict(cfg)
        run_cfg.pop("lambda_value", None)
        run_cfg["lambda_frac"] = frac
        if out_dir is not None:
            result = run_experiment(run_cfg, Path(out_dir) / f"lambda_{frac:g}")
        else:
            result = execute(resolve_config(run_cfg))
        final = result.run.records[-1]
        rows.append(
            {
                "lambda": result.lam,
                "mean_loss": final.mean_loss,
                "loss_variance": final.loss_variance,
                "discrepancy": final.discrepancy,
            }
        )
    rows.sort(key=lambda row: row["lambda"])
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("lambda,mean_loss,loss_variance,discrepancy\n")
        for row in rows:
            fh.write(
                ",".join(
                    "%.17g" % row[key]
                    for key in ("lambda", "mean_loss", "loss_variance", "discrepancy")
                )
                + "\n"
            )
