"""Per-round fairness and convergence measurements, and their CSV form.

The CSV schema is frozen: header
``round,step,mean_loss,loss_variance,discrepancy,objective_value,grad_norm_sq,gamma_k``
with every real printed through %.17g so reruns are byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedfair.fairness import (
    FairnessConfig,
    group_losses,
    pairwise_penalty,
    rank_coefficients,
)

CSV_HEADER = (
    "round,step,mean_loss,loss_variance,discrepancy,"
    "objective_value,grad_norm_sq,gamma_k"
)


@dataclass(frozen=True)
class MetricsRecord:
    round_index: int
    step: int
    mean_loss: float
    loss_variance: float
    discrepancy: float
    objective_value: float
    grad_norm_sq: float
    gamma_k: float = math.nan

    def __post_init__(self):
        if self.loss_variance < 0.0 or self.discrepancy < 0.0:
            raise ValueError("spread metrics cannot be negative")


def fairness_variance(per_unit_metrics) -> float:
    """Population variance of per-unit performance; lower is fairer."""
    values = np.asarray(per_unit_metrics, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] == 0:
        raise ValueError("need a nonempty 1-D metric vector")
    return float(np.var(values))


def discrepancy(group_metrics) -> float:
    """Largest minus smallest per-group metric."""
    values = np.asarray(group_metrics, dtype=np.float64)
    if values.shape[0] < 2:
        raise ValueError("discrepancy needs at least two groups")
    return float(values.max() - values.min())


def compute_metrics(round_index, step, theta, objectives,
                    config: FairnessConfig, loss_objectives=None,
                    gamma_k: float = math.nan) -> MetricsRecord:
    """Evaluate the standard record at an aggregated parameter vector.

    mean_loss averages client losses uniformly (the per-device view);
    loss_variance and discrepancy are taken over group losses; the objective
    and its gradient use the rank weights evaluated at this theta. The three
    loss columns read from loss_objectives when given (e.g. held-out splits),
    while the objective/gradient columns always track the trained loss.
    """
    fed = config.federation
    train_losses = np.array([obj.value(theta) for obj in objectives])
    train_gl = group_losses(train_losses, fed)
    ranks = rank_coefficients(train_gl, fed)
    coeffs = fed.weights * (1.0 + config.lam * ranks / fed.weight_group_products)
    grad = np.zeros_like(np.asarray(theta, dtype=np.float64))
    for coeff, obj in zip(coeffs, objectives):
        grad = grad + coeff * obj.gradient(theta)
    objective_value = (
        float(fed.weights @ train_losses) + config.lam * pairwise_penalty(train_gl)
    )
    if loss_objectives is None:
        losses, gl = train_losses, train_gl
    else:
        losses = np.array([obj.value(theta) for obj in loss_objectives])
        gl = group_losses(losses, fed)
    return MetricsRecord(
        round_index=int(round_index),
        step=int(step),
        mean_loss=float(losses.mean()),
        loss_variance=fairness_variance(gl),
        discrepancy=discrepancy(gl),
        objective_value=objective_value,
        grad_norm_sq=float(grad @ grad),
        gamma_k=gamma_k,
    )


def _real(x: float) -> str:
    return "%.17g" % x


def record_to_row(record: MetricsRecord) -> str:
    return ",".join(
        [
            str(record.round_index),
            str(record.step),
            _real(record.mean_loss),
            _real(record.loss_variance),
            _real(record.discrepancy),
            _real(record.objective_value),
            _real(record.grad_norm_sq),
            _real(record.gamma_k),
        ]
    )


def write_metrics_csv(records, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for record in records:
            fh.write(record_to_row(record) + "\n")


def log_log_slope(steps, values) -> float:
    """Least-squares slope of log(value) against log(step)."""
    steps = np.asarray(steps, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if steps.shape[0] < 2:
        raise ValueError("need at least two points for a slope")
    if np.any(steps <= 0.0) or np.any(values <= 0.0):
        raise ValueError("log-log regression needs positive steps and values")
    return float(np.polyfit(np.log(steps), np.log(values), 1)[0])


def convergence_slope(trajectory, field: str, window, h_star: float | None = None) -> float:
    """Empirical decay rate of a trajectory metric over a step window.

    field "objective_gap" fits log(objective_value - h_star) (h_star
    required); field "grad_norm_sq" fits the squared gradient norm. Points
    outside window = (lo, hi) are ignored; at least 10 positive points must
    remain, and any nonpositive value inside the window is an error since it
    means the gap baseline is wrong.
    """
    if field not in ("objective_gap", "grad_norm_sq"):
        raise ValueError("field must be 'objective_gap' or 'grad_norm_sq'")
    if field == "objective_gap" and h_star is None:
        raise ValueError("objective_gap needs h_star")
    lo, hi = window
    steps, values = [], []
    for record in trajectory:
        if not lo <= record.step <= hi:
            continue
        value = (
            record.objective_value - h_star
            if field == "objective_gap"
            else record.grad_norm_sq
        )
        steps.append(record.step)
        values.append(value)
    if len(steps) < 10:
        raise ValueError(f"need >= 10 trajectory points in the window, got {len(steps)}")
    values_arr = np.asarray(values)
    if np.any(values_arr <= 0.0):
        raise ValueError("nonpositive values in the window; check the h_star baseline")
    return log_log_slope(steps, values_arr)
