"""Deterministic federated-learning simulator with loss-rank fair
re-weighting, its plain-averaging special case, and proximal personalization.
"""

__version__ = "0.1.0"

from fedfair.federation import FederationSpec, compute_weights
from fedfair.fairness import (
    FairnessConfig,
    global_objective_direct,
    global_objective_weighted,
    group_losses,
    lambda_max,
    local_weight,
    pairwise_penalty,
    rank_coefficients,
)
from fedfair.objectives import (
    CurvatureConstants,
    LeastSquaresObjective,
    LogisticObjective,
    QuadraticObjective,
    SmallMLPObjective,
    estimate_constants,
    make_least_squares,
    make_logistic,
    make_quadratic,
    make_small_mlp,
)
from fedfair.schedules import LrSchedule
from fedfair.shards import DatasetShard, load_shard, save_shard, split_shard

__all__ = [
    "__version__",
    "CurvatureConstants",
    "DatasetShard",
    "FairnessConfig",
    "FederationSpec",
    "LeastSquaresObjective",
    "LogisticObjective",
    "LrSchedule",
    "QuadraticObjective",
    "SmallMLPObjective",
    "compute_weights",
    "estimate_constants",
    "global_objective_direct",
    "global_objective_weighted",
    "group_losses",
    "lambda_max",
    "load_shard",
    "local_weight",
    "make_least_squares",
    "make_logistic",
    "make_quadratic",
    "make_small_mlp",
    "pairwise_penalty",
    "rank_coefficients",
    "save_shard",
    "split_shard",
]
