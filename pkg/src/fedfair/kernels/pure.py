"""Numpy implementations of the hot numerical kernels.

These are the reference semantics for the compiled twins in ``_speedups``.
Within one backend every kernel is self-consistent: a fused multi-step loop
produces exactly the same bits as calling the single-step kernel repeatedly,
because both share the same reduction order and elementwise expression
structure. Across backends results may differ in the last ulp (BLAS versus
sequential accumulation), which is why cross-backend comparisons are always
tolerance-based.
"""

import numpy as np

BACKEND_NAME = "python"


def quad_gradient(hess, dtheta):
    """Gradient of a quadratic bowl, ``hess @ (theta - optimum)``."""
    return hess @ dtheta


def quad_local_sgd(hess, optimum, theta0, etas, weight, step_noise=None):
    """Run ``len(etas)`` weighted SGD steps on a quadratic objective.

    step_noise, when given, holds one pre-averaged gradient perturbation per
    step; row t is added to the exact gradient before the update. Returns the
    final iterate (theta0 is not modified).
    """
    theta = theta0.copy()
    for t in range(etas.shape[0]):
        g = quad_gradient(hess, theta - optimum)
        if step_noise is not None:
            g = g + step_noise[t]
        theta = theta - (etas[t] * weight) * g
    return theta


def _sigmoid(z):
    # branch on sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_batch_gradient(features, labels, theta, ridge, idx):
    """Mean cross-entropy gradient over the rows listed in idx."""
    xb = features[idx]
    z = xb @ theta
    r = _sigmoid(z) - labels[idx]
    g = xb.T @ r
    g = g / idx.shape[0]
    if ridge != 0.0:
        g = g + ridge * theta
    return g


def logistic_local_sgd(features, labels, theta0, etas, weight, ridge, batches):
    """Run weighted SGD on a logistic loss; batches has one index row per step."""
    theta = theta0.copy()
    for t in range(etas.shape[0]):
        g = logistic_batch_gradient(features, labels, theta, ridge, batches[t])
        theta = theta - (etas[t] * weight) * g
    return theta
