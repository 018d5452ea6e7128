"""Local objective functions with exact and stochastic gradients.

Four families are provided:

* QuadraticObjective - an analytic bowl with a known Hessian, optional
  per-pseudo-sample gradient perturbations so minibatch SGD sees honest,
  bounded-variance noise.
* LeastSquaresObjective - mean squared error on a data shard; quadratic in
  the parameters with a closed-form minimizer.
* LogisticObjective - mean binary cross entropy plus an optional ridge term.
* SmallMLPObjective - a one-hidden-layer tanh network under squared loss
  (smooth and nonnegative, but non-convex).

Gradient conventions shared by every family: the exact gradient is defined
as the mean of per-sample gradients over the full shard in ascending index
order, and ``stochastic_gradient`` over the full index range reproduces it
bit for bit. All losses are nonnegative by construction.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from fedfair import kernels
from fedfair.shards import DatasetShard


@dataclass(frozen=True)
class CurvatureConstants:
    """Smoothness/convexity/noise constants of one objective.

    exact=True means the values come from the spectrum (quadratic families)
    or a closed-form bound (logistic); otherwise they are probe-based
    estimates and should be read as lower bounds of the true constants.
    """

    smoothness: float
    strong_convexity: float
    gradient_variance: float
    gradient_norm_sq: float
    exact: bool = False

    def __post_init__(self):
        if not (self.smoothness >= self.strong_convexity >= 0.0):
            raise ValueError(
                f"need L >= mu >= 0, got L={self.smoothness}, mu={self.strong_convexity}"
            )
        if self.gradient_variance < 0.0 or self.gradient_norm_sq < 0.0:
            raise ValueError("variance bounds must be nonnegative")


class Objective(ABC):
    """A client's empirical risk: value, gradient, and minibatch gradient."""

    kind: str
    dim: int
    num_samples: int

    @abstractmethod
    def value(self, theta: np.ndarray) -> float: ...

    @abstractmethod
    def gradient(self, theta: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def stochastic_gradient(self, theta: np.ndarray, batch_indices) -> np.ndarray: ...

    #: exact constants when the family admits them, else None
    constants: CurvatureConstants | None = None

    def _check_batch(self, batch_indices) -> np.ndarray:
        idx = np.asarray(batch_indices, dtype=np.int64)
        if idx.ndim != 1 or idx.shape[0] == 0:
            raise ValueError("batch_indices must be a nonempty 1-D index set")
        if idx.min() < 0 or idx.max() >= self.num_samples:
            raise ValueError(
                f"batch indices out of range [0, {self.num_samples})"
            )
        return idx

    def _check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have shape ({self.dim},), got {theta.shape}")
        return theta


class QuadraticObjective(Objective):
    """F(theta) = 1/2 (theta - opt)' A (theta - opt) + c, A symmetric PSD.

    When noise is given (one row per pseudo-sample, centered at construction)
    the per-sample gradient is the exact gradient plus that row, which gives
    minibatch SGD a bounded-variance noise model without touching the value
    landscape: the mean perturbation is zero up to rounding and is carried in
    value/gradient so that finite differences stay consistent.
    """

    kind = "quadratic"

    def __init__(self, hessian, optimum, offset=0.0, noise=None):
        hessian = np.ascontiguousarray(hessian, dtype=np.float64)
        optimum = np.ascontiguousarray(optimum, dtype=np.float64)
        if hessian.ndim != 2 or hessian.shape[0] != hessian.shape[1]:
            raise ValueError("hessian must be square")
        if optimum.shape != (hessian.shape[0],):
            raise ValueError("optimum dimension does not match hessian")
        if offset < 0.0:
            raise ValueError("offset must be nonnegative (losses are >= 0)")
        if not np.allclose(hessian, hessian.T, atol=1e-12):
            raise ValueError("hessian must be symmetric")
        self.hessian_matrix = hessian
        self.optimum = optimum
        self.offset = float(offset)
        self.dim = optimum.shape[0]
        if noise is not None:
            noise = np.ascontiguousarray(noise, dtype=np.float64)
            if noise.ndim != 2 or noise.shape[1] != self.dim:
                raise ValueError("noise must have shape (num_samples, dim)")
            if noise.shape[0] < 2:
                raise ValueError("need at least 2 pseudo-samples for noise")
            noise = noise - noise.mean(axis=0)
            self._noise_mean = noise.mean(axis=0)  # rounding residual, ~1e-17
        else:
            self._noise_mean = None
        self.noise = noise
        self.num_samples = 1 if noise is None else noise.shape[0]

        eigs = np.linalg.eigvalsh(hessian)
        if eigs[0] < -1e-10 * max(1.0, eigs[-1]):
            raise ValueError("hessian must be positive semidefinite")
        if noise is None:
            sigma_sq = 0.0
        else:
            sigma_sq = float(np.mean(np.sum(noise**2, axis=1)))
        self.constants = CurvatureConstants(
            smoothness=float(eigs[-1]),
            strong_convexity=float(max(eigs[0], 0.0)),
            gradient_variance=sigma_sq,
            gradient_norm_sq=math.inf,  # unbounded over all of R^n
            exact=True,
        )

    @property
    def min_value(self) -> float:
        return self.offset

    def value(self, theta):
        theta = self._check_theta(theta)
        d = theta - self.optimum
        v = 0.5 * float(d @ (self.hessian_matrix @ d)) + self.offset
        if self._noise_mean is not None:
            v += float(self._noise_mean @ d)
        return v

    def gradient(self, theta):
        theta = self._check_theta(theta)
        g = kernels.quad_gradient(self.hessian_matrix, theta - self.optimum)
        if self._noise_mean is not None:
            g = g + self._noise_mean
        return g

    def stochastic_gradient(self, theta, batch_indices):
        theta = self._check_theta(theta)
        idx = self._check_batch(batch_indices)
        g = kernels.quad_gradient(self.hessian_matrix, theta - self.optimum)
        if self.noise is not None:
            g = g + self.noise[idx].mean(axis=0)
        return g

    def step_noise(self, batches, steps: int) -> np.ndarray | None:
        """Pre-averaged per-step gradient perturbations for the fused kernel.

        batches is an (E, B) index array (or None for full-batch steps); row
        t of the result is exactly what stochastic_gradient would add on step
        t. None when the objective carries no noise.
        """
        if self.noise is None:
            return None
        if batches is None:
            return np.tile(self._noise_mean, (steps, 1))
        return np.stack([self.noise[row].mean(axis=0) for row in batches])


class LeastSquaresObjective(Objective):
    """Mean squared error on a shard: F = mean((X theta - y)^2) + ridge/2 |theta|^2."""

    kind = "quadratic"

    def __init__(self, shard: DatasetShard, ridge: float = 0.0):
        if ridge < 0.0:
            raise ValueError("ridge must be nonnegative")
        self.shard = shard
        self.ridge = float(ridge)
        self.dim = shard.num_features
        self.num_samples = shard.num_samples
        x, y = shard.features, shard.labels
        n = self.num_samples
        self.hessian_matrix = (2.0 / n) * (x.T @ x) + ridge * np.eye(self.dim)
        rhs = (2.0 / n) * (x.T @ y)
        self.optimum = np.linalg.solve(self.hessian_matrix, rhs)
        eigs = np.linalg.eigvalsh(self.hessian_matrix)
        self.constants = CurvatureConstants(
            smoothness=float(eigs[-1]),
            strong_convexity=float(max(eigs[0], 0.0)),
            gradient_variance=0.0,  # data noise folded into the landscape
            gradient_norm_sq=math.inf,
            exact=True,
        )

    @property
    def min_value(self) -> float:
        return self.value(self.optimum)

    def value(self, theta):
        theta = self._check_theta(theta)
        r = self.shard.features @ theta - self.shard.labels
        v = float(np.mean(r * r))
        if self.ridge != 0.0:
            v += 0.5 * self.ridge * float(theta @ theta)
        return v

    def _batch_gradient(self, theta, idx):
        xb = self.shard.features[idx]
        r = xb @ theta - self.shard.labels[idx]
        g = (2.0 / idx.shape[0]) * (xb.T @ r)
        if self.ridge != 0.0:
            g = g + self.ridge * theta
        return g

    def gradient(self, theta):
        theta = self._check_theta(theta)
        return self._batch_gradient(theta, np.arange(self.num_samples))

    def stochastic_gradient(self, theta, batch_indices):
        theta = self._check_theta(theta)
        return self._batch_gradient(theta, self._check_batch(batch_indices))


class LogisticObjective(Objective):
    """Mean binary cross entropy plus (ridge/2)|theta|^2; labels in {0, 1}."""

    kind = "logistic"

    def __init__(self, shard: DatasetShard, ridge: float = 0.0):
        if ridge < 0.0:
            raise ValueError("ridge must be nonnegative")
        labels = shard.labels
        if not np.all(np.isin(labels, (0.0, 1.0))):
            raise ValueError("logistic objectives need binary {0,1} labels")
        self.shard = shard
        self.ridge = float(ridge)
        self.dim = shard.num_features
        self.num_samples = shard.num_samples
        x = shard.features
        eigmax = float(np.linalg.eigvalsh(x.T @ x)[-1])
        self.constants = CurvatureConstants(
            smoothness=eigmax / (4.0 * self.num_samples) + ridge,
            strong_convexity=ridge,
            gradient_variance=0.0,
            gradient_norm_sq=math.inf,
            exact=True,
        )

    def value(self, theta):
        theta = self._check_theta(theta)
        z = self.shard.features @ theta
        # log(1 + exp(-z)) + (1 - y) z, stable for both signs of z
        losses = np.logaddexp(0.0, -z) + (1.0 - self.shard.labels) * z
        v = float(np.mean(losses))
        if self.ridge != 0.0:
            v += 0.5 * self.ridge * float(theta @ theta)
        return v

    def gradient(self, theta):
        theta = self._check_theta(theta)
        return kernels.logistic_batch_gradient(
            self.shard.features, self.shard.labels, theta, self.ridge,
            np.arange(self.num_samples),
        )

    def stochastic_gradient(self, theta, batch_indices):
        theta = self._check_theta(theta)
        idx = self._check_batch(batch_indices)
        return kernels.logistic_batch_gradient(
            self.shard.features, self.shard.labels, theta, self.ridge, idx
        )


class SmallMLPObjective(Objective):
    """One-hidden-layer tanh network under squared loss.

    Parameters are packed as [W1 (h*m), b1 (h), w2 (h), b2 (1)]; tanh keeps
    the loss infinitely differentiable so the smoothness assumption of the
    non-convex analysis holds, unlike piecewise-linear activations.
    """

    kind = "small-mlp"

    def __init__(self, shard: DatasetShard, hidden_width: int):
        if hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        self.shard = shard
        self.hidden_width = int(hidden_width)
        m = shard.num_features
        self.dim = hidden_width * m + hidden_width + hidden_width + 1
        self.num_samples = shard.num_samples
        self.constants = None

    def unpack(self, theta):
        h, m = self.hidden_width, self.shard.num_features
        w1 = theta[: h * m].reshape(h, m)
        b1 = theta[h * m : h * m + h]
        w2 = theta[h * m + h : h * m + 2 * h]
        b2 = theta[-1]
        return w1, b1, w2, b2

    @staticmethod
    def pack(w1, b1, w2, b2):
        return np.concatenate([np.ravel(w1), b1, w2, np.atleast_1d(b2)])

    def _forward(self, theta, idx):
        w1, b1, w2, b2 = self.unpack(theta)
        x = self.shard.features[idx]
        hidden = np.tanh(x @ w1.T + b1)
        pred = hidden @ w2 + b2
        return x, hidden, pred

    def value(self, theta):
        theta = self._check_theta(theta)
        _, _, pred = self._forward(theta, np.arange(self.num_samples))
        r = pred - self.shard.labels
        return float(np.mean(r * r))

    def _batch_gradient(self, theta, idx):
        x, hidden, pred = self._forward(theta, idx)
        w1, b1, w2, b2 = self.unpack(theta)
        n = idx.shape[0]
        r = (2.0 / n) * (pred - self.shard.labels[idx])
        g_w2 = hidden.T @ r
        g_b2 = np.sum(r)
        back = (r[:, None] * w2) * (1.0 - hidden * hidden)
        g_w1 = back.T @ x
        g_b1 = back.sum(axis=0)
        return self.pack(g_w1, g_b1, g_w2, g_b2)

    def gradient(self, theta):
        theta = self._check_theta(theta)
        return self._batch_gradient(theta, np.arange(self.num_samples))

    def stochastic_gradient(self, theta, batch_indices):
        theta = self._check_theta(theta)
        return self._batch_gradient(theta, self._check_batch(batch_indices))


def make_quadratic(dim, condition_number, optimum, rng_seed, *, mu=1.0,
                   offset=0.0, noise_samples=0, noise_sigma=0.0) -> QuadraticObjective:
    """Construct a quadratic bowl with eigenvalues spanning [mu, mu*cond].

    The Hessian is Q diag(lambda) Q' for a Haar-random orthogonal Q, so the
    spectrum (and hence the curvature constants) is known exactly. With
    noise_samples > 0 and noise_sigma > 0 the objective carries that many
    centered Gaussian per-sample gradient perturbations of scale noise_sigma.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if condition_number < 1.0:
        raise ValueError("condition_number must be >= 1")
    if dim == 1 and condition_number != 1.0:
        raise ValueError("a 1-D quadratic cannot span a condition number > 1")
    if mu <= 0.0:
        raise ValueError("mu must be positive")
    optimum = np.asarray(optimum, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    eigs = np.linspace(mu, mu * condition_number, dim)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    hessian = (q * eigs) @ q.T
    hessian = 0.5 * (hessian + hessian.T)
    noise = None
    if noise_sigma > 0.0:
        if noise_samples < 2:
            raise ValueError("noise_sigma > 0 requires noise_samples >= 2")
        noise = noise_sigma * rng.standard_normal((noise_samples, dim))
    return QuadraticObjective(hessian, optimum, offset=offset, noise=noise)


def make_least_squares(shard: DatasetShard, ridge: float = 0.0) -> LeastSquaresObjective:
    """Least-squares regression objective on a shard."""
    return LeastSquaresObjective(shard, ridge=ridge)


def make_logistic(shard: DatasetShard, ridge: float = 0.0) -> LogisticObjective:
    """Binary cross-entropy objective on a shard; rejects non-binary labels."""
    return LogisticObjective(shard, ridge=ridge)


def make_small_mlp(shard: DatasetShard, hidden_width: int, rng_seed) -> tuple[SmallMLPObjective, np.ndarray]:
    """MLP objective plus a seeded initial parameter vector.

    The init is returned separately because in a federation every client
    shares the same starting point; callers typically keep one init and drop
    the others.
    """
    obj = SmallMLPObjective(shard, hidden_width)
    rng = np.random.default_rng(rng_seed)
    h, m = hidden_width, shard.num_features
    w1 = rng.standard_normal((h, m)) / np.sqrt(m)
    b1 = np.zeros(h)
    w2 = rng.standard_normal(h) / np.sqrt(h)
    b2 = 0.0
    return obj, SmallMLPObjective.pack(w1, b1, w2, b2)


def estimate_constants(obj: Objective, probe_region: float, n_probes: int,
                       rng_seed) -> CurvatureConstants:
    """Curvature and noise constants for an objective.

    Families with a known spectrum return their exact constants. Otherwise
    the constants are estimated from probes in a ball of radius probe_region
    around the origin: smoothness from the largest pairwise gradient
    Lipschitz ratio (coincident probe pairs are skipped), the noise bounds
    from per-sample stochastic gradients at the probes. These probe-based
    values are lower bounds of the true constants (exact=False).
    """
    if n_probes < 2:
        raise ValueError("need at least 2 probes")
    if obj.constants is not None and obj.constants.exact:
        return obj.constants
    rng = np.random.default_rng(rng_seed)
    probes = rng.standard_normal((n_probes, obj.dim))
    probes *= probe_region / np.maximum(np.linalg.norm(probes, axis=1), 1e-12)[:, None]
    grads = [obj.gradient(p) for p in probes]
    lip = 0.0
    for i in range(n_probes):
        for j in range(i + 1, n_probes):
            dist = float(np.linalg.norm(probes[i] - probes[j]))
            if dist < 1e-12:
                continue
            lip = max(lip, float(np.linalg.norm(grads[i] - grads[j])) / dist)
    sigma_sq = 0.0
    norm_sq = 0.0
    sample_rows = np.arange(obj.num_samples)
    for p, g in zip(probes, grads):
        per_sample = np.stack(
            [obj.stochastic_gradient(p, [i]) for i in sample_rows]
        )
        dev = per_sample - g
        sigma_sq = max(sigma_sq, float(np.mean(np.sum(dev * dev, axis=1))))
        norm_sq = max(norm_sq, float(np.mean(np.sum(per_sample * per_sample, axis=1))))
    mu = 0.0
    if isinstance(obj, (LogisticObjective, LeastSquaresObjective)):
        mu = obj.ridge
    return CurvatureConstants(
        smoothness=max(lip, mu),
        strong_convexity=mu,
        gradient_variance=sigma_sq,
        gradient_norm_sq=norm_sq,
        exact=False,
    )
