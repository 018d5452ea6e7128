"""Learning-rate schedules indexed by the global step counter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("inverse-t", "inverse-sqrt", "constant")


@dataclass(frozen=True)
class LrSchedule:
    """eta(t) for t = 0, 1, 2, ...

    inverse-t:    beta / (t + gamma)   (the strongly convex regime)
    inverse-sqrt: beta / sqrt(t + gamma)  (the non-convex regime)
    constant:     beta                   (deterministic full-batch suites)

    Decaying schedules need gamma > 0 so eta stays finite at t = 0.
    """

    kind: str
    beta: float
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; pick from {KINDS}")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")

    def eta(self, t: int) -> float:
        if self.kind == "inverse-t":
            return self.beta / (t + self.gamma)
        if self.kind == "inverse-sqrt":
            return self.beta / np.sqrt(t + self.gamma)
        return self.beta

    def etas(self, t0: int, steps: int) -> np.ndarray:
        """Step sizes for local steps t0, ..., t0+steps-1 as float64."""
        return np.array([self.eta(t0 + i) for i in range(steps)], dtype=np.float64)

    def halving_ok(self, local_steps: int) -> bool:
        """Whether eta(t) <= 2 eta(t + E) holds for every t >= 0.

        The inverse-t analysis needs this no-faster-than-halving property
        across one round of E local steps; it reduces to gamma >= E. The
        inverse-sqrt schedule satisfies it when gamma >= E/3, and a constant
        schedule always does.
        """
        if self.kind == "inverse-t":
            return self.gamma >= local_steps
        if self.kind == "inverse-sqrt":
            return 3.0 * self.gamma >= local_steps
        return True
