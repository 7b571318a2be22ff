"""Shared data types for replica patterns and Bargmann-invariant series."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ReplicaPattern:
    """Ordered tuple of parameter values, one per replica (length m+2)."""

    thetas: tuple

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        if len(self.thetas) < 2:
            raise ValueError("a replica pattern needs at least two replicas")

    @property
    def m(self):
        return len(self.thetas) - 2

    @property
    def n_replicas(self):
        return len(self.thetas)


@dataclass
class BargmannSeries:
    """Trace of the replica state on a time grid, plus engine diagnostics.

    ``values`` are complex; for block patterns (two contiguous parameter
    blocks) the imaginary part is a numerical residue.
    """

    pattern: ReplicaPattern
    times: np.ndarray
    values: np.ndarray
    engine: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def max_imag_ratio(self):
        scale = np.max(np.abs(self.values))
        if scale == 0:
            return 0.0
        return float(np.max(np.abs(self.values.imag)) / scale)


def time_grid(t_final, dt, stride=1):
    """Output grid 0, stride*dt, 2*stride*dt, ... covering [0, t_final]."""
    if t_final < 0 or dt <= 0 or stride < 1:
        raise ValueError("need t_final >= 0, dt > 0, stride >= 1")
    step = dt * stride
    n = int(np.floor(t_final / step + 1e-9))
    return np.arange(n + 1) * step
