"""Gridded exponential mechanism over the action box.

The continuous density ``exp(eps * u(x) / (2 m))`` is replaced by a
piecewise-constant one: each grid cell gets the utility of its centre and a
draw is a uniform point inside the selected cell. Cell probabilities are
finite and exact, so privacy ratios can be checked with no sampling error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .env import Grid
from .errors import InputError, UscaError

DEFAULT_CELLS = 64


@dataclass(frozen=True, eq=False)
class ExpMechanism:
    grid: Grid
    utilities: np.ndarray
    epsilon: float
    m: float
    log_probs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InputError("epsilon must be positive")
        if not self.m > 0:
            raise InputError("sensitivity scale m must be positive")
        u = np.asarray(self.utilities, dtype=float).reshape(-1)
        if u.shape[0] != len(self.grid):
            raise InputError("one utility per grid cell is required")
        if not np.all(np.isfinite(u)):
            raise InputError("utilities must be finite")
        logits = self.epsilon * u / (2.0 * self.m)
        # logsumexp shifts by the max internally
        log_probs = logits - logsumexp(logits)
        object.__setattr__(self, "utilities", u)
        object.__setattr__(self, "log_probs", log_probs)

    @classmethod
    def from_function(cls, utility: Callable[[np.ndarray], np.ndarray], grid: Grid,
                      epsilon: float, m: float) -> "ExpMechanism":
        return cls(grid, np.asarray(utility(grid.points), dtype=float), epsilon, m)

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def cell_of(self, x) -> int:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        h = self.grid.cell_widths
        n = np.array(self.grid.per_axis)
        idx = np.clip(np.floor((x[0] - self.grid.lower) / np.where(h > 0, h, 1.0)), 0, n - 1).astype(int)
        return int(np.ravel_multi_index(tuple(idx), self.grid.per_axis))

    def sample_cells(self, rng: np.random.Generator, size: int) -> np.ndarray:
        cdf = np.cumsum(self.probabilities)
        if not cdf[-1] > 0:
            raise UscaError("exponential-mechanism weights vanished")
        u = rng.random(size) * cdf[-1]
        return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """One point (size=None) or an array of points."""
        n = 1 if size is None else size
        cells = self.sample_cells(rng, n)
        jitter = (rng.random((n, self.grid.points.shape[1])) - 0.5) * self.grid.cell_widths
        pts = self.grid.points[cells] + jitter
        return pts[0] if size is None else pts

    def write_csv(self, path) -> None:
        """cell index, centre coordinates, utility, probability."""
        d = self.grid.points.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", *[f"x{i}" for i in range(d)], "utility", "probability"])
            for i, (c, u, p) in enumerate(zip(self.grid.points, self.utilities, self.probabilities)):
                w.writerow([i, *(repr(float(v)) for v in c), repr(float(u)), repr(float(p))])


def sample_exp_mechanism(mech: ExpMechanism, rng: np.random.Generator) -> np.ndarray:
    return mech.sample(rng)


def _check_compatible(a: ExpMechanism, b: ExpMechanism) -> None:
    if (a.grid.per_axis != b.grid.per_axis or not np.array_equal(a.grid.lower, b.grid.lower)
            or not np.array_equal(a.grid.upper, b.grid.upper)):
        raise InputError("mechanisms are defined on different grids")
    if a.epsilon != b.epsilon or a.m != b.m:
        raise InputError("mechanisms differ in epsilon or m")


def log_density_ratio(a: ExpMechanism, b: ExpMechanism, x) -> float:
    """ln(p_a(x) / p_b(x)) for the gridded densities (cell volumes cancel)."""
    _check_compatible(a, b)
    i = a.cell_of(x)
    return float(a.log_probs[i] - b.log_probs[i])


def max_abs_log_ratio(a: ExpMechanism, b: ExpMechanism) -> float:
    """max over cells of |ln p_a - ln p_b|; the exact privacy loss of the gridded mechanism."""
    _check_compatible(a, b)
    return float(np.max(np.abs(a.log_probs - b.log_probs)))


def sensitivity_bound(est, clip_bound: float) -> float:
    """2 * B_y * sup of the surrogate variance: the scale m given to the mechanism."""
    return 2.0 * clip_bound * est.sup_var


def sample_rejection(utility: Callable[[np.ndarray], np.ndarray], lower, upper, epsilon: float,
                     m: float, utility_max: float, rng: np.random.Generator,
                     max_rounds: int = 1_000_000) -> np.ndarray:
    """Continuous exponential mechanism by rejection from the uniform law.

    ``utility_max`` must upper-bound the utility on the box. Only used to
    compare against the gridded sampler in tests; its normalizer is unknown.
    """
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    scale = epsilon / (2.0 * m)
    for _ in range(max_rounds):
        x = lower + (upper - lower) * rng.random(lower.shape[0])
        u = float(np.asarray(utility(x[None, :])).reshape(-1)[0])
        if u > utility_max + 1e-12:
            raise InputError("utility_max is not an upper bound")
        if rng.random() < math.exp(scale * (u - utility_max)):
            return x
    raise UscaError("rejection sampler did not accept within max_rounds")
