"""Synthetic contextual environments.

A joint point ``w`` is the concatenation ``[x, c]`` of an action ``x`` in
the action box and a context ``c`` in the context box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import InputError, NumericalError, ResourceError
from .kernels import KernelSpec, gram, kernel_diag

DEFAULT_GRID_CAP = 1_000_000


@dataclass(frozen=True)
class Domain:
    """Product of an axis-aligned action box and an axis-aligned context box."""

    action_lower: tuple[float, ...]
    action_upper: tuple[float, ...]
    context_lower: tuple[float, ...] = ()
    context_upper: tuple[float, ...] = ()

    def __post_init__(self):
        for lo, hi, what in ((self.action_lower, self.action_upper, "action"),
                             (self.context_lower, self.context_upper, "context")):
            if len(lo) != len(hi):
                raise InputError(f"{what} box bounds have different lengths")
            if any(not (math.isfinite(a) and math.isfinite(b)) for a, b in zip(lo, hi)):
                raise InputError(f"{what} box must be bounded")
            if any(a > b for a, b in zip(lo, hi)):
                raise InputError(f"{what} box has lower > upper")
        if not self.action_lower:
            raise InputError("action box must have at least one dimension")

    @classmethod
    def box(cls, action, context=()):
        """``Domain.box([(0, 1)], [(0, 1)])`` style constructor."""
        action = list(action)
        context = list(context)
        return cls(tuple(float(a) for a, _ in action), tuple(float(b) for _, b in action),
                   tuple(float(a) for a, _ in context), tuple(float(b) for _, b in context))

    @property
    def d(self) -> int:
        return len(self.action_lower)

    @property
    def d_context(self) -> int:
        return len(self.context_lower)

    @property
    def dim(self) -> int:
        return self.d + self.d_context

    @property
    def joint_lower(self) -> np.ndarray:
        return np.array(self.action_lower + self.context_lower, dtype=float)

    @property
    def joint_upper(self) -> np.ndarray:
        return np.array(self.action_upper + self.context_upper, dtype=float)

    @property
    def diameter(self) -> float:
        """D0, the Euclidean diameter of the action box."""
        return float(np.linalg.norm(np.subtract(self.action_upper, self.action_lower)))

    def sample_actions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = np.array(self.action_lower), np.array(self.action_upper)
        return lo + (hi - lo) * rng.random((n, self.d))

    def sample_joint_uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = self.joint_lower, self.joint_upper
        return lo + (hi - lo) * rng.random((n, self.dim))

    def context_corners(self) -> np.ndarray:
        """All 2^d' vertices of the context box."""
        lo, hi = np.array(self.context_lower), np.array(self.context_upper)
        bits = np.array(np.meshgrid(*[[0, 1]] * self.d_context, indexing="ij")).reshape(self.d_context, -1).T
        return lo + bits * (hi - lo)

    def joint_corners(self) -> np.ndarray:
        lo, hi = self.joint_lower, self.joint_upper
        bits = np.array(np.meshgrid(*[[0, 1]] * self.dim, indexing="ij")).reshape(self.dim, -1).T
        return lo + bits * (hi - lo)

    def to_dict(self) -> dict[str, Any]:
        return {"action_box": [list(p) for p in zip(self.action_lower, self.action_upper)],
                "context_box": [list(p) for p in zip(self.context_lower, self.context_upper)]}


# ---------------------------------------------------------------------------
# contexts and noise


@dataclass(frozen=True)
class ContextDistribution:
    """Law of the contexts on a box.

    Truncated Gaussians use rejection sampling; after 64 rejection rounds any
    remaining draws are clamped to the box.
    """

    kind: str
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    mean: tuple[float, ...] = ()
    stddev: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()
    components: tuple["ContextDistribution", ...] = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "truncated_gaussian", "mixture"):
            raise InputError(f"unknown context distribution {self.kind!r}")
        if len(self.lower) != len(self.upper):
            raise InputError("context box bounds have different lengths")
        if self.kind == "truncated_gaussian":
            if len(self.mean) != len(self.lower) or len(self.stddev) != len(self.lower):
                raise InputError("mean/stddev must match the context dimension")
            if any(s <= 0 for s in self.stddev):
                raise InputError("stddev must be positive")
        if self.kind == "mixture":
            if len(self.weights) != len(self.components) or not self.components:
                raise InputError("mixture needs one weight per component")
            if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
                raise InputError("mixture weights must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, domain: Domain) -> "ContextDistribution":
        return cls("uniform", domain.context_lower, domain.context_upper)

    @classmethod
    def truncated_gaussian(cls, domain: Domain, mean, stddev) -> "ContextDistribution":
        return cls("truncated_gaussian", domain.context_lower, domain.context_upper,
                   tuple(map(float, mean)), tuple(map(float, stddev)))

    @classmethod
    def mixture(cls, weights, components) -> "ContextDistribution":
        components = tuple(components)
        return cls("mixture", components[0].lower, components[0].upper,
                   weights=tuple(map(float, weights)), components=components)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = np.array(self.lower, dtype=float), np.array(self.upper, dtype=float)
        if self.kind == "uniform":
            return lo + (hi - lo) * rng.random((n, self.dim))
        if self.kind == "truncated_gaussian":
            mu, sd = np.array(self.mean), np.array(self.stddev)
            out = np.empty((n, self.dim))
            todo = np.arange(n)
            for _ in range(64):
                if todo.size == 0:
                    break
                draw = mu + sd * rng.standard_normal((todo.size, self.dim))
                ok = np.all((draw >= lo) & (draw <= hi), axis=1)
                out[todo[ok]] = draw[ok]
                todo = todo[~ok]
            if todo.size:
                out[todo] = np.clip(mu + sd * rng.standard_normal((todo.size, self.dim)), lo, hi)
            return out
        which = rng.choice(len(self.components), size=n, p=np.array(self.weights))
        out = np.empty((n, self.dim))
        for i, comp in enumerate(self.components):
            idx = np.flatnonzero(which == i)
            if idx.size:
                out[idx] = comp.sample(rng, idx.size)
        return out

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "uniform":
            return {"kind": "uniform"}
        if self.kind == "truncated_gaussian":
            return {"kind": "truncated_gaussian", "mean": list(self.mean), "stddev": list(self.stddev)}
        return {"kind": "mixture", "weights": list(self.weights),
                "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict[str, Any], domain: Domain) -> "ContextDistribution":
        kind = d.get("kind")
        if kind == "uniform":
            return cls.uniform(domain)
        if kind == "truncated_gaussian":
            return cls.truncated_gaussian(domain, d["mean"], d["stddev"])
        if kind == "mixture":
            return cls.mixture(d["weights"], [cls.from_dict(c, domain) for c in d["components"]])
        raise InputError(f"unknown context distribution {kind!r}")


def sample_context(dist: ContextDistribution, rng: np.random.Generator) -> np.ndarray:
    return dist.sample(rng, 1)[0]


def sample_action_uniform(domain: Domain, rng: np.random.Generator) -> np.ndarray:
    return domain.sample_actions(rng, 1)[0]


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean R-sub-Gaussian noise: N(0, R^2) or Uniform[-R, R]."""

    R: float = 0.0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.R < 0:
            raise InputError("noise parameter R must be non-negative")
        if self.kind not in ("gaussian", "uniform"):
            raise InputError(f"unknown noise kind {self.kind!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            return self.R * rng.standard_normal(n)
        return rng.uniform(-self.R, self.R, size=n)


def default_clip_bound(B: float, R: float, T: int, delta: float = 0.01) -> float:
    """B + R sqrt(2 ln(2T/delta)): the sub-Gaussian tail leaves rewards unclipped w.h.p."""
    return B + R * math.sqrt(2.0 * math.log(2.0 * T / delta))


# ---------------------------------------------------------------------------
# reward functions


@dataclass(frozen=True, eq=False)
class RewardFunction:
    """f(w) = sum_i alpha_i k(center_i, w), with ||f||_H <= B."""

    centers: np.ndarray
    coefficients: np.ndarray
    kernel: KernelSpec
    B: float
    rkhs_norm: float
    lipschitz: float

    def __call__(self, W) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if self.coefficients.size == 0:
            return np.zeros(W.shape[0])
        # row-wise reduction so a point's value does not depend on the batch it arrives in
        return (gram(self.kernel, W, self.centers) * self.coefficients).sum(axis=1)

    def to_dict(self) -> dict[str, Any]:
        return {"centers": self.centers.tolist(), "coefficients": self.coefficients.tolist(),
                "kernel": self.kernel.to_dict(), "B": self.B, "rkhs_norm": self.rkhs_norm,
                "lipschitz": self.lipschitz}


def eval_reward(f: RewardFunction, w) -> float:
    return float(f(np.asarray(w, dtype=float)[None, :])[0])


def estimate_lipschitz(func, domain: Domain, rng: np.random.Generator, n_points: int = 20_000,
                       h: float = 1e-5, margin: float = 0.1) -> float:
    """Max central-difference gradient norm over a dense grid plus random points, inflated by ``margin``."""
    lo, hi = domain.joint_lower, domain.joint_upper
    per_axis = max(2, int(round(n_points ** (1.0 / domain.dim) / 2)))
    grid = lattice(lo, hi, [per_axis] * domain.dim)
    pts = np.vstack([grid, domain.sample_joint_uniform(rng, n_points)])
    grad = np.empty_like(pts)
    for j in range(domain.dim):
        e = np.zeros(domain.dim)
        e[j] = h
        grad[:, j] = (func(pts + e) - func(pts - e)) / (2 * h)
    slope = float(np.max(np.linalg.norm(grad, axis=1)))
    return slope * (1.0 + margin)


def sample_reward_function(kernel: KernelSpec, domain: Domain, B: float, n_centers: int,
                           rng: np.random.Generator) -> RewardFunction:
    """Random representer-form function with RKHS norm exactly B."""
    if n_centers < 1:
        raise InputError("n_centers must be >= 1")
    if B < 0:
        raise InputError("B must be non-negative")
    for attempt in range(2):
        centers = domain.sample_joint_uniform(rng, n_centers)
        alpha = rng.standard_normal(n_centers)
        G = gram(kernel, centers)
        try:
            np.linalg.cholesky(G + 1e-10 * np.eye(n_centers))
        except np.linalg.LinAlgError:
            if attempt == 0:
                continue
            raise NumericalError("Gram matrix of reward centers is singular after one retry")
        sq = float(alpha @ G @ alpha)
        if not sq > 0:
            if attempt == 0:
                continue
            raise NumericalError("degenerate reward coefficients")
        break
    alpha = alpha * (B / math.sqrt(sq))
    norm = math.sqrt(max(float(alpha @ G @ alpha), 0.0))
    probe = RewardFunction(centers, alpha, kernel, B, norm, 0.0)
    lip = estimate_lipschitz(probe, domain, rng) if B > 0 else 0.0
    return RewardFunction(centers, alpha, kernel, float(B), norm, lip)


def observe(f: RewardFunction, w, noise: NoiseModel, clip_bound: float,
            rng: np.random.Generator) -> float:
    """clamp(f(w) + eta, -clip_bound, clip_bound)."""
    return float(observe_many(f, np.asarray(w, dtype=float)[None, :], noise, clip_bound, rng)[0])


def observe_many(f: RewardFunction, W, noise: NoiseModel, clip_bound: float,
                 rng: np.random.Generator) -> np.ndarray:
    W = np.atleast_2d(W)
    y = f(W) + noise.sample(rng, W.shape[0])
    return np.clip(y, -clip_bound, clip_bound)


# ---------------------------------------------------------------------------
# grids


def lattice(lower, upper, per_axis) -> np.ndarray:
    """Cell-centred lattice with ``per_axis[i]`` cells along axis i."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    axes = [lo + (np.arange(n) + 0.5) * ((hi - lo) / n) for lo, hi, n in zip(lower, upper, per_axis)]
    if not axes:
        return np.zeros((1, 0))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True, eq=False)
class Grid:
    """A cell-centred product lattice over a box, with nearest-point projection."""

    lower: np.ndarray
    upper: np.ndarray
    per_axis: tuple[int, ...]
    points: np.ndarray = field(repr=False)

    @property
    def cell_widths(self) -> np.ndarray:
        return (self.upper - self.lower) / np.array(self.per_axis)

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.cell_widths))

    def __len__(self) -> int:
        return self.points.shape[0]

    def project(self, W) -> np.ndarray:
        """Nearest lattice point of each row of W."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        h = self.cell_widths
        n = np.array(self.per_axis)
        safe_h = np.where(h > 0, h, 1.0)
        idx = np.clip(np.floor((W - self.lower) / safe_h), 0, n - 1)
        return self.lower + (idx + 0.5) * h


def grid_over_box(lower, upper, per_axis, cap: int = DEFAULT_GRID_CAP) -> Grid:
    per_axis = tuple(int(n) for n in per_axis)
    if any(n < 1 for n in per_axis):
        raise InputError("need at least one cell per axis")
    size = math.prod(per_axis)
    if size > cap:
        raise ResourceError(f"grid of {size} points exceeds the cap of {cap}")
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    return Grid(lower, upper, per_axis, lattice(lower, upper, per_axis))


def make_grid(domain: Domain, r: int, scale=None, cap: int = DEFAULT_GRID_CAP) -> Grid:
    """Discretization U_r of W: ceil(r^(1/dim) * scale_i) cells per axis."""
    if r < 1:
        raise InputError("r must be >= 1")
    scale = np.ones(domain.dim) if scale is None else np.asarray(scale, float)
    per_axis = [max(1, math.ceil(r ** (1.0 / domain.dim) * s - 1e-9)) for s in scale]
    return grid_over_box(domain.joint_lower, domain.joint_upper, per_axis, cap)


def lipschitz_grid(domain: Domain, lipschitz: float, B: float, r: int,
                   cap: int = DEFAULT_GRID_CAP) -> Grid:
    """Grid fine enough that ``lipschitz * ||w - [w]|| <= B / r`` everywhere."""
    lo, hi = domain.joint_lower, domain.joint_upper
    if lipschitz <= 0 or B <= 0:
        return grid_over_box(lo, hi, [1] * domain.dim, cap)
    # half cell diagonal <= B / (r L) when every width <= 2B / (r L sqrt(dim))
    width = 2.0 * B / (r * lipschitz * math.sqrt(domain.dim))
    per_axis = [max(1, math.ceil((b - a) / width)) for a, b in zip(lo, hi)]
    return grid_over_box(lo, hi, per_axis, cap)


def action_grid(domain: Domain, cells_per_axis: int) -> Grid:
    return grid_over_box(domain.action_lower, domain.action_upper, [cells_per_axis] * domain.d)


def rkhs_norm_sq(kernel: KernelSpec, centers, coefficients) -> float:
    return float(coefficients @ gram(kernel, centers) @ coefficients)


__all__ = [
    "Domain", "ContextDistribution", "NoiseModel", "RewardFunction", "Grid",
    "sample_context", "sample_action_uniform", "sample_reward_function", "eval_reward",
    "observe", "observe_many", "make_grid", "lipschitz_grid", "action_grid", "lattice",
    "grid_over_box", "estimate_lipschitz", "default_clip_bound", "kernel_diag", "rkhs_norm_sq",
]
