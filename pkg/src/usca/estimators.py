"""GP posterior statistics and the covariance-approximated estimator.

The approximated estimator replaces the data covariance by the empirical
covariance of an independently drawn approximating set Z of T*K points.
In kernel form, with ``A = K_ZZ + K tau I``::

    mean(w) = (k_W(w)^T Y - k_Z(w)^T A^-1 K_ZW Y) / tau
    var(w)  = (k(w, w)   - k_Z(w)^T A^-1 k_Z(w)) / tau

Building costs O((TK)^3); each query costs O(T + TK) kernel evaluations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .env import ContextDistribution, Domain, make_grid
from .errors import InputError, ResourceError
from .kernels import KernelSpec, cholesky, feature_matrix, gram, kernel_diag

DEFAULT_Z_CAP = 5000
_CHUNK = 2048


@dataclass(frozen=True, eq=False)
class Dataset:
    """Learning-stage history: joint points W (T x dim), rewards Y, regularizer tau."""

    W: np.ndarray
    Y: np.ndarray
    tau: float

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if W.shape[0] != Y.shape[0]:
            raise InputError(f"W has {W.shape[0]} rows but Y has {Y.shape[0]} entries")
        if not self.tau > 0:
            raise InputError("tau must be positive")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Y", Y)

    @property
    def T(self) -> int:
        return self.W.shape[0]

    def replace_record(self, t: int, w, y: float) -> "Dataset":
        """A t-neighbouring dataset: row t replaced by (w, y)."""
        W = self.W.copy()
        Y = self.Y.copy()
        W[t] = w
        Y[t] = y
        return Dataset(W, Y, self.tau)


@dataclass(frozen=True, eq=False)
class ApproxSet:
    Z: np.ndarray
    K: int
    T: int
    gamma_estimate: float

    def __post_init__(self):
        if self.Z.shape[0] != self.T * self.K:
            raise InputError(f"|Z| = {self.Z.shape[0]} but T*K = {self.T * self.K}")

    def to_dict(self) -> dict[str, Any]:
        return {"K": self.K, "T": self.T, "gamma_estimate": self.gamma_estimate, "Z": self.Z.tolist()}


def approx_multiplier(T: int, gamma_estimate: float) -> int:
    """K = ceil(T / gamma)."""
    if not gamma_estimate > 0:
        raise InputError("gamma_estimate must be positive")
    return max(1, math.ceil(T / gamma_estimate))


def build_approx_set(domain: Domain, ctx_dist: ContextDistribution, T: int, gamma_estimate: float,
                     rng: np.random.Generator, cap: int = DEFAULT_Z_CAP) -> ApproxSet:
    """Draw T*K i.i.d. pairs (x uniform on the action box, c ~ ctx_dist)."""
    if T < 1:
        raise InputError("T must be >= 1")
    K = approx_multiplier(T, gamma_estimate)
    n = T * K
    if n > cap:
        raise ResourceError(f"approximating set needs T*K = {n} points, above the cap of {cap}")
    contexts = ctx_dist.sample(rng, n) if domain.d_context else np.zeros((n, 0))
    actions = domain.sample_actions(rng, n)
    return ApproxSet(np.hstack([actions, contexts]), K, T, float(gamma_estimate))


def posterior_stats(kernel: KernelSpec, dataset: Dataset, W) -> tuple[np.ndarray, np.ndarray]:
    """Exact GP posterior mean and variance at the rows of W."""
    if dataset.T == 0:
        raise InputError("posterior_stats needs a non-empty dataset")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    G = gram(kernel, dataset.W)
    c = cholesky(G + dataset.tau * np.eye(dataset.T), "K_WW + tau I")
    kx = gram(kernel, dataset.W, W)
    mean = kx.T @ cho_solve(c, dataset.Y)
    L = np.tril(c[0])
    v = solve_triangular(L, kx, lower=True)
    var = kernel_diag(kernel, W) - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0)


@dataclass(frozen=True, eq=False)
class UscaEstimator:
    """Covariance-approximated mean and surrogate variance, with cached products."""

    kernel: KernelSpec
    dataset: Dataset
    approx: ApproxSet
    chol: tuple = field(repr=False)
    weights: np.ndarray = field(repr=False)
    sup_var: float
    sup_grid_size: int

    @property
    def tau(self) -> float:
        return self.dataset.tau

    def _chunks(self, W):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        for start in range(0, W.shape[0], _CHUNK):
            yield W[start:start + _CHUNK]

    def mean(self, W) -> np.ndarray:
        out = []
        for block in self._chunks(W):
            data_term = gram(self.kernel, block, self.dataset.W) @ self.dataset.Y
            z_term = gram(self.kernel, block, self.approx.Z) @ self.weights
            out.append((data_term - z_term) / self.tau)
        return np.concatenate(out)

    def variance(self, W) -> np.ndarray:
        L = np.tril(self.chol[0])
        out = []
        for block in self._chunks(W):
            kz = gram(self.kernel, self.approx.Z, block)
            v = solve_triangular(L, kz, lower=True, check_finite=False)
            out.append((kernel_diag(self.kernel, block) - np.einsum("ij,ij->j", v, v)) / self.tau)
        return np.maximum(np.concatenate(out), 0.0)

    def stats(self, W) -> tuple[np.ndarray, np.ndarray]:
        return self.mean(W), self.variance(W)

    def with_dataset(self, dataset: Dataset) -> "UscaEstimator":
        """Same Z and factorization, different history (used for neighbour probes)."""
        if dataset.T != self.approx.T or dataset.tau != self.tau:
            raise InputError("replacement dataset must keep T and tau")
        weights = _weights(self.kernel, self.chol, self.approx.Z, dataset)
        return UscaEstimator(self.kernel, dataset, self.approx, self.chol, weights,
                             self.sup_var, self.sup_grid_size)

    def to_dict(self) -> dict[str, Any]:
        return {"K": self.approx.K, "T": self.approx.T, "gamma_estimate": self.approx.gamma_estimate,
                "tau": self.tau, "sup_var": self.sup_var, "sup_grid_size": self.sup_grid_size,
                "Z": self.approx.Z.tolist(), "weights": self.weights.tolist()}


def _weights(kernel, chol, Z, dataset: Dataset) -> np.ndarray:
    return cho_solve(chol, gram(kernel, Z, dataset.W) @ dataset.Y, check_finite=False)


def default_sup_grid(domain: Domain, T: int, cap: int = 200_000) -> np.ndarray:
    """U_T lattice plus the corners of the joint box."""
    return np.vstack([make_grid(domain, T, cap=cap).points, domain.joint_corners()])


def build_usca(kernel: KernelSpec, dataset: Dataset, approx: ApproxSet, sup_grid) -> UscaEstimator:
    if approx.T != dataset.T:
        raise InputError(f"approximating set built for T={approx.T}, dataset has T={dataset.T}")
    if dataset.T < 1:
        raise InputError("need at least one observation")
    A = gram(kernel, approx.Z)
    A[np.diag_indices_from(A)] += approx.K * dataset.tau
    chol = cholesky(A, "K_ZZ + K tau I")
    weights = _weights(kernel, chol, approx.Z, dataset)
    est = UscaEstimator(kernel, dataset, approx, chol, weights, 0.0, 0)
    sup_grid = np.atleast_2d(np.asarray(sup_grid, dtype=float))
    sup_var = float(np.max(est.variance(sup_grid))) if sup_grid.size else 0.0
    return UscaEstimator(kernel, dataset, approx, chol, weights, sup_var, sup_grid.shape[0])


def usca_stats(est: UscaEstimator, w) -> tuple[float, float]:
    """Mean and surrogate variance at a single point."""
    w = np.asarray(w, dtype=float)[None, :]
    return float(est.mean(w)[0]), float(est.variance(w)[0])


# ---------------------------------------------------------------------------
# feature-space oracle


def _z_tilde(kernel: KernelSpec, approx: ApproxSet, tau: float) -> np.ndarray:
    Phi_Z = feature_matrix(kernel, approx.Z)
    return Phi_Z.T @ Phi_Z / approx.K + tau * np.eye(Phi_Z.shape[1])


def parametric_oracle_mean(kernel: KernelSpec, dataset: Dataset, approx: ApproxSet, W) -> np.ndarray:
    """phi(w)^T Ztilde^-1 Phi_W^T Y, formed explicitly in feature space."""
    Zt = _z_tilde(kernel, approx, dataset.tau)
    rhs = feature_matrix(kernel, dataset.W).T @ dataset.Y
    theta = np.linalg.solve(Zt, rhs)
    return feature_matrix(kernel, np.atleast_2d(W)) @ theta


def parametric_oracle_variance(kernel: KernelSpec, approx: ApproxSet, tau: float, W) -> np.ndarray:
    """phi(w)^T Ztilde^-1 phi(w)."""
    Zt = _z_tilde(kernel, approx, tau)
    P = feature_matrix(kernel, np.atleast_2d(W))
    return np.einsum("ij,ij->i", P, np.linalg.solve(Zt, P.T).T)
