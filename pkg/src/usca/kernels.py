"""Kernels, Gram matrices and information gain.

Three families are supported: squared exponential, half-integer Matern and
explicit finite-feature kernels. The finite-feature family exists so that
operator-level statements can be checked exactly in feature space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.linalg import cho_factor
from scipy.spatial.distance import cdist

from .errors import InputError, NumericalError, UnsupportedOperation

JITTER = 1e-10

FAMILIES = ("se", "matern", "finite")
FEATURE_KINDS = ("linear", "mercer")
MATERN_NUS = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class Eigendecay:
    """Polynomial eigendecay metadata ``lambda_j <= C_p j^-beta_p`` plus the bound F."""

    beta_p: float = 2.0
    C_p: float = 1.0
    F: float = 1.0

    def __post_init__(self):
        if not self.beta_p > 1:
            raise InputError(f"beta_p must exceed 1, got {self.beta_p}")
        if self.C_p <= 0 or self.F <= 0:
            raise InputError("C_p and F must be positive")


@dataclass(frozen=True)
class KernelSpec:
    """Immutable description of a positive-definite kernel on R^dim.

    Use the ``se``, ``matern``, ``linear`` and ``mercer`` constructors rather
    than filling fields by hand.
    """

    family: str
    lengthscale: float = 1.0
    nu: float = 1.5
    feature_kind: str | None = None
    feature_dim: int = 0
    input_dim: int | None = None
    scale: float = 1.0
    eigenvalues: tuple[float, ...] = ()
    frequency_scale: float = 1.0
    eigendecay: Eigendecay = field(default_factory=Eigendecay)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown kernel family {self.family!r}")
        if self.family in ("se", "matern") and not self.lengthscale > 0:
            raise InputError("lengthscale must be positive")
        if self.family == "matern" and self.nu not in MATERN_NUS:
            raise InputError(f"Matern smoothness must be one of {MATERN_NUS}, got {self.nu}")
        if self.family == "finite":
            if self.feature_kind not in FEATURE_KINDS:
                raise InputError(f"unknown feature kind {self.feature_kind!r}")
            if self.feature_dim < 1 or self.input_dim is None:
                raise InputError("finite kernels need feature_dim >= 1 and input_dim")
            if self.feature_kind == "linear" and self.feature_dim != self.input_dim:
                raise InputError("linear features require feature_dim == input_dim")
            if self.feature_kind == "linear" and not self.scale > 0:
                raise InputError("linear feature scale must be positive")
            if self.feature_kind == "mercer":
                if not self.eigenvalues or any(l <= 0 for l in self.eigenvalues):
                    raise InputError("mercer eigenvalues must be positive")
                if self.feature_dim != 2 * len(self.eigenvalues):
                    raise InputError("mercer feature_dim must be 2 * len(eigenvalues)")

    # constructors

    @classmethod
    def se(cls, lengthscale: float, input_dim: int | None = None, eigendecay: Eigendecay | None = None):
        return cls("se", lengthscale=lengthscale, input_dim=input_dim,
                   eigendecay=eigendecay or Eigendecay(2.0, 1.0, 1.0))

    @classmethod
    def matern(cls, nu: float, lengthscale: float, input_dim: int | None = None,
               eigendecay: Eigendecay | None = None):
        if eigendecay is None:
            eigendecay = Eigendecay(1.0 + 2.0 * nu / (input_dim or 1), 1.0, 1.0)
        return cls("matern", lengthscale=lengthscale, nu=nu, input_dim=input_dim, eigendecay=eigendecay)

    @classmethod
    def linear(cls, input_dim: int, scale: float = 1.0, eigendecay: Eigendecay | None = None):
        """phi(w) = w / scale. Pick ``scale >= max ||w||`` over the domain."""
        return cls("finite", feature_kind="linear", feature_dim=input_dim, input_dim=input_dim,
                   scale=scale, eigendecay=eigendecay or Eigendecay())

    @classmethod
    def mercer(cls, eigenvalues, input_dim: int, frequency_scale: float = 1.0,
               eigendecay: Eigendecay | None = None):
        """Truncated Mercer kernel ``sum_j lam_j cos(s j (u - u'))`` with ``u = sum(w)``.

        Eigenvalues are rescaled so that they sum to at most one.
        """
        eig = tuple(float(v) for v in eigenvalues)
        return cls("finite", feature_kind="mercer", feature_dim=2 * len(eig), input_dim=input_dim,
                   eigenvalues=eig, frequency_scale=frequency_scale, eigendecay=eigendecay or Eigendecay())

    @property
    def has_features(self) -> bool:
        return self.family == "finite"

    def with_eigendecay(self, **kw) -> "KernelSpec":
        return replace(self, eigendecay=replace(self.eigendecay, **kw))

    # serialization

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"family": self.family}
        if self.family in ("se", "matern"):
            out["lengthscale"] = self.lengthscale
        if self.family == "matern":
            out["nu"] = self.nu
        if self.input_dim is not None:
            out["input_dim"] = self.input_dim
        if self.family == "finite":
            out["feature_kind"] = self.feature_kind
            if self.feature_kind == "linear":
                out["scale"] = self.scale
            else:
                out["eigenvalues"] = list(self.eigenvalues)
                out["frequency_scale"] = self.frequency_scale
        e = self.eigendecay
        out["eigendecay"] = {"beta_p": e.beta_p, "C_p": e.C_p, "F": e.F}
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "KernelSpec":
        d = dict(d)
        family = d.pop("family", None)
        eig = d.pop("eigendecay", None)
        decay = Eigendecay(**eig) if eig is not None else None
        input_dim = d.pop("input_dim", None)
        if family == "se":
            spec = cls.se(d.pop("lengthscale"), input_dim, decay)
        elif family == "matern":
            spec = cls.matern(d.pop("nu"), d.pop("lengthscale"), input_dim, decay)
        elif family == "finite":
            kind = d.pop("feature_kind")
            if input_dim is None:
                raise InputError("finite kernels need input_dim")
            if kind == "linear":
                spec = cls.linear(input_dim, d.pop("scale", 1.0), decay)
            elif kind == "mercer":
                spec = cls.mercer(d.pop("eigenvalues"), input_dim, d.pop("frequency_scale", 1.0), decay)
            else:
                raise InputError(f"unknown feature kind {kind!r}")
        else:
            raise InputError(f"unknown kernel family {family!r}")
        if d:
            raise InputError(f"unknown kernel keys: {sorted(d)}")
        return spec


def _as_points(A, spec: KernelSpec) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise InputError("points must be a 2-D array of shape (n, dim)")
    if spec.input_dim is not None and A.shape[0] and A.shape[1] != spec.input_dim:
        raise InputError(f"point dimension {A.shape[1]} does not match kernel input_dim {spec.input_dim}")
    return A


def _matern_from_dist(d: np.ndarray, nu: float, l: float) -> np.ndarray:
    if nu == 0.5:
        return np.exp(-d / l)
    if nu == 1.5:
        s = math.sqrt(3.0) * d / l
        return (1.0 + s) * np.exp(-s)
    s = math.sqrt(5.0) * d / l
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def feature_matrix(spec: KernelSpec, A) -> np.ndarray:
    """Rows are phi(a) for each a in A. Finite-feature kernels only."""
    if not spec.has_features:
        raise UnsupportedOperation(f"{spec.family} kernels have no explicit finite feature map")
    A = _as_points(A, spec)
    if spec.feature_kind == "linear":
        return A / spec.scale
    lam = np.asarray(spec.eigenvalues)
    lam = lam / max(1.0, lam.sum())
    j = np.arange(1, lam.size + 1)
    phase = spec.frequency_scale * np.outer(A.sum(axis=1), j)
    root = np.sqrt(lam)
    return np.concatenate([root * np.cos(phase), root * np.sin(phase)], axis=1)


def feature_map(spec: KernelSpec, w) -> np.ndarray:
    """phi(w) for a single point."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise InputError("feature_map takes a single point")
    return feature_matrix(spec, w[None, :])[0]


def gram(spec: KernelSpec, A, B=None) -> np.ndarray:
    """Kernel matrix with entries k(A_i, B_j). ``B=None`` means B = A."""
    A = _as_points(A, spec)
    same = B is None
    B = A if same else _as_points(B, spec)
    if A.shape[0] == 0 or B.shape[0] == 0:
        return np.zeros((A.shape[0], B.shape[0]))
    if A.shape[1] != B.shape[1]:
        raise InputError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if spec.family == "finite":
        FA = feature_matrix(spec, A)
        FB = FA if same else feature_matrix(spec, B)
        G = FA @ FB.T
    elif spec.family == "se":
        G = np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * spec.lengthscale**2))
    else:
        G = _matern_from_dist(cdist(A, B), spec.nu, spec.lengthscale)
    if same:
        G = 0.5 * (G + G.T)
    return G


def kernel_diag(spec: KernelSpec, A) -> np.ndarray:
    """k(a, a) for each row of A."""
    A = _as_points(A, spec)
    if spec.family == "finite":
        F = feature_matrix(spec, A)
        return np.einsum("ij,ij->i", F, F)
    return np.ones(A.shape[0])


def eval_kernel(spec: KernelSpec, w, w2) -> float:
    """k(w, w2) for two single points."""
    w = np.asarray(w, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    if w.shape != w2.shape or w.ndim != 1:
        raise InputError(f"points must be 1-D with equal shapes, got {w.shape} and {w2.shape}")
    if spec.family == "finite":
        a, b = feature_map(spec, w), feature_map(spec, w2)
        return float(np.sum(a * b))
    _as_points(w, spec)
    d2 = float(np.sum((w - w2) ** 2))
    if spec.family == "se":
        return math.exp(-d2 / (2.0 * spec.lengthscale**2))
    return float(_matern_from_dist(np.asarray(math.sqrt(d2)), spec.nu, spec.lengthscale))


def cholesky(M: np.ndarray, name: str = "matrix"):
    """Jittered lower Cholesky factor in scipy ``cho_factor`` form."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NumericalError(f"{name} has non-finite entries")
    try:
        return cho_factor(M + JITTER * np.eye(M.shape[0]), lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization of {name} failed: {exc}") from exc


def info_gain(spec: KernelSpec, points, tau: float) -> float:
    """Half the log-determinant of ``I + K / tau``."""
    if tau <= 0:
        raise InputError("tau must be positive")
    G = gram(spec, points)
    if G.shape[0] == 0:
        raise InputError("info_gain needs at least one point")
    c, _ = cholesky(np.eye(G.shape[0]) + G / tau, "I + K/tau")
    return float(np.sum(np.log(np.diag(c))))


def estimate_gamma_T(spec: KernelSpec, domain, T: int, tau: float, trials: int = 10,
                     rng: np.random.Generator | None = None) -> float:
    """Monte-Carlo lower bound on the maximal information gain over T points.

    Each trial gets its own child seed, so for a fixed ``rng`` state the
    T-point draw of a trial is a prefix of the 2T-point draw of that trial.
    """
    if T < 1 or trials < 1:
        raise InputError("T and trials must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    seeds = rng.integers(0, 2**63 - 1, size=trials)
    best = 0.0
    for s in seeds:
        pts = domain.sample_joint_uniform(np.random.default_rng(int(s)), T)
        best = max(best, info_gain(spec, pts, tau))
    return best
