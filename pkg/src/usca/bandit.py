"""End-to-end private contextual kernel bandit (USCA) and its theory constants."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import rng as rngmod
from .env import (ContextDistribution, Domain, Grid, NoiseModel, RewardFunction, action_grid,
                  default_clip_bound, observe_many, sample_reward_function)
from .errors import InputError, ResourceError
from .estimators import (DEFAULT_Z_CAP, ApproxSet, Dataset, UscaEstimator, approx_multiplier,
                         build_approx_set, build_usca, default_sup_grid)
from .kernels import Eigendecay, KernelSpec, estimate_gamma_T
from .mechanism import DEFAULT_CELLS, ExpMechanism, sensitivity_bound


@dataclass(frozen=True, eq=False)
class Environment:
    """A fully instantiated problem: domain, kernel, reward function, contexts, noise."""

    domain: Domain
    kernel: KernelSpec
    f: RewardFunction
    contexts: ContextDistribution
    noise: NoiseModel
    clip_bound: float | None = None

    @property
    def B(self) -> float:
        return self.f.B

    def clip_for(self, T: int) -> float:
        if self.clip_bound is not None:
            return self.clip_bound
        return default_clip_bound(self.B, self.noise.R, T)

    def joint(self, X, C) -> np.ndarray:
        X = np.atleast_2d(X)
        C = np.atleast_2d(C) if self.domain.d_context else np.zeros((X.shape[0], 0))
        if C.shape[0] == 1 and X.shape[0] > 1:
            C = np.repeat(C, X.shape[0], axis=0)
        return np.hstack([X, C])


def make_environment(cfg: dict[str, Any], seed: int) -> Environment:
    """Build an Environment from the ``environment`` block of an experiment config."""
    domain = Domain.box(cfg["domain"]["action_box"], cfg["domain"].get("context_box", []))
    kcfg = dict(cfg["kernel"])
    kcfg.setdefault("input_dim", domain.dim)
    kernel = KernelSpec.from_dict(kcfg)
    ctx = ContextDistribution.from_dict(cfg.get("context_distribution", {"kind": "uniform"}), domain)
    ncfg = cfg.get("noise", {})
    noise = NoiseModel(float(ncfg.get("R", 0.0)), ncfg.get("kind", "gaussian"))
    f = sample_reward_function(kernel, domain, float(cfg["B"]), int(cfg.get("n_centers", 10)),
                               rngmod.stream(seed, "env"))
    return Environment(domain, kernel, f, ctx, noise, cfg.get("clip_bound"))


# ---------------------------------------------------------------------------
# learning and prediction


@dataclass(eq=False)
class Learned:
    dataset: Dataset
    approx: ApproxSet
    estimator: UscaEstimator
    clip_bound: float
    order: list[str] = field(default_factory=list)


def learn(env: Environment, T: int, tau: float, streams: rngmod.Streams, *,
          gamma_estimate: float | None = None, gamma_trials: int = 10, z_cap: int = DEFAULT_Z_CAP,
          sup_grid=None, queries_only: bool = False) -> Learned:
    """Learning stage plus estimator construction.

    K is fixed from (kernel, domain, T) before any context or reward is
    drawn; query points come from their own stream and never see the data.
    """
    if T < 1:
        raise InputError("T must be >= 1")
    order = []
    if gamma_estimate is None:
        gamma_estimate = estimate_gamma_T(env.kernel, env.domain, T, tau, gamma_trials, streams["gamma"])
    K = approx_multiplier(T, gamma_estimate)
    if T * K > z_cap:
        raise ResourceError(f"approximating set needs T*K = {T * K} points, above the cap of {z_cap}")
    order.append("K")
    X = env.domain.sample_actions(streams["learn-actions"], T)
    order.append("queries")
    C = (env.contexts.sample(streams["learn-contexts"], T) if env.domain.d_context
         else np.zeros((T, 0)))
    order.append("contexts")
    W = np.hstack([X, C])
    B_y = env.clip_for(T)
    Y = observe_many(env.f, W, env.noise, B_y, streams["noise"])
    order.append("rewards")
    dataset = Dataset(W, Y, tau)
    approx = build_approx_set(env.domain, env.contexts, T, gamma_estimate, streams["approx-set"], z_cap)
    if sup_grid is None:
        sup_grid = default_sup_grid(env.domain, T)
    est = build_usca(env.kernel, dataset, approx, sup_grid)
    order.append("estimator")
    return Learned(dataset, approx, est, B_y, order)


def mechanism_at(est: UscaEstimator, env: Environment, context, epsilon: float, m: float,
                 grid: Grid) -> ExpMechanism:
    """Exponential mechanism over the action grid with utility mean(., context)."""
    W = env.joint(grid.points, np.asarray(context, dtype=float).reshape(1, -1))
    return ExpMechanism(grid, est.mean(W), epsilon, m)


class MechanismPredictor:
    """Maps a batch of contexts to private actions, one mechanism draw each."""

    def __init__(self, est: UscaEstimator, env: Environment, epsilon: float, m: float, grid: Grid,
                 rng: np.random.Generator):
        self.est, self.env, self.epsilon, self.m, self.grid, self.rng = est, env, epsilon, m, grid, rng

    def utilities(self, C) -> np.ndarray:
        C = np.atleast_2d(C)
        n_cells = len(self.grid)
        X = np.tile(self.grid.points, (C.shape[0], 1))
        W = np.hstack([X, np.repeat(C, n_cells, axis=0)])
        return self.est.mean(W).reshape(C.shape[0], n_cells)

    def __call__(self, C, utilities=None) -> np.ndarray:
        U = self.utilities(C) if utilities is None else utilities
        return np.vstack([ExpMechanism(self.grid, u, self.epsilon, self.m).sample(self.rng) for u in U])


class UniformPredictor:
    """No-learning control: uniform action regardless of context."""

    def __init__(self, domain: Domain, rng: np.random.Generator):
        self.domain, self.rng = domain, rng

    def __call__(self, C) -> np.ndarray:
        return self.domain.sample_actions(self.rng, np.atleast_2d(C).shape[0])


def error_rate(f: RewardFunction, predictor: Callable[[np.ndarray], np.ndarray],
               ctx_dist: ContextDistribution, n_eval: int, opt_grid, rng: np.random.Generator) -> float:
    """Monte-Carlo estimate of E_c[max_x f(x, c) - f(predictor(c), c)], max taken over opt_grid."""
    if n_eval < 1:
        raise InputError("n_eval must be >= 1")
    C = ctx_dist.sample(rng, n_eval) if ctx_dist.dim else np.zeros((n_eval, 0))
    return float(np.mean(simple_regrets(f, predictor(C), C, opt_grid)))


def simple_regrets(f: RewardFunction, X, C, opt_grid) -> np.ndarray:
    X, C = np.atleast_2d(X), np.atleast_2d(C)
    opt_grid = np.atleast_2d(opt_grid)
    n = opt_grid.shape[0]
    W = np.hstack([np.tile(opt_grid, (C.shape[0], 1)), np.repeat(C, n, axis=0)])
    best = f(W).reshape(C.shape[0], n).max(axis=1)
    return best - f(np.hstack([X, C]))


@dataclass(eq=False)
class RunResult:
    T: int
    epsilon: float
    tau: float
    master_seed: int
    trial: int
    dataset: Dataset
    approx: ApproxSet
    sup_var: float
    m: float
    clip_bound: float
    final_context: np.ndarray
    output: np.ndarray
    regret: float
    er_montecarlo: float
    order: list[str]
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.approx.K

    @property
    def gamma_hat(self) -> float:
        return self.approx.gamma_estimate

    def to_dict(self) -> dict[str, Any]:
        """Deterministic record; wall-clock timings are kept out on purpose."""
        return {
            "schema_version": 1,
            "T": self.T, "epsilon": self.epsilon, "tau": self.tau,
            "seeds": {"master_seed": self.master_seed, "trial": self.trial,
                      "streams": list(rngmod.STREAMS)},
            "gamma_hat": self.gamma_hat, "K": self.K, "sup_var": self.sup_var, "m": self.m,
            "clip_bound": self.clip_bound,
            "final_context": self.final_context.tolist(), "output": self.output.tolist(),
            "regret": self.regret, "er_montecarlo": self.er_montecarlo,
            "computation_order": self.order,
            "dataset": {"W": self.dataset.W.tolist(), "Y": self.dataset.Y.tolist()},
        }

    def csv_row(self) -> dict[str, Any]:
        return {"seed": self.master_seed, "trial": self.trial, "T": self.T, "epsilon": self.epsilon,
                "gamma_hat": self.gamma_hat, "K": self.K, "sup_var": self.sup_var,
                "regret": self.regret, "er_montecarlo": self.er_montecarlo,
                "runtime_ms": round(1000 * sum(self.timings.values()), 3)}


CSV_COLUMNS = ["seed", "trial", "T", "epsilon", "gamma_hat", "K", "sup_var", "regret",
               "er_montecarlo", "runtime_ms"]


def run_usca(env: Environment, T: int, epsilon: float, tau: float, master_seed: int, trial: int = 0,
             *, mech_cells: int = DEFAULT_CELLS, z_cap: int = DEFAULT_Z_CAP, gamma_trials: int = 10,
             n_eval: int = 200, gamma_estimate: float | None = None) -> RunResult:
    """Run the full algorithm once and score its output."""
    if not epsilon > 0:
        raise InputError("epsilon must be positive")
    streams = rngmod.Streams(master_seed, trial)
    t0 = time.perf_counter()
    learned = learn(env, T, tau, streams, gamma_estimate=gamma_estimate, gamma_trials=gamma_trials,
                    z_cap=z_cap)
    t1 = time.perf_counter()
    est = learned.estimator
    grid = action_grid(env.domain, mech_cells)
    m = sensitivity_bound(est, learned.clip_bound)
    c_next = (env.contexts.sample(streams["final-context"], 1)[0] if env.domain.d_context
              else np.zeros(0))
    mech = mechanism_at(est, env, c_next, epsilon, m, grid)
    x_hat = mech.sample(streams["mechanism"])
    regret = float(simple_regrets(env.f, x_hat[None, :], c_next[None, :], grid.points)[0])
    predictor = MechanismPredictor(est, env, epsilon, m, grid, streams["eval-mechanism"])
    er = error_rate(env.f, predictor, env.contexts, n_eval, grid.points, streams["eval"])
    t2 = time.perf_counter()
    return RunResult(T, epsilon, tau, master_seed, trial, learned.dataset, learned.approx,
                     est.sup_var, m, learned.clip_bound, c_next, x_hat, regret, er,
                     learned.order, {"learn": t1 - t0, "predict": t2 - t1})


# ---------------------------------------------------------------------------
# theory constants


@dataclass(frozen=True)
class TheoryConstants:
    """Constants from the analysis.

    ``beta_1`` uses the expression assembled at the end of the approximation
    proof, where the middle term is ``(28/17) sqrt(log(4/delta) / tau)``; the
    lemma statement writes it without the square root (``beta_1_statement``).
    """

    N_bar_1: float
    beta: float
    beta_1: float
    beta_1_statement: float
    beta_2: float
    gamma_T: float
    predicted_error: float
    approximation_bound: float
    sup_var_bound: float

    def to_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def n_bar_1(delta: float, decay: Eigendecay) -> float:
    """(log(1/delta) / (16 C_p F^2)) ^ (2 beta_p / (beta_p - 1))."""
    _check_delta(delta)
    if not decay.beta_p > 1:
        raise InputError("beta_p must exceed 1")
    base = math.log(1.0 / delta) / (16.0 * decay.C_p * decay.F**2)
    return base ** (2.0 * decay.beta_p / (decay.beta_p - 1.0))


def beta_conf(delta: float, R: float, tau: float, F: float) -> float:
    """(2R / tau) log(1/delta) sqrt(108 F^2 / 13)."""
    _check_delta(delta)
    return 2.0 * R / tau * math.log(1.0 / delta) * math.sqrt(108.0 * F**2 / 13.0)


def beta_1(delta: float, R: float, tau: float, B: float, F: float, statement_form: bool = False) -> float:
    _check_delta(delta)
    middle = math.log(4.0 / delta) / tau
    middle = middle if statement_form else math.sqrt(middle)
    return ((math.sqrt(162.0 * B**3 / (13.0 * F**2)) + 81.0 * F**2 / 52.0) * math.log(8.0 / delta)
            + 28.0 / 17.0 * middle
            + 2.0 * B * math.sqrt(108.0 * F**2 * tau / 13.0)
            + 4.0 * R * math.log(4.0 / delta) * math.sqrt(243.0 * F**2 / 26.0))


def beta_2(delta: float, R: float, tau: float, B: float, F: float) -> float:
    return beta_1(delta, R, tau, B, F) + beta_conf(delta, R, tau, F)


def _lead_term(B: float, R: float, F: float, gamma_T: float, T: int, log_arg: float) -> float:
    return (11.0 / 3.0 * B + 3.0 * R * math.sqrt(gamma_T * 81.0 * F**2 / 13.0 * math.log(log_arg))) / T


def approximation_bound(delta: float, R: float, tau: float, B: float, F: float, T: int,
                        gamma_T: float, grid_size: int) -> float:
    """Uniform error bound on |mean - f| over the domain."""
    d4 = delta / (4.0 * grid_size)
    return (_lead_term(B, R, F, gamma_T, T, 2.0 / delta)
            + (beta_conf(d4, R, tau, F) + beta_1(d4, R, tau, B, F)) * math.sqrt(gamma_T / T))


def predicted_error(delta: float, R: float, tau: float, B: float, F: float, T: int, gamma_T: float,
                    epsilon: float, d: int, lipschitz: float, diameter: float, grid_size: int) -> float:
    """Right-hand side of the utility theorem for the average simple regret."""
    d12 = delta / (12.0 * grid_size)
    stat = 10.0 * (_lead_term(B, R, F, gamma_T, T, 6.0 / delta)
                   + beta_2(d12, R, tau, B, F) * math.sqrt(gamma_T / T))
    arg = 2592.0 * B * F**2 * T * lipschitz * diameter * epsilon / (13.0 * gamma_T)
    priv = (gamma_T / T / epsilon * 648.0 * B * F**2 / 13.0
            * (d * math.log(max(arg, 1.0)) + math.log(3.0 / delta)))
    return stat + priv


def theory_constants(delta: float, decay: Eigendecay, R: float, tau: float, B: float, T: int,
                     gamma_T: float, *, epsilon: float = 1.0, d: int = 1, lipschitz: float = 1.0,
                     diameter: float = 1.0, grid_size: int = 1) -> TheoryConstants:
    _check_delta(delta)
    if not decay.beta_p > 1:
        raise InputError("beta_p must exceed 1")
    if tau <= 0 or T < 1 or gamma_T <= 0 or B < 0 or R < 0:
        raise InputError("need tau > 0, T >= 1, gamma_T > 0, B >= 0, R >= 0")
    F = decay.F
    return TheoryConstants(
        N_bar_1=n_bar_1(delta, decay),
        beta=beta_conf(delta, R, tau, F),
        beta_1=beta_1(delta, R, tau, B, F),
        beta_1_statement=beta_1(delta, R, tau, B, F, statement_form=True),
        beta_2=beta_2(delta, R, tau, B, F),
        gamma_T=gamma_T,
        predicted_error=predicted_error(delta, R, tau, B, F, T, gamma_T, epsilon, d, lipschitz,
                                        diameter, grid_size),
        approximation_bound=approximation_bound(delta, R, tau, B, F, T, gamma_T, grid_size),
        sup_var_bound=81.0 * F**2 * gamma_T / (13.0 * T),
    )


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise InputError(f"delta must lie in (0, 1), got {delta}")
