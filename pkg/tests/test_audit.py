import json
import math

import numpy as np
import pytest

from usca import audit
from usca import rng as rngmod
from usca.bandit import Environment, learn, make_environment
from usca.env import Domain, NoiseModel, make_grid, sample_reward_function
from usca.errors import InputError, ResourceError
from usca.kernels import Eigendecay, KernelSpec, gram
from usca.mechanism import ExpMechanism
from usca.env import action_grid

SE_ENV = {"domain": {"action_box": [[0, 1]], "context_box": [[0, 1]]},
          "kernel": {"family": "se", "lengthscale": 0.2}, "B": 1.0, "n_centers": 10,
          "noise": {"kind": "gaussian", "R": 0.1}}
LIN4 = KernelSpec.linear(4, scale=2.0)
BOX4 = Domain.box([(-1, 1)] * 4)


@pytest.fixture(scope="module")
def env():
    return make_environment(SE_ENV, 1)


# ---------------------------------------------------------------------------
# spectral


def test_linear_second_moment_hand_value():
    M = audit.second_moment_linear_box([-1, -1, -1], [1, 1, 1], 1.0)
    assert np.allclose(M, np.eye(3) / 3, atol=1e-15)
    M2 = audit.second_moment_linear_box([-1, -1], [1, 1], 2.0)
    assert np.allclose(M2, np.eye(2) / 12)


def test_mc_second_moment_agrees_with_closed_form():
    M = audit.second_moment_mc(LIN4, BOX4, 400_000, np.random.default_rng(0))
    assert np.max(np.abs(M - audit.second_moment_linear_box(BOX4.joint_lower, BOX4.joint_upper, 2.0))) < 2e-3


def test_spectral_huge_tau():
    # gamma vanishes as tau grows, so K is pinned to keep T*K small; with K far below
    # T/gamma the lemma's pass line no longer applies, only the limit does
    rep = audit.spectral_audit(LIN4, BOX4, 64, 1e9, 0.1, 10, 0, K=4)
    assert rep.observed < 1e-6
    with pytest.raises(ResourceError):
        audit.spectral_audit(LIN4, BOX4, 64, 1e9, 0.1, 10, 0)


def test_spectral_large_K_shrinks_norm():
    big = audit.spectral_audit(LIN4, BOX4, 10, 1.0, 0.1, 50, 3, K=10_000, z_cap=100_000)
    one = audit.spectral_audit(LIN4, BOX4, 10, 1.0, 0.1, 50, 3, K=1)
    wins = np.mean(np.array(big.details["norms"]) < np.array(one.details["norms"]))
    assert wins >= 0.9


def test_spectral_report_passes_at_desk_scale():
    rep = audit.spectral_audit(LIN4, BOX4, 256, 1.0, 0.1, 40, 1)
    assert rep.passed and rep.details["threshold_met"]
    assert rep.config["K"] >= 1


def test_spectral_threshold_unmet_is_advisory():
    k = KernelSpec.linear(2, scale=2.0, eigendecay=Eigendecay(2.0, 1e-4, 1.0))
    rep = audit.spectral_audit(k, Domain.box([(-1, 1)] * 2), 16, 1.0, 0.1, 5, 0)
    assert not rep.details["threshold_met"]
    assert rep.passed and "threshold unmet, bound advisory" in rep.notes


def test_spectral_rejects_bad_inputs():
    with pytest.raises(InputError):
        audit.spectral_audit(KernelSpec.se(1.0), BOX4, 8, 1.0, 0.1, 2, 0)
    with pytest.raises(ResourceError):
        audit.spectral_audit(KernelSpec.linear(201, 1.0), Domain.box([(0, 1)] * 201), 8, 1.0, 0.1, 2, 0)


# ---------------------------------------------------------------------------
# approximation


def test_zero_function_noiseless_estimate_vanishes(env):
    flat = Environment(env.domain, env.kernel,
                       sample_reward_function(env.kernel, env.domain, 0.0, 3, np.random.default_rng(0)),
                       env.contexts, NoiseModel(0.0))
    assert audit.approximation_error(flat, 32, 1.0, 0, gamma_estimate=4.0)["sup_error"] <= 1e-9


def test_noiseless_beats_noisy_on_matched_seeds(env):
    noisy = Environment(env.domain, env.kernel, env.f, env.contexts, NoiseModel(1.0))
    clean, dirty = [], []
    for s in range(5):
        clean.append(audit.approximation_error(noisy, 128, 1.0, s, gamma_estimate=17.5, noise_free=True)["sup_error"])
        dirty.append(audit.approximation_error(noisy, 128, 1.0, s, gamma_estimate=17.5)["sup_error"])
    assert np.mean(clean) < np.mean(dirty)


def test_approximation_audit_report_shape(env):
    rep = audit.approximation_audit(env, [16, 32], 1.0, 0.1, [0, 1])
    assert len(rep.details["median_ratio"]) == 2
    assert rep.passed == (rep.observed <= rep.bound and rep.details["bound_dominates"])
    with pytest.raises(InputError):
        audit.approximation_audit(env, [], 1.0, 0.1, [0])


# ---------------------------------------------------------------------------
# sensitivity and privacy


def _setup(env, T=24):
    learned = learn(env, T, 1.0, rngmod.Streams(2), gamma_estimate=5.0)
    est = learned.estimator
    grid = make_grid(env.domain, 64).points
    return learned, est, grid, gram(env.kernel, grid, est.dataset.W), gram(env.kernel, grid, est.approx.Z)


def test_identity_swap_is_exactly_zero(env):
    learned, est, grid, G_W, G_Z = _setup(env)
    t = 5
    delta, _ = audit._mean_delta(est, grid, G_W, G_Z, t, est.dataset.W[t], est.dataset.Y[t])
    assert np.all(delta == 0.0)


def test_reward_only_swap_linear(env):
    learned, est, grid, G_W, G_Z = _setup(env)
    t, w, y = 3, est.dataset.W[3], est.dataset.Y[3]
    d1, _ = audit._mean_delta(est, grid, G_W, G_Z, t, w, y + 0.25)
    d2, _ = audit._mean_delta(est, grid, G_W, G_Z, t, w, y + 0.5)
    d3, _ = audit._mean_delta(est, grid, G_W, G_Z, t, w, y - 0.75)
    assert np.max(np.abs(d2 - 2 * d1)) <= 1e-10
    assert np.max(np.abs(d3 + 3 * d1)) <= 1e-10
    # matches a full rebuild
    full = est.with_dataset(est.dataset.replace_record(t, w, y + 0.5)).mean(grid) - est.mean(grid)
    assert np.max(np.abs(full - d2)) <= 1e-10


def test_sensitivity_audit_small(env):
    rep = audit.sensitivity_audit(env, 32, 1.0, 40, 0, gamma_estimate=8.0)
    assert rep.passed and rep.observed <= rep.bound
    assert len(rep.details["per_pair"]) == 40
    with pytest.raises(InputError):
        audit.sensitivity_audit(env, 8, 1.0, 0, 0)


def test_privacy_audit_small(env):
    rep = audit.privacy_audit(env, 32, 1.0, [0.5, 1.0, 4.0], 30, 0, cells=32, gamma_estimate=8.0)
    assert rep.passed and rep.observed <= 1.0
    for e, v in rep.details["max_log_ratio"].items():
        assert v <= float(e)


def test_identical_databases_zero_log_ratio():
    g = action_grid(Domain.box([(0, 1)]), 16)
    u = np.random.default_rng(0).standard_normal(16)
    assert audit.max_abs_log_ratio(ExpMechanism(g, u, 1.0, 0.3), ExpMechanism(g, u.copy(), 1.0, 0.3)) == 0.0


def test_doubling_epsilon_doubles_unnormalized_log_ratio():
    u = np.random.default_rng(1).standard_normal(16)
    v = u + np.random.default_rng(2).uniform(-0.1, 0.1, 16)
    m = 0.4
    for eps in (0.3, 1.0, 2.5):
        r1 = eps * u / (2 * m) - eps * v / (2 * m)
        r2 = 2 * eps * u / (2 * m) - 2 * eps * v / (2 * m)
        assert np.allclose(r2, 2 * r1, rtol=0, atol=1e-15)
    # the normalized ratio stays within eps * Delta / m at both budgets
    g = action_grid(Domain.box([(0, 1)]), 16)
    delta = float(np.max(np.abs(u - v)))
    for eps in (1.0, 2.0):
        assert audit.max_abs_log_ratio(ExpMechanism(g, u, eps, m), ExpMechanism(g, v, eps, m)) <= eps * delta / m


# ---------------------------------------------------------------------------
# geometric


def test_geometric_whole_box_branch():
    rep = audit.geometric_audit(2, 1.0, 1.0, 1.5, 10_000, 0)
    assert rep.details["ratio"] == 1.0 and rep.observed == 1.0 and rep.passed


def test_geometric_one_dimensional_exact():
    rep = audit.geometric_audit(1, 1.0, 1.0, 0.5, 200_000, 0, x_star=[0.0])
    se = rep.details["standard_error"]
    assert abs(rep.details["ratio"] - 0.5) <= 3 * se
    assert rep.passed


def test_geometric_cone_two_dimensional():
    side = 1 / math.sqrt(2)
    rep = audit.geometric_audit(2, 1.0, 1.0, 0.3, 200_000, 0, x_star=[side / 2, side / 2])
    # disk of radius 0.3 inside a square of area 1/2
    assert rep.details["ratio"] == pytest.approx(math.pi * 0.09 / 0.5, abs=4 * rep.details["standard_error"])
    assert rep.passed


def test_geometric_rejects_bad_input():
    with pytest.raises(InputError):
        audit.geometric_audit(0, 1.0, 1.0, 0.1, 10, 0)


# ---------------------------------------------------------------------------
# scaling


def test_uniform_control_slope_flat(env):
    rows = []
    for T in (16, 32, 64, 128):
        for trial in range(5):
            rows += audit.scaling_cell(env, T, [1.0], 1.0, 0, trial, n_eval=100, control=True)
    means = [np.mean([r["error_rate"] for r in rows if r["T"] == T]) for T in (16, 32, 64, 128)]
    assert abs(audit.fit_loglog_slope([16, 32, 64, 128], means)) < 0.05


def test_summarize_scaling_synthetic():
    rows = []
    for trial in range(4):
        for T in (64, 128, 256):
            for e in (0.1, 10.0):
                rows.append({"trial": trial, "T": T, "epsilon": e,
                             "error_rate": T ** -0.5 * (2.0 if e == 0.1 else 1.0)})
    rep = audit.summarize_scaling(rows, [64, 128, 256], [0.1, 10.0], eps_T=128)
    assert rep.observed == pytest.approx(-0.5)
    assert rep.details["monotone_fraction"] == 1.0 and rep.passed


def test_fit_slope_rejects_nonpositive():
    with pytest.raises(InputError):
        audit.fit_loglog_slope([1, 2], [0.0, 1.0])


def test_scaling_experiment_resume_and_shared_contexts(env):
    rows, rep = audit.scaling_experiment(env, [8, 16], [0.1, 10.0], 2, 1.0, 0, n_eval=20, cells=16)
    assert len(rows) == 2 * 2 * 2
    assert rep.n_trials == 2
    rest, none = audit.scaling_experiment(env, [8, 16], [0.1, 10.0], 2, 1.0, 0, n_eval=20, cells=16,
                                       done={(0, 8), (0, 16), (1, 8)})
    assert none is None
    assert [(r["trial"], r["T"]) for r in rest] == [(1, 16), (1, 16)]
    assert rest == [r for r in rows if (r["trial"], r["T"]) == (1, 16)]


# ---------------------------------------------------------------------------
# report plumbing


def test_report_json_and_margin():
    rep = audit.AuditReport("x", np.float64(0.25), 1.0, True, 3, config={"a": np.arange(2)})
    d = json.loads(rep.to_json())
    assert d["margin"] == 0.75 and d["config"]["a"] == [0, 1] and d["schema_version"] == 1
    assert rep.verdict().startswith("[PASS] x")
