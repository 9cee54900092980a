import json
import math

import numpy as np
import pytest

from usca import rng as rngmod
from usca.bandit import (Environment, MechanismPredictor, UniformPredictor, beta_1, beta_conf, error_rate, learn,
                         make_environment, n_bar_1, run_usca, simple_regrets, theory_constants)
from usca.env import ContextDistribution, NoiseModel, action_grid, sample_reward_function
from usca.errors import InputError, ResourceError
from usca.kernels import Eigendecay

SE_ENV = {"domain": {"action_box": [[0, 1]], "context_box": [[0, 1]]},
          "kernel": {"family": "se", "lengthscale": 0.2}, "B": 1.0, "n_centers": 10,
          "noise": {"kind": "gaussian", "R": 0.1}}
LINEAR_ENV = {"domain": {"action_box": [[0, 1]], "context_box": [[0, 1]]},
              "kernel": {"family": "finite", "feature_kind": "linear", "scale": 1.5}, "B": 1.0,
              "noise": {"kind": "gaussian", "R": 0.1}}


@pytest.fixture(scope="module")
def env():
    return make_environment(SE_ENV, 1)


def test_same_seed_bit_identical(env):
    a = run_usca(env, 16, 1.0, 1.0, 42, n_eval=20, gamma_estimate=4.0)
    b = run_usca(env, 16, 1.0, 1.0, 42, n_eval=20, gamma_estimate=4.0)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    c = run_usca(env, 16, 1.0, 1.0, 43, n_eval=20, gamma_estimate=4.0)
    assert c.to_dict()["dataset"] != a.to_dict()["dataset"]


def test_minimal_horizon(env):
    res = run_usca(env, 1, 1.0, 1.0, 0, n_eval=5)
    assert res.K >= 1 and res.approx.Z.shape[0] == res.K
    assert 0.0 <= res.output[0] <= 1.0
    assert math.isfinite(res.regret) and math.isfinite(res.er_montecarlo)


def test_output_inside_action_box(env):
    for seed in range(10):
        res = run_usca(env, 8, 0.01, 1.0, seed, n_eval=5, gamma_estimate=3.0, mech_cells=16)
        assert 0.0 <= res.output[0] <= 1.0


def test_huge_epsilon_beats_uniform_output():
    # paired trials: same f and final context, the private output against a uniform action
    wins = 0
    for s in range(100):
        e = make_environment(LINEAR_ENV, s)
        res = run_usca(e, 64, 1e9, 1.0, s, n_eval=1, gamma_estimate=2.13)
        grid = action_grid(e.domain, 64)
        xu = e.domain.sample_actions(np.random.default_rng(10_000 + s), 1)
        uniform_regret = simple_regrets(e.f, xu, res.final_context[None], grid.points)[0]
        wins += res.regret <= uniform_regret
    assert wins >= 95


def test_resource_cap_before_sampling(env):
    streams = rngmod.Streams(0)
    with pytest.raises(ResourceError):
        learn(env, 100, 1.0, streams, gamma_estimate=1.0, z_cap=50)


def test_invalid_arguments(env):
    with pytest.raises(InputError):
        run_usca(env, 4, 0.0, 1.0, 0)
    with pytest.raises(InputError):
        run_usca(env, 0, 1.0, 1.0, 0)


def test_queries_independent_of_contexts_and_rewards(env):
    other = Environment(env.domain, env.kernel,
                        sample_reward_function(env.kernel, env.domain, 1.0, 4, np.random.default_rng(99)),
                        ContextDistribution.truncated_gaussian(env.domain, [0.9], [0.05]),
                        NoiseModel(0.5, "uniform"))
    a = learn(env, 20, 1.0, rngmod.Streams(5), gamma_estimate=4.0)
    b = learn(other, 20, 1.0, rngmod.Streams(5), gamma_estimate=4.0)
    d = env.domain.d
    assert np.array_equal(a.dataset.W[:, :d], b.dataset.W[:, :d])
    assert not np.array_equal(a.dataset.W[:, d:], b.dataset.W[:, d:])
    assert not np.array_equal(a.dataset.Y, b.dataset.Y)
    # changing only f and the noise leaves the approximating set untouched
    same_ctx = Environment(env.domain, env.kernel, other.f, env.contexts, other.noise)
    c = learn(same_ctx, 20, 1.0, rngmod.Streams(5), gamma_estimate=4.0)
    assert np.array_equal(a.approx.Z, c.approx.Z)
    assert np.array_equal(a.dataset.W, c.dataset.W)


def test_K_fixed_before_data(env):
    res = run_usca(env, 8, 1.0, 1.0, 0, n_eval=5, gamma_estimate=2.0)
    order = res.order
    assert order.index("K") < order.index("contexts") < order.index("rewards")
    assert res.to_dict()["computation_order"] == order


# ---------------------------------------------------------------------------
# error rate


def _argmax_predictor(f, grid):
    def predict(C):
        out = []
        for c in np.atleast_2d(C):
            W = np.hstack([grid.points, np.repeat(c[None], len(grid), 0)])
            out.append(grid.points[np.argmax(f(W))])
        return np.array(out)
    return predict


def test_error_rate_self_oracle_is_zero(env):
    grid = action_grid(env.domain, 64)
    er = error_rate(env.f, _argmax_predictor(env.f, grid), env.contexts, 50, grid.points,
                    np.random.default_rng(0))
    assert er == 0.0


def test_error_rate_flat_reward(env):
    zero = sample_reward_function(env.kernel, env.domain, 0.0, 3, np.random.default_rng(0))
    grid = action_grid(env.domain, 16)
    er = error_rate(zero, UniformPredictor(env.domain, np.random.default_rng(1)), env.contexts, 30,
                    grid.points, np.random.default_rng(2))
    assert er == 0.0


def test_error_rate_constant_predictor_brute_force(env):
    grid = action_grid(env.domain, 32)
    x0 = np.array([0.37])
    er = error_rate(env.f, lambda C: np.repeat(x0[None], len(C), 0), env.contexts, 40, grid.points,
                    np.random.default_rng(3))
    # independent reimplementation with plain loops over the same contexts
    C = env.contexts.sample(np.random.default_rng(3), 40)
    total = 0.0
    for c in C:
        best = max(float(env.f(np.concatenate([g, c])[None])[0]) for g in grid.points)
        total += best - float(env.f(np.concatenate([x0, c])[None])[0])
    assert er == pytest.approx(total / 40, abs=1e-10)


def test_error_rate_rejects_empty(env):
    with pytest.raises(InputError):
        error_rate(env.f, lambda C: C, env.contexts, 0, [[0.5]], np.random.default_rng(0))


def test_mechanism_predictor_reuses_utilities(env):
    learned = learn(env, 16, 1.0, rngmod.Streams(0), gamma_estimate=4.0)
    grid = action_grid(env.domain, 16)
    pred = MechanismPredictor(learned.estimator, env, 1e9, 1.0, grid, np.random.default_rng(0))
    C = np.array([[0.1], [0.8]])
    U = pred.utilities(C)
    X = pred(C, U)
    for i in range(2):
        assert pred.grid.points[np.argmax(U[i])][0] == pytest.approx(X[i, 0], abs=grid.cell_widths[0] / 2)


# ---------------------------------------------------------------------------
# theory constants


def test_n_bar_1_example():
    assert n_bar_1(math.exp(-1), Eigendecay(2.0, 1.0 / 16, 1.0)) == pytest.approx(1.0, rel=1e-12)


def test_beta_example():
    assert beta_conf(math.exp(-1), 1.0, 1.0, 1.0) == pytest.approx(2 * math.sqrt(108 / 13), rel=1e-12)
    assert beta_conf(math.exp(-1), 1.0, 1.0, 1.0) == pytest.approx(5.7647, abs=1e-4)


def test_n_bar_1_decreasing_in_delta():
    decay = Eigendecay(3.0, 0.01, 1.0)
    vals = [n_bar_1(d, decay) for d in (0.001, 0.01, 0.1, 0.5)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_beta_p_at_most_one_rejected():
    with pytest.raises(InputError):
        Eigendecay(1.0)
    bad = Eigendecay.__new__(Eigendecay)
    object.__setattr__(bad, "beta_p", 0.5)
    object.__setattr__(bad, "C_p", 1.0)
    object.__setattr__(bad, "F", 1.0)
    with pytest.raises(InputError):
        n_bar_1(0.1, bad)
    with pytest.raises(InputError):
        theory_constants(1.5, Eigendecay(), 1, 1, 1, 10, 1.0)


def test_theory_constants_finite_positive():
    tc = theory_constants(0.05, Eigendecay(2.0, 1.0, 1.0), 0.1, 1.0, 1.0, 512, 30.0,
                          epsilon=1.0, d=1, lipschitz=5.0, diameter=1.0, grid_size=512)
    for k, v in tc.to_dict().items():
        assert math.isfinite(v) and v > 0, k
    assert tc.beta_2 == pytest.approx(tc.beta_1 + tc.beta)
    # sqrt form vs statement form differ only in the middle term
    mid = math.log(4 / 0.05)
    assert tc.beta_1_statement - tc.beta_1 == pytest.approx(28 / 17 * (mid - math.sqrt(mid)))
    assert beta_1(0.05, 0.1, 1.0, 1.0, 1.0) == tc.beta_1


def test_predicted_error_shrinks_with_epsilon_and_T():
    base = dict(epsilon=1.0, d=1, lipschitz=5.0, diameter=1.0, grid_size=100)
    a = theory_constants(0.1, Eigendecay(), 0.1, 1.0, 1.0, 1000, 20.0, **base).predicted_error
    b = theory_constants(0.1, Eigendecay(), 0.1, 1.0, 1.0, 1000, 20.0, **{**base, "epsilon": 10.0})
    c = theory_constants(0.1, Eigendecay(), 0.1, 1.0, 1.0, 10_000, 20.0, **base).predicted_error
    assert b.predicted_error < a and c < a
