"""Sampled operators, fitted Q-learning and the sample-size formulas."""

import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regmfg.exact import QFactors, greedy_policy, mean_field_update, solve_mfe, solve_q_star
from regmfg.learn import (
    DirichletBehavior,
    FitError,
    GenerativeSimulator,
    LearnerConfig,
    SampleBatch,
    SampleComplexityInputs,
    empirical_mean_field_update,
    error_propagation_bound,
    fit_q_factors,
    fitted_q_learning,
    generate_batch,
    learn_mfe,
    sample_size_m1,
    sample_size_m2,
    substream,
    uniform_simplex_behavior,
)
from regmfg.model import ZeroRegularizer, entropy_regularizer, benchmark_model, tabular_model

U_GRID = np.stack([np.linspace(0, 1, 101), 1 - np.linspace(0, 1, 101)], axis=1)


def deterministic_model():
    """State 0 -> 1 and 1 -> 0 regardless of action."""
    k = np.zeros((2, 2, 2))
    k[0, :, 1] = 1.0
    k[1, :, 0] = 1.0
    return tabular_model(k, [[0.5, 0.1], [0.2, 0.3]], 0.5)


def benchmark_inputs(constants, **kw):
    base = dict(n_actions=2, beta=0.2, r_max=constants.r_max, Q_Lip=constants.Q_Lip, L_reg=constants.L_reg,
                V_F=2.0, V_Fmax=2.0, pi0=1.0)
    base.update(kw)
    return SampleComplexityInputs(**base)


class TestSubstreams:
    def test_keys_are_independent_and_reproducible(self):
        a = substream(3, 1, 2).random(5)
        np.testing.assert_array_equal(a, substream(3, 1, 2).random(5))
        assert not np.array_equal(a, substream(3, 2, 1).random(5))
        assert not np.array_equal(a, substream(4, 1, 2).random(5))


class TestBehavior:
    def test_uniform_two_actions(self):
        u = uniform_simplex_behavior(2).sample(0, 10_000, np.random.default_rng(0))
        se = u[:, 0].std() / math.sqrt(len(u))
        assert abs(u[:, 0].mean() - 0.5) <= 3 * se
        # u(0) is uniform on [0, 1]: compare a few quantiles
        np.testing.assert_allclose(np.quantile(u[:, 0], [0.1, 0.5, 0.9]), [0.1, 0.5, 0.9], atol=0.02)

    def test_uniform_weights_are_one(self):
        b = uniform_simplex_behavior(3)
        us = b.sample(0, 100, np.random.default_rng(1))
        assert np.all(b.weights(np.zeros(100, dtype=int), us) == 1.0)
        assert b.floor == 2.0

    def test_uniform_three_actions(self):
        u = uniform_simplex_behavior(3).sample(0, 10_000, np.random.default_rng(2))
        se = u.std(axis=0) / math.sqrt(len(u))
        assert np.all(np.abs(u.mean(axis=0) - 1 / 3) <= 3 * se)

    def test_dirichlet_one_matches_uniform_density(self):
        d = DirichletBehavior(3, 1.0)
        assert d.floor == pytest.approx(uniform_simplex_behavior(3).floor)
        with pytest.raises(ValueError):
            DirichletBehavior(2, 1.5)


class TestGenerateBatch:
    def test_deterministic_kernel(self, reg):
        sim = GenerativeSimulator(deterministic_model(), reg, seed=0)
        batch = generate_batch(sim, [0.5, 0.5], 500, uniform_simplex_behavior(2))
        np.testing.assert_array_equal(batch.next_states, 1 - batch.states)

    def test_point_mass_nu(self, model, reg):
        sim = GenerativeSimulator(model, reg, seed=0)
        batch = generate_batch(sim, [0.5, 0.5], 200, uniform_simplex_behavior(2), nu=[0.0, 1.0])
        assert np.all(batch.states == 1)

    def test_transition_frequency(self, model, reg):
        sim = GenerativeSimulator(model, reg)
        rng = np.random.default_rng(3)
        n = 20_000
        _, ys = sim.draw_batch(np.zeros(n, dtype=int), np.tile([1.0, 0.0], (n, 1)), [0.5, 0.5], rng)
        assert abs(ys.mean() - 0.6) <= 3 * math.sqrt(0.24 / n)

    def test_seeded(self, model, reg):
        sim = GenerativeSimulator(model, reg)
        b1 = generate_batch(sim, [0.5, 0.5], 50, uniform_simplex_behavior(2), rng=substream(9, 1))
        b2 = generate_batch(sim, [0.5, 0.5], 50, uniform_simplex_behavior(2), rng=substream(9, 1))
        for f in ("states", "actions", "rewards", "next_states"):
            np.testing.assert_array_equal(getattr(b1, f), getattr(b2, f))

    def test_rewards_are_regularized(self, model, reg):
        sim = GenerativeSimulator(model, reg)
        b = generate_batch(sim, [0.3, 0.7], 100, uniform_simplex_behavior(2))
        expected = np.einsum("ta,ta->t", model.reward([0.3, 0.7])[b.states], b.actions) - reg.value(b.actions)
        np.testing.assert_allclose(b.rewards, expected, atol=1e-15)


def synthetic_batch(q_true, reg, us_per_state, rng):
    xs = np.repeat(np.arange(len(q_true)), us_per_state)
    us = uniform_simplex_behavior(q_true.shape[1]).sample(0, len(xs), rng)
    r = np.einsum("ta,ta->t", q_true[xs], us) - reg.value(us)
    return SampleBatch(xs, us, r, np.zeros_like(xs), np.ones(len(xs)))


class TestFitQFactors:
    def test_recovers_truth(self, reg):
        rng = np.random.default_rng(4)
        q_true = rng.normal(size=(3, 2))
        batch = synthetic_batch(q_true, reg, 40, rng)
        fit = fit_q_factors(batch, QFactors.zeros(3, 2, reg), 0.0, reg)
        shifts = (fit.factors - q_true).mean(axis=1, keepdims=True)
        np.testing.assert_allclose(fit.factors - shifts, q_true, atol=1e-8)
        np.testing.assert_allclose(fit.factors, q_true, atol=1e-8)
        np.testing.assert_allclose(greedy_policy(fit), greedy_policy(QFactors(q_true, reg)), atol=1e-12)

    def test_three_actions(self):
        reg3 = entropy_regularizer(0.3, 3)
        rng = np.random.default_rng(5)
        q_true = rng.normal(size=(2, 3))
        fit = fit_q_factors(synthetic_batch(q_true, reg3, 30, rng), QFactors.zeros(2, 3, reg3), 0.0, reg3)
        np.testing.assert_allclose(fit.factors, q_true, atol=1e-8)

    def test_symmetric_targets_give_uniform_policy(self, reg):
        m = tabular_model(np.full((2, 2, 2), 0.5), np.zeros((2, 2)), 0.6)
        sim = GenerativeSimulator(m, reg)
        batch = generate_batch(sim, [0.5, 0.5], 400, uniform_simplex_behavior(2))
        fit = fit_q_factors(batch, QFactors.zeros(2, 2, reg), 0.6, reg)
        np.testing.assert_allclose(greedy_policy(fit), 0.5, atol=1e-9)

    def test_vertex_batch_interpolates(self, reg):
        z = np.array([0.3, -0.2])
        batch = SampleBatch(np.zeros(2, dtype=int), np.eye(2), z, np.zeros(2, dtype=int), np.ones(2))
        fit = fit_q_factors(batch, QFactors.zeros(1, 2, reg), 0.0, reg, min_samples=2)
        direct = np.linalg.solve(np.eye(2), z + reg.value(np.eye(2)))
        np.testing.assert_allclose(fit.factors[0], direct, atol=1e-10)
        assert np.abs(fit.evaluate(np.eye(2))[0] - z).max() <= 1e-10

    def test_rank_deficient_raises(self, reg):
        us = np.tile([0.3, 0.7], (10, 1))
        batch = SampleBatch(np.zeros(10, dtype=int), us, np.zeros(10), np.zeros(10, dtype=int), np.ones(10))
        with pytest.raises(FitError) as info:
            fit_q_factors(batch, QFactors.zeros(1, 2, reg), 0.0, reg)
        assert info.value.state == 0

    def test_absent_state_keeps_previous(self, reg):
        prev = QFactors(np.array([[1.0, 2.0], [3.0, 4.0]]), reg)
        batch = synthetic_batch(np.array([[0.0, 0.0]]), reg, 10, np.random.default_rng(0))
        fit = fit_q_factors(batch, prev, 0.0, reg)
        np.testing.assert_array_equal(fit.factors[1], [3.0, 4.0])

    def test_sparse_state_warns(self, reg):
        prev = QFactors(np.array([[1.0, 2.0]]), reg)
        batch = synthetic_batch(np.array([[0.0, 0.0]]), reg, 3, np.random.default_rng(0))
        with pytest.warns(UserWarning):
            fit = fit_q_factors(batch, prev, 0.0, reg, min_samples=6)
        np.testing.assert_array_equal(fit.factors, prev.factors)


class TestRepresentationCompleteness:
    def test_bellman_image_is_in_class(self, model, reg):
        """Noiseless vertex batches reproduce the exact Bellman image with zero residual."""
        rng = np.random.default_rng(6)
        for _ in range(20):
            mu = rng.dirichlet([1, 1])
            prev = QFactors(rng.normal(size=(2, 2)), reg)
            V = prev.values()
            exact_q = model.reward(mu) + model.discount * model.kernel(mu) @ V
            xs = np.repeat([0, 1], 2)
            us = np.tile(np.eye(2), (2, 1))
            # noiseless targets: expected next value folded into the reward, next state unused
            rewards = np.einsum("ta,ta->t", exact_q[xs], us) - reg.value(us)
            batch = SampleBatch(xs, us, rewards, np.zeros(4, dtype=int), np.ones(4))
            fit = fit_q_factors(batch, QFactors.zeros(2, 2, reg), 0.0, reg, min_samples=2)
            assert np.abs(fit.factors - exact_q).max() <= 1e-10
            np.testing.assert_allclose(greedy_policy(fit), greedy_policy(QFactors(exact_q, reg)), atol=1e-12)


class TestFittedQLearning:
    def test_zero_targets(self):
        zero = ZeroRegularizer(2)
        m = tabular_model(np.full((2, 2, 2), 0.5), np.zeros((2, 2)), 1e-9)
        q = fitted_q_learning(GenerativeSimulator(m, zero), [0.5, 0.5], 200, 1)
        np.testing.assert_allclose(q.factors, 0.0, atol=1e-12)

    def test_seed_average_close_to_exact(self, model, reg, solution):
        mu = solution.mean_field
        truth = solve_q_star(model, reg, mu, 1e-13).evaluate(U_GRID)
        sim = GenerativeSimulator(model, reg, seed=21)
        fits = [fitted_q_learning(sim, mu, 1000, 10, key=(s,)).evaluate(U_GRID) for s in range(20)]
        assert np.abs(np.mean(fits, axis=0) - truth).max() <= 0.05

    def test_more_rounds_reduce_error(self, model, reg):
        mu = np.array([0.4, 0.6])
        truth = solve_q_star(model, reg, mu, 1e-13).evaluate(U_GRID)
        sim = GenerativeSimulator(model, reg, seed=2)
        errs = []
        for L in (1, 3, 10):
            e = [np.abs(fitted_q_learning(sim, mu, 5000, L, key=(s,)).evaluate(U_GRID) - truth).max()
                 for s in range(5)]
            errs.append(np.mean(e))
        assert errs[0] > errs[1] >= errs[2] * 0.9

    def test_deterministic(self, model, reg):
        sim = GenerativeSimulator(model, reg, seed=4)
        a = fitted_q_learning(sim, [0.5, 0.5], 300, 3, key=(1, 2))
        b = fitted_q_learning(sim, [0.5, 0.5], 300, 3, key=(1, 2))
        np.testing.assert_array_equal(a.factors, b.factors)


class TestEmpiricalMeanFieldUpdate:
    def test_deterministic_kernel_is_exact(self, reg):
        m = deterministic_model()
        q = QFactors(np.array([[0.1, 0.4], [0.0, 0.0]]), reg)
        mu = np.array([0.3, 0.7])
        for M in (1, 7, 100):
            np.testing.assert_allclose(empirical_mean_field_update(GenerativeSimulator(m, reg), mu, q, M),
                                       mean_field_update(m, mu, q), atol=1e-15)

    def test_large_sample_consistency(self, model, reg):
        q = solve_q_star(model, reg, [0.5, 0.5])
        got = empirical_mean_field_update(GenerativeSimulator(model, reg, 1), [0.5, 0.5], q, 100_000)
        assert np.abs(got - mean_field_update(model, [0.5, 0.5], q)).sum() <= 0.01

    def test_unbiased(self, model, reg):
        q = solve_q_star(model, reg, [0.5, 0.5])
        sim = GenerativeSimulator(model, reg, 0)
        draws = np.array([empirical_mean_field_update(sim, [0.5, 0.5], q, 50, seed=s) for s in range(10_000)])
        se = draws.std(axis=0) / math.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - mean_field_update(model, [0.5, 0.5], q)) <= 3 * se)

    def test_valid_mean_field(self, model, reg):
        q = solve_q_star(model, reg, [0.2, 0.8])
        out = empirical_mean_field_update(GenerativeSimulator(model, reg), [0.2, 0.8], q, 13)
        assert abs(out.sum() - 1) <= 1e-12 and np.all(out >= 0)


class TestLearnMfe:
    def test_zero_outer_steps(self, model, reg):
        sim = GenerativeSimulator(model, reg, 3)
        res = learn_mfe(sim, LearnerConfig(K=0, N=200, L=2, M=50, seed=3), mu0=[0.6, 0.4])
        np.testing.assert_array_equal(res.mean_field, [0.6, 0.4])
        assert res.trace == [] and res.policy is not None

    def test_exact_operators_reproduce_picard(self, model, reg, constants):
        sol = solve_mfe(model, reg, tol=1e-10, constants=constants)
        K = sol.iterations
        res = learn_mfe(GenerativeSimulator(model, reg), LearnerConfig(K=K), exact_operators=True)
        assert len(res.history) == len(sol.history)
        for a, b in zip(res.history, sol.history):
            assert np.array_equal(a, b)

    def test_deterministic(self, model, reg):
        cfg = LearnerConfig(K=3, N=200, L=3, M=100, seed=11)
        a = learn_mfe(GenerativeSimulator(model, reg, 11), cfg, repetition=2)
        b = learn_mfe(GenerativeSimulator(model, reg, 11), cfg, repetition=2)
        np.testing.assert_array_equal(a.mean_field, b.mean_field)
        np.testing.assert_array_equal(a.q_factors.factors, b.q_factors.factors)
        assert [t.l1_step for t in a.trace] == [t.l1_step for t in b.trace]

    def test_error_propagation_bound_holds(self, model, reg, solution):
        cfg = LearnerConfig(K=10, N=1000, L=10, M=1000, seed=5)
        from regmfg.exact import mfe_operator

        for rep in range(3):
            res = learn_mfe(GenerativeSimulator(model, reg, 5), cfg, repetition=rep)
            steps = [np.abs(res.history[k + 1] - mfe_operator(model, reg, res.history[k], 1e-13)).sum()
                     for k in range(cfg.K)]
            gap0 = np.abs(res.history[0] - solution.mean_field).sum()
            bound = error_propagation_bound(steps, 0.8102040816326532, gap0)
            assert np.abs(res.mean_field - solution.mean_field).sum() <= bound + 1e-12

    def test_fit_failure_carries_partial_trace(self, model, reg, monkeypatch):
        import regmfg.learn as learn_mod

        class Degenerate(learn_mod.UniformSimplexBehavior):
            def sample(self, x, size, rng):
                return np.tile([0.5, 0.5], (size, 1))

        calls = {"n": 0}
        real = learn_mod.uniform_simplex_behavior

        def flaky(n):
            calls["n"] += 1
            return Degenerate(n) if calls["n"] > 2 else real(n)

        monkeypatch.setattr(learn_mod, "uniform_simplex_behavior", flaky)
        with pytest.raises(FitError) as info:
            learn_mfe(GenerativeSimulator(model, reg), LearnerConfig(K=5, N=100, L=1, M=10))
        partial = info.value.result
        assert [t.k for t in partial.trace] == [0, 1]
        assert len(partial.history) == 3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LearnerConfig(K=-1)


class TestSampleSizeM2:
    def test_reference_value(self):
        assert sample_size_m2(0.1, 0.05, 2) == 2031
        assert 400 * math.log(160) == pytest.approx(2030.1, abs=0.1)

    def test_unit_limit(self):
        for n in (2, 3, 5):
            assert sample_size_m2(1.0, 1.0, n) == math.ceil(n ** 2 * math.log(2 * n ** 2))

    def test_quadratic_in_states(self):
        r = sample_size_m2(0.01, 0.05, 4) / sample_size_m2(0.01, 0.05, 2)
        assert r == pytest.approx(4 * math.log(32 / 0.05) / math.log(8 / 0.05), rel=1e-4)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            sample_size_m2(0.0, 0.5, 2)


class TestSampleSizeM1:
    def test_high_precision_oracle(self, constants):
        inp = benchmark_inputs(constants)
        with mpmath.workdps(60):
            f = mpmath.mpf
            beta, r_m = f("0.2"), f(constants.r_max)
            q_m = r_m / (1 - beta)
            l_m = (1 + beta) * q_m + r_m
            C = l_m ** 2  # m(U) = 1 and pi0 = 1 for two actions
            gam = 512 * C ** 2
            V = 4
            ups = 8 * mpmath.e ** 2 * 9 * (64 * mpmath.e * q_m * l_m * (1 + beta)) ** V
            lam = mpmath.sqrt(2 / (f("0.5") * (2 / (f(constants.Q_Lip) + f(constants.L_reg))))) / (1 - beta)
            eps, delta, L = f("0.1"), f("0.05"), 10
            m1 = gam * (2 * lam) ** 8 / eps ** 8 * mpmath.log(ups * (2 * lam) ** (2 * V * 2) * L / (delta * eps ** (2 * V * 2)))
        got = sample_size_m1(0.1, 0.05, 10, inp)
        assert inp.Lambda == pytest.approx(float(lam), rel=1e-12)
        assert got.n == int(mpmath.ceil(m1)) or abs(got.n - float(m1)) / float(m1) < 1e-12
        assert got.n > 1000  # far above the practical batch size
        assert got.horizon_ok

    def test_monotonicity(self, constants):
        inp = benchmark_inputs(constants)
        eps_grid = [0.05, 0.1, 0.2, 0.4, 0.8]
        delta_grid = [0.01, 0.05, 0.1, 0.3, 0.9]
        table = np.array([[sample_size_m1(e, d, 10, inp).n for d in delta_grid] for e in eps_grid], dtype=float)
        assert np.all(np.diff(table, axis=0) <= 0)  # non-increasing in eps
        assert np.all(np.diff(table, axis=1) <= 0)  # non-increasing in delta

    def test_doubling_rounds_adds_log_two_term(self, constants):
        inp = benchmark_inputs(constants)
        lead = inp.gamma * (2 * inp.Lambda) ** 8 / 0.1 ** 8
        diff = sample_size_m1(0.1, 0.05, 20, inp).n - sample_size_m1(0.1, 0.05, 10, inp).n
        assert abs(diff - lead * math.log(2)) <= 1 + 1e-9 * lead

    def test_huge_values_stay_exact_integers(self, constants):
        inp = benchmark_inputs(constants, V_F=50, V_Fmax=50)
        got = sample_size_m1(1e-45, 1e-3, 10, inp)
        assert isinstance(got.n, int) and got.n > 10 ** 300
        assert got.value == math.inf

    def test_degenerate_log(self):
        inp = SampleComplexityInputs(2, 0.2, 1e-3, 1e-3, 1e-3, 0.0, 0.0, 1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = sample_size_m1(0.99, 0.99, 1, inp)
        assert res.n >= 1

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.01, 0.9), st.floats(0.01, 0.9))
    def test_positive(self, eps, delta):
        inp = SampleComplexityInputs(2, 0.2, 0.3, 0.2, 1.0, 2.0, 2.0, 1.0)
        assert sample_size_m1(eps, delta, 5, inp).n >= 1
