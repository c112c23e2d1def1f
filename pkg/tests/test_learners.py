"""Step functions, projection, traces and trajectory checks."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adatd import learners as L
from adatd.errors import AssumptionError, CertificateError
from adatd.mdp import FeatureMap, Mdp, Transition, sample_chain, stationary_distribution
from adatd.oracle import fixed_point_td0, fixed_point_td_lambda, radius_lower_bound

from conftest import benchmark_problem


def rng_transition(rng, n):
    return Transition(int(rng.integers(n)), int(rng.integers(n)), float(rng.uniform(-1, 1)))


class TestHyperparams:
    @pytest.mark.parametrize("kw", [dict(eta=0.0), dict(eta=1.0, delta=0.0), dict(eta=1.0, beta=1.0),
                                    dict(eta=1.0, lam=1.5), dict(eta=1.0, radius=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            L.Hyperparams(**kw)

    def test_radius_check_warns(self):
        hp = L.Hyperparams(eta=0.1, radius=1.0)
        with pytest.warns(UserWarning, match="below"):
            hp.check_radius(2.0)

    def test_radius_check_strict(self):
        with pytest.raises(AssumptionError):
            L.Hyperparams(eta=0.1, radius=1.0).check_radius(2.0, strict=True)

    def test_radius_check_silent_when_admissible(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            L.Hyperparams(eta=0.1, radius=3.0).check_radius(2.0)


class TestPrimitives:
    def test_td_error_at_zero(self, small_features):
        t = Transition(1, 3, 0.42)
        assert L.td_error(np.zeros(3), small_features, t, 0.9) == 0.42

    def test_td_error_recompute(self, small_features):
        rng = np.random.default_rng(0)
        phi = small_features.phi
        for _ in range(200):
            theta, t = rng.normal(size=3), rng_transition(rng, 5)
            gamma = rng.uniform(0, 0.99)
            naive = t.r + gamma * sum(phi[t.s_next, j] * theta[j] for j in range(3)) \
                - sum(phi[t.s, j] * theta[j] for j in range(3))
            assert L.td_error(theta, small_features, t, gamma) == pytest.approx(naive, abs=1e-14)

    def test_aggregation_semi_gradient_is_sparse(self, small_features):
        theta = np.array([0.3, -1.0, 2.0])
        g = L.semi_gradient(theta, small_features, Transition(2, 0, 1.0), 0.9)
        assert np.count_nonzero(g) == 1 and g[1] != 0

    def test_zero_error_gives_zero_gradient(self, small_features):
        theta = np.array([1.0, 1.0, 1.0])
        # r + 0.5 * 1 - 1 = 0
        g = L.semi_gradient(theta, small_features, Transition(0, 4, 0.5), 0.5)
        np.testing.assert_array_equal(g, 0.0)

    def test_gradient_bound_inside_ball(self, small_features):
        rng = np.random.default_rng(1)
        R, B = 3.0, 1.0
        for _ in range(10_000):
            theta = L.project_ball(rng.normal(size=3) * 4, R)
            g = L.semi_gradient(theta, small_features, rng_transition(rng, 5), rng.uniform(0, 1))
            assert np.linalg.norm(g) <= 2 * R + B + 1e-12

    def test_projection_scales_to_sphere(self):
        y = np.array([6.0, 8.0])
        np.testing.assert_allclose(L.project_ball(y, 2.0), y / 5, atol=1e-15)

    def test_projection_inside_is_identity(self):
        y = np.array([0.1, -0.2])
        assert L.project_ball(y, 1.0) is y

    def test_projection_infinite_radius(self):
        y = np.full(3, 1e200)
        assert L.project_ball(y, math.inf) is y

    def test_projection_non_expansive(self):
        rng = np.random.default_rng(2)
        for _ in range(10_000):
            a, b = rng.normal(size=(2, 4)) * 3
            pa, pb = L.project_ball(a, 1.5), L.project_ball(b, 1.5)
            assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12

    def test_trace_lambda_zero(self, small_features):
        z = np.array([5.0, 5.0, 5.0])
        np.testing.assert_array_equal(L.trace_update(z, small_features, 2, 0.9, 0.0), small_features.phi[2])

    def test_trace_geometric_sum(self, small_features):
        z, gl = np.zeros(3), 0.9 * 0.5
        for _ in range(15):
            z = L.trace_update(z, small_features, 0, 0.9, 0.5)
        np.testing.assert_allclose(z, small_features.phi[0] * (1 - gl**15) / (1 - gl), rtol=1e-14)

    def test_trace_norm_along_trajectory(self, small_mdp, small_features):
        gl = 0.9 * 0.8
        z = np.zeros(3)
        for k, t in enumerate(sample_chain(small_mdp, 0, 2000, seed=0), start=1):
            z = L.trace_update(z, small_features, t.s, 0.9, 0.8)
            assert np.linalg.norm(z) <= (1 - gl**k) / (1 - gl) + 1e-12

    def test_lambda_gradient_reductions(self, small_features):
        theta, t = np.array([0.5, -0.5, 2.0]), Transition(3, 1, 0.7)
        z = small_features.phi[t.s].copy()
        np.testing.assert_array_equal(L.lambda_semi_gradient(theta, small_features, t, z, 0.9),
                                      L.semi_gradient(theta, small_features, t, 0.9))
        np.testing.assert_array_equal(L.lambda_semi_gradient(theta, small_features, t, np.zeros(3), 0.9), 0.0)

    def test_lambda_gradient_recompute(self, small_features):
        rng = np.random.default_rng(3)
        for _ in range(100):
            theta, z, t = rng.normal(size=3), rng.normal(size=3), rng_transition(rng, 5)
            d = t.r + 0.9 * small_features.phi[t.s_next] @ theta - small_features.phi[t.s] @ theta
            np.testing.assert_allclose(L.lambda_semi_gradient(theta, small_features, t, z, 0.9), d * z, atol=1e-14)


def frozen_mdp():
    # zero reward and theta = 0: every TD error vanishes
    P = np.full((3, 3), 1 / 3)
    return Mdp(P, np.zeros((3, 3)), 0.9)


class TestProjectedTd:
    def test_zero_gradient_freezes(self, tabular5):
        state = L.AdaTdState.initial(5)
        out = L.projected_td0_step(state, L.Hyperparams(eta=0.3, radius=1.0), tabular5, Transition(0, 1, 0.0), 0.9)
        np.testing.assert_array_equal(out.theta, state.theta)

    def test_infinite_radius_is_plain_td(self, small_mdp, small_features):
        ts = list(sample_chain(small_mdp, 0, 300, seed=1))
        hp = L.Hyperparams(eta=0.2)
        a = L.run_learner(L.projected_td0_step, hp, small_features, ts, 0.9)
        b = L.run_learner(L.td0_step, hp, small_features, ts, 0.9)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.theta, y.theta)

    def test_plain_td_formula(self, small_features):
        state = L.AdaTdState.initial(3, np.array([1.0, 0.0, -1.0]))
        t = Transition(4, 0, 0.2)
        out = L.td0_step(state, L.Hyperparams(eta=0.1), small_features, t, 0.9)
        d = 0.2 + 0.9 * 1.0 - (-1.0)
        np.testing.assert_allclose(out.theta, state.theta + 0.1 * d * small_features.phi[4])

    def test_converges_on_small_mdp(self, small_mdp, small_features):
        pi = stationary_distribution(small_mdp)
        theta_star = fixed_point_td0(small_mdp, small_features, pi).theta_star
        hp = L.Hyperparams(eta=0.1, radius=100.0)
        init, final = [], []
        for seed in range(10):
            ts = sample_chain(small_mdp, seed % 5, 10_000, seed=seed)
            trace = L.run_learner(L.projected_td0_step, hp, small_features, ts, 0.9)
            init.append(np.sum((trace[0].theta - theta_star) ** 2))
            final.append(np.sum((trace[-1].theta - theta_star) ** 2))
        assert np.mean(final) <= np.mean(init) / 10

    def test_td_lambda_zero_equals_td0(self, small_mdp, small_features):
        ts = list(sample_chain(small_mdp, 2, 500, seed=3))
        hp = L.Hyperparams(eta=0.2, radius=5.0)
        a = L.run_learner(L.projected_td_lambda_step, hp, small_features, ts, 0.9)
        b = L.run_learner(L.projected_td0_step, hp, small_features, ts, 0.9)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.theta, y.theta)

    def test_td_lambda_frozen(self):
        mdp = frozen_mdp()
        ts = sample_chain(mdp, 0, 50, seed=0)
        trace = L.run_learner(L.projected_td_lambda_step, L.Hyperparams(eta=0.5, lam=0.7, radius=2.0),
                              FeatureMap(np.eye(3)), ts, 0.9)
        assert all(np.all(s.theta == 0) for s in trace)

    def test_td_lambda_converges_on_benchmark(self):
        mdp, feats = benchmark_problem()
        pi = stationary_distribution(mdp)
        theta_star = fixed_point_td_lambda(mdp, feats, pi, 0.5).theta_star
        hp = L.Hyperparams(eta=0.45, lam=0.5, radius=radius_lower_bound(1.0, 0.05, 0.9, 0.5))
        init, final = [], []
        for seed in range(10):
            trace = L.run_learner(L.projected_td_lambda_step, hp, feats, sample_chain(mdp, 0, 10_000, seed), 0.9)
            init.append(np.sum(theta_star**2))
            final.append(np.sum((trace[-1].theta - theta_star) ** 2))
        assert np.mean(final) <= np.mean(init) / 10


class TestAdaTd:
    def test_first_step(self, small_features):
        hp = L.Hyperparams(eta=0.5, delta=1.0, beta=0.0, radius=0.8)
        t = Transition(0, 2, 0.9)
        state = L.AdaTdState.initial(3)
        out = L.ada_td0_step(state, hp, small_features, t, 0.9)
        g = 0.9 * small_features.phi[0]
        np.testing.assert_allclose(out.theta, L.project_ball(0.5 * g / math.sqrt(g @ g + 1.0), 0.8), atol=1e-16)
        assert out.v == pytest.approx(g @ g)
        assert out.k == 2

    def test_zero_gradient_freezes_everything(self):
        mdp = frozen_mdp()
        trace = L.run_learner(L.ada_td0_step, L.Hyperparams(eta=0.5, beta=0.5, radius=2.0), FeatureMap(np.eye(3)),
                              sample_chain(mdp, 0, 50, seed=0), 0.9)
        assert all(np.all(s.theta == 0) and s.v == 0 for s in trace)

    def test_effective_step_lower_bound(self, small_mdp, small_features):
        R = 4.0
        hp = L.Hyperparams(eta=0.5, delta=1.0, beta=0.5, radius=R)
        G = 2 * R + small_mdp.reward_bound
        trace = L.run_learner(L.ada_td0_step, hp, small_features, sample_chain(small_mdp, 0, 2000, seed=4), 0.9)
        for s in trace[1:]:
            k = s.k - 1
            assert s.v <= k * G**2
            assert hp.eta / math.sqrt(s.v + hp.delta) >= hp.eta / math.sqrt(k * G**2 + hp.delta)

    def test_momentum_matches_expansion(self, small_mdp, small_features):
        hp = L.Hyperparams(eta=0.5, delta=1.0, beta=0.7, radius=4.0)
        trace = L.run_learner(L.ada_td0_step, hp, small_features, sample_chain(small_mdp, 0, 60, seed=5), 0.9)
        gs = [s.g for s in trace[1:]]
        np.testing.assert_allclose(trace[-1].m, L.momentum_expansion(gs, 0.7), atol=1e-14)

    def test_lambda_zero_equals_adatd0(self, small_mdp, small_features):
        ts = list(sample_chain(small_mdp, 0, 500, seed=6))
        hp = L.Hyperparams(eta=0.5, delta=1.0, beta=0.5, radius=3.0)
        a = L.run_learner(L.ada_td_lambda_step, hp, small_features, ts, 0.9)
        b = L.run_learner(L.ada_td0_step, hp, small_features, ts, 0.9)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.theta, y.theta)

    def test_lambda_frozen(self):
        mdp = frozen_mdp()
        trace = L.run_learner(L.ada_td_lambda_step, L.Hyperparams(eta=0.5, lam=0.5, radius=2.0),
                              FeatureMap(np.eye(3)), sample_chain(mdp, 0, 50, seed=0), 0.9)
        assert all(np.all(s.theta == 0) for s in trace)

    def test_lambda_run_approaches_fixed_point(self):
        mdp, feats = benchmark_problem()
        pi = stationary_distribution(mdp)
        theta_star = fixed_point_td_lambda(mdp, feats, pi, 0.5).theta_star
        hp = L.Hyperparams(eta=0.5, delta=1.0, beta=0.5, lam=0.5, radius=radius_lower_bound(1.0, 0.05, 0.9, 0.5))
        curves = []
        for seed in range(10):
            trace = L.run_learner(L.ada_td_lambda_step, hp, feats, sample_chain(mdp, 0, 5000, seed), 0.9)
            d = np.array([np.sum((s.theta - theta_star) ** 2) for s in trace[::500]])
            curves.append(np.minimum.accumulate(d))
        mean = np.mean(curves, axis=0)
        assert np.all(np.diff(mean) <= 0) and mean[-1] < 0.5 * mean[0]


class TestEmaReformulation:
    def test_hundred_steps(self, small_mdp, small_features):
        hp = L.Hyperparams(eta=0.5, delta=1.0, beta=0.5, radius=4.0)
        ts = list(sample_chain(small_mdp, 0, 100, seed=7))
        trace = L.run_learner(L.ada_td0_step, hp, small_features, ts, 0.9)
        rep = L.ema_reformulation_check(trace, hp, small_features, ts, 0.9)
        assert rep.passed and rep.steps == 100

    def test_first_step_both_sides(self, small_features):
        hp = L.Hyperparams(eta=0.5, delta=2.0, beta=0.3, radius=10.0)
        ts = [Transition(1, 2, 0.6)]
        trace = L.run_learner(L.ada_td0_step, hp, small_features, ts, 0.9)
        m = (1 - 0.3) * trace[1].g
        np.testing.assert_allclose(trace[1].theta, 0.5 * m / math.sqrt(trace[1].v + 2.0), atol=1e-16)
        assert L.ema_reformulation_check(trace, hp, small_features, ts, 0.9).max_deviation <= 1e-16

    def test_detects_mismatch(self, small_mdp, small_features):
        hp = L.Hyperparams(eta=0.5, delta=1.0, beta=0.5, radius=4.0)
        ts = list(sample_chain(small_mdp, 0, 50, seed=8))
        trace = L.run_learner(L.ada_td0_step, L.Hyperparams(eta=0.4, delta=1.0, beta=0.5, radius=4.0),
                              small_features, ts, 0.9)
        assert not L.ema_reformulation_check(trace, hp, small_features, ts, 0.9).passed


class TestTrajectoryChecks:
    def test_boundedness(self, small_mdp, small_features):
        pi = stationary_distribution(small_mdp)
        fp = fixed_point_td0(small_mdp, small_features, pi)
        R = 2 * np.linalg.norm(fp.theta_star)
        hp = L.Hyperparams(eta=0.5, delta=1.0, beta=0.5, radius=R)
        trace = L.run_learner(L.ada_td0_step, hp, small_features, sample_chain(small_mdp, 0, 3000, 9), 0.9)
        rep = L.boundedness_check(trace, fp.theta_star, R, small_mdp.reward_bound)
        assert rep.passed and rep.G == 2 * R + small_mdp.reward_bound

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=200), st.floats(0.01, 10.0))
    def test_log_sum_inequality(self, fractions, delta):
        G = 3.0
        lhs, rhs = L.log_sum_check([f * G**2 for f in fractions], delta, G)
        assert lhs <= rhs + 1e-9

    def test_log_sum_formula(self):
        lhs, rhs = L.log_sum_check([1.0, 1.0], 1.0, 1.0)
        assert lhs == pytest.approx(1 / 2 + 1 / 3)
        assert rhs == pytest.approx(math.log(3.0))

    def test_projection_check(self):
        state = L.AdaTdState.initial(2, np.array([3.0, 4.0]))
        L.check_projection(state, 5.0)
        with pytest.raises(CertificateError, match="projection invariant"):
            L.check_projection(state, 4.0)


class TestNuEstimate:
    def test_linear(self):
        fit = L.nu_estimate(np.arange(1, 1001, dtype=float))
        assert fit.c == pytest.approx(1.0, rel=1e-10) and fit.nu == pytest.approx(1.0, rel=1e-10)

    def test_square_root(self):
        k = np.arange(1, 1001, dtype=float)
        fit = L.nu_estimate(3 * np.sqrt(k))
        assert fit.c == pytest.approx(3.0, rel=1e-10) and fit.nu == pytest.approx(0.5, rel=1e-10)

    def test_zero_trace(self):
        with pytest.raises(ValueError, match="no gradient"):
            L.nu_estimate(np.zeros(500))

    def test_short_trace(self):
        with pytest.raises(ValueError):
            L.nu_estimate(np.ones(10))

    def test_adatd_growth_is_sublinear(self):
        mdp, feats = benchmark_problem()
        R = radius_lower_bound(1.0, 0.05, 0.9)
        hp = L.Hyperparams(eta=0.5, delta=1.0, beta=0.5, radius=R)
        trace = L.run_learner(L.ada_td0_step, hp, feats, sample_chain(mdp, 0, 20_000, seed=0), 0.9)
        assert L.nu_estimate([s.v for s in trace[1:]]).nu <= 1.05
