import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from implicit_policy import tabular as tb


def one_state(R, gamma):
    R = np.atleast_2d(np.asarray(R, dtype=float))
    nA = R.shape[1]
    return tb.TabularMdp(np.ones((1, nA, 1)), R, gamma, np.ones(1))


def two_state_to_row(row, gamma=0.5):
    """State 0 always moves to state 1, whose Q row is ``row``."""
    nA = len(row)
    P = np.zeros((2, nA, 2))
    P[:, :, 1] = 1.0
    return tb.TabularMdp(P, np.zeros((2, nA)), gamma, np.array([1.0, 0.0]))


class TestValidation:
    def test_rejects_bad_transition_rows(self):
        P = np.full((2, 2, 2), 0.5)
        P[0, 0] = [0.7, 0.4]
        with pytest.raises(ValueError):
            tb.TabularMdp(P, np.zeros((2, 2)), 0.9, np.array([0.5, 0.5]))

    def test_rejects_gamma_one(self):
        with pytest.raises(ValueError):
            one_state([0.0, 1.0], 1.0)

    def test_rejects_bad_policy(self):
        mdp = one_state([0.0, 1.0], 0.5)
        with pytest.raises(ValueError):
            tb.policy_eval_exact(mdp, np.array([[0.6, 0.6]]))

    def test_beta_must_be_positive(self):
        mdp = one_state([0.0, 1.0], 0.5)
        with pytest.raises(ValueError):
            tb.boltzmann_op(np.zeros((1, 2)), mdp, 0.0)
        with pytest.raises(ValueError):
            tb.mellowmax_op(np.zeros((1, 2)), mdp, -1.0)


class TestOperators:
    def test_bellman_zero_q_gives_reward(self):
        mdp = one_state([0.0, 1.0], 0.5)
        np.testing.assert_array_equal(tb.bellman_opt(np.zeros((1, 2)), mdp), [[0.0, 1.0]])

    def test_boltzmann_row_value(self):
        # softmax-weighted mean of (0, 1) at beta 1 is e / (1 + e)
        mdp = two_state_to_row([0.0, 1.0], gamma=0.5)
        Q = np.array([[0.0, 0.0], [0.0, 1.0]])
        expected = 0.5 * math.e / (1.0 + math.e)
        np.testing.assert_allclose(tb.boltzmann_op(Q, mdp, 1.0)[0], expected, rtol=1e-14)
        assert abs(math.e / (1 + math.e) - 0.7311) < 1e-4

    def test_mellowmax_row_value(self):
        mdp = two_state_to_row([0.0, 1.0], gamma=0.5)
        Q = np.array([[0.0, 0.0], [0.0, 1.0]])
        expected = 0.5 * math.log((1.0 + math.e) / 2.0)
        np.testing.assert_allclose(tb.mellowmax_op(Q, mdp, 1.0)[0], expected, rtol=1e-14)
        assert abs(math.log((1 + math.e) / 2) - 0.6201) < 1e-4

    def test_chain_on_single_row(self):
        row = np.array([[0.0, 1.0]])
        assert tb.greedy_value(row)[0] == 1.0
        assert tb.greedy_value(row)[0] >= tb.boltzmann_value(row, 1.0)[0] >= tb.mellowmax_value(row, 1.0)[0]

    def test_boltzmann_low_temperature_limit(self):
        rng = np.random.default_rng(3)
        mdp = tb.random_mdp(rng, 4, 3, 0.9)
        Q = rng.normal(size=(4, 3))
        np.testing.assert_allclose(tb.boltzmann_op(Q, mdp, 1e-6), tb.bellman_opt(Q, mdp), atol=1e-4)

    def test_mellowmax_high_temperature_limit(self):
        assert abs(tb.mellowmax_value(np.array([[0.0, 1.0]]), 1e6)[0] - 0.5) < 1e-5

    def test_boltzmann_high_temperature_is_mean(self):
        assert abs(tb.boltzmann_value(np.array([[0.0, 1.0]]), 1e6)[0] - 0.5) < 1e-5

    def test_constant_q_all_equal(self):
        rng = np.random.default_rng(0)
        mdp = tb.random_mdp(rng, 3, 2, 0.8)
        Q = np.full((3, 2), 1.7)
        rep = tb.operator_inequality_check(Q, mdp, 1.0)
        assert rep.holds and rep.equality_matches_constancy
        assert len(rep.equality_sites) == 6

    def test_numerically_stable_for_large_q(self):
        mdp = two_state_to_row([0.0, 1.0])
        Q = np.array([[0.0, 0.0], [1000.0, 2000.0]])
        assert np.all(np.isfinite(tb.boltzmann_op(Q, mdp, 0.1)))
        assert np.all(np.isfinite(tb.mellowmax_op(Q, mdp, 0.1)))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), beta=st.sampled_from([0.1, 1.0, 10.0]))
    def test_interpolation_property(self, seed, beta):
        rng = np.random.default_rng(seed)
        mdp = tb.random_mdp(rng, int(rng.integers(2, 5)), int(rng.integers(2, 4)), 0.9)
        Q = rng.normal(scale=3.0, size=(mdp.nS, mdp.nA))
        rep = tb.operator_inequality_check(Q, mdp, beta)
        assert rep.holds
        assert rep.max_violation <= 1e-9

    def test_value_iteration_contraction_envelope(self):
        rng = np.random.default_rng(1)
        mdp = tb.random_mdp(rng, 5, 3, 0.8)
        Q = [np.zeros((5, 3))]
        for _ in range(30):
            Q.append(tb.bellman_opt(Q[-1], mdp))
        d0 = np.max(np.abs(Q[1] - Q[0]))
        for k in range(1, 30):
            assert np.max(np.abs(Q[k + 1] - Q[k])) <= mdp.gamma**k * d0 + 1e-12


class TestEvaluation:
    def test_zero_reward(self):
        rng = np.random.default_rng(0)
        mdp = tb.random_mdp(rng, 3, 2, 0.9)
        mdp = tb.TabularMdp(mdp.P, np.zeros((3, 2)), 0.9, mdp.p1)
        Q, J = tb.policy_eval_exact(mdp, np.full((3, 2), 0.5))
        assert np.all(Q == 0) and J == 0

    def test_self_loop_geometric(self):
        mdp = one_state([1.0], 0.9)
        Q, J = tb.policy_eval_exact(mdp, np.ones((1, 1)))
        np.testing.assert_allclose(Q, [[10.0]], rtol=1e-12)
        assert abs(J - 10.0) < 1e-12

    def test_bellman_residual(self):
        rng = np.random.default_rng(2)
        mdp = tb.random_mdp(rng, 6, 3, 0.95)
        pi = tb.random_policy(rng, 6, 3)
        Q, _ = tb.policy_eval_exact(mdp, pi)
        backup = mdp.R + mdp.gamma * mdp.P @ (pi * Q).sum(axis=1)
        assert np.max(np.abs(backup - Q)) <= 1e-10

    def test_matches_iterative_evaluation(self):
        rng = np.random.default_rng(4)
        mdp = tb.random_mdp(rng, 4, 2, 0.7)
        pi = tb.random_policy(rng, 4, 2)
        Q = np.zeros((4, 2))
        for _ in range(400):
            Q = mdp.R + mdp.gamma * mdp.P @ (pi * Q).sum(axis=1)
        np.testing.assert_allclose(tb.policy_eval_exact(mdp, pi)[0], Q, atol=1e-12)

    def test_maxent_beta_zero_is_plain_return(self):
        rng = np.random.default_rng(5)
        mdp = tb.random_mdp(rng, 3, 3, 0.9)
        pi = tb.random_policy(rng, 3, 3)
        assert abs(tb.maxent_eval_exact(mdp, pi, 0.0) - tb.policy_eval_exact(mdp, pi)[1]) < 1e-12

    def test_maxent_uniform_single_state(self):
        mdp = one_state([0.0, 0.0], 0.9)
        beta = 0.3
        np.testing.assert_allclose(tb.maxent_eval_exact(mdp, np.full((1, 2), 0.5), beta), 10 * beta * math.log(2), rtol=1e-12)

    def test_maxent_deterministic_policy(self):
        rng = np.random.default_rng(6)
        mdp = tb.random_mdp(rng, 3, 2, 0.9)
        pi = np.eye(2)[[0, 1, 1]]
        assert abs(tb.maxent_eval_exact(mdp, pi, 5.0) - tb.policy_eval_exact(mdp, pi)[1]) < 1e-12

    def test_surrogate_same_policy_equals_maxent(self):
        rng = np.random.default_rng(7)
        mdp = tb.random_mdp(rng, 5, 3, 0.9)
        pi = tb.random_policy(rng, 5, 3)
        np.testing.assert_allclose(tb.surrogate_eval(mdp, pi, pi, 0.7), tb.maxent_eval_exact(mdp, pi, 0.7), rtol=1e-12)

    def test_surrogate_beta_zero(self):
        rng = np.random.default_rng(8)
        mdp = tb.random_mdp(rng, 5, 3, 0.9)
        pi, old = tb.random_policy(rng, 5, 3), tb.random_policy(rng, 5, 3)
        assert abs(tb.surrogate_eval(mdp, pi, old, 0.0) - tb.policy_eval_exact(mdp, pi)[1]) < 1e-12

    def test_surrogate_matches_truncated_rollout(self):
        rng = np.random.default_rng(9)
        mdp = tb.random_mdp(rng, 5, 3, 0.9)
        pi, old = tb.random_policy(rng, 5, 3), tb.random_policy(rng, 5, 3)
        # 0.9^200 * max|r + beta H| / (1 - 0.9) is far below 1e-6
        assert abs(tb.surrogate_eval(mdp, pi, old, 0.5) - tb.truncated_rollout_eval(mdp, pi, old, 0.5, 200)) <= 1e-6

    def test_entropy_zero_log_zero(self):
        np.testing.assert_array_equal(tb.policy_entropy(np.array([[1.0, 0.0]])), [0.0])


class TestLowerBound:
    def test_identical_policies(self):
        rng = np.random.default_rng(10)
        mdp = tb.random_mdp(rng, 4, 3, 0.9)
        pi = tb.random_policy(rng, 4, 3)
        rep = tb.lower_bound_check(mdp, pi, pi, 0.5, 0.01)
        assert rep.applicable and rep.holds
        np.testing.assert_allclose(rep.lhs, tb.surrogate_eval(mdp, pi, pi, 0.5), rtol=1e-12)
        np.testing.assert_allclose(rep.slack, rep.penalty, rtol=1e-9)

    def test_deterministic_policy_zero_penalty(self):
        rng = np.random.default_rng(11)
        mdp = tb.random_mdp(rng, 3, 2, 0.9)
        pi = np.eye(2)[[0, 1, 0]]
        rep = tb.lower_bound_check(mdp, pi, pi, 1.0, 0.01)
        assert rep.penalty == 0.0 and rep.holds
        assert abs(rep.lhs - tb.policy_eval_exact(mdp, pi)[1]) < 1e-12

    def test_inapplicable_when_kl_too_large(self):
        mdp = one_state([0.0, 1.0], 0.5)
        rep = tb.lower_bound_check(mdp, np.array([[0.99, 0.01]]), np.array([[0.01, 0.99]]), 1.0, 0.01)
        assert not rep.applicable and not rep.holds

    def test_perturbation_respects_radius(self):
        rng = np.random.default_rng(12)
        old = tb.random_policy(rng, 6, 4)
        for _ in range(20):
            pi = tb.perturb_within_kl(rng, old, 0.01)
            assert tb.kl_per_state(pi, old).max() <= 0.01

    def test_fuzz(self):
        rep = tb.verify_lower_bound(instances=40, seed=5)
        assert rep["passed"] and rep["held"] == 40


class TestFixedPoints:
    def test_single_state_self_consistent(self):
        mdp = one_state([0.0, 1.0, 0.5], 0.5)
        res = tb.boltzmann_stationary(mdp, 1.0)
        assert res.converged and res.residual <= 1e-8
        # one state: Q = R + gamma V, so softmax(Q / beta) = softmax(R / beta)
        np.testing.assert_allclose(res.pi[0], np.exp(mdp.R[0]) / np.exp(mdp.R[0]).sum(), atol=1e-9)

    def test_high_temperature_uniform(self):
        rng = np.random.default_rng(13)
        mdp = tb.random_mdp(rng, 3, 3, 0.8)
        res = tb.boltzmann_stationary(mdp, 1e6)
        assert res.converged and res.residual <= 1e-8
        np.testing.assert_allclose(res.pi, 1 / 3, atol=1e-5)
        np.testing.assert_allclose(res.Q, tb.policy_eval_exact(mdp, np.full((3, 3), 1 / 3))[0], atol=1e-4)

    def test_both_conditions_hold(self):
        rng = np.random.default_rng(14)
        mdp = tb.random_mdp(rng, 4, 3, 0.8)
        res = tb.boltzmann_stationary(mdp, 1.0)
        assert res.converged
        assert np.max(np.abs(tb.boltzmann_op(res.Q, mdp, 1.0) - res.Q)) <= 1e-8
        soft = np.exp(res.Q - res.Q.max(axis=1, keepdims=True))
        assert np.max(np.abs(soft / soft.sum(axis=1, keepdims=True) - res.pi)) <= 1e-8

    def test_non_convergence_is_reported(self):
        rng = np.random.default_rng(15)
        mdp = tb.random_mdp(rng, 4, 3, 0.9)
        res = tb.boltzmann_stationary(mdp, 1.0, max_iters=2)
        assert not res.converged and res.iterations == 2

    def test_mellowmax_zero_reward(self):
        rng = np.random.default_rng(16)
        mdp = tb.random_mdp(rng, 3, 2, 0.9)
        mdp = tb.TabularMdp(mdp.P, np.zeros((3, 2)), 0.9, mdp.p1)
        np.testing.assert_allclose(tb.mellowmax_fixed_point(mdp, 1.0), 0.0, atol=1e-12)

    def test_mellowmax_contraction(self):
        rng = np.random.default_rng(17)
        mdp = tb.random_mdp(rng, 4, 3, 0.85)
        hist = []
        tb.mellowmax_fixed_point(mdp, 0.5, history=hist)
        for a, b in zip(hist, hist[1:]):
            if a > 1e-10:
                assert b <= mdp.gamma * a * (1 + 1e-6) + 1e-14

    def test_mellowmax_low_temperature_limit(self):
        rng = np.random.default_rng(18)
        mdp = tb.random_mdp(rng, 4, 3, 0.8)
        np.testing.assert_allclose(tb.mellowmax_fixed_point(mdp, 1e-4), tb.value_iteration(mdp), atol=1e-3)

    def test_mellowmax_budget_error(self):
        rng = np.random.default_rng(19)
        mdp = tb.random_mdp(rng, 4, 3, 0.99)
        with pytest.raises(RuntimeError):
            tb.mellowmax_fixed_point(mdp, 1.0, max_iters=3)


class TestSuites:
    def test_operator_suite_reports(self):
        rep = tb.verify_operators(instances=100, seed=1)
        assert rep["passed"] and rep["instances"] == 100 and rep["equality_sites"] > 0

    def test_fixed_point_suite_reports(self):
        rep = tb.verify_fixed_points(instances=5, seed=2)
        assert rep["passed"]
        assert rep["converged"] + len(rep["non_converged"]) == 5
