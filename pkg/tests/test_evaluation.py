import math

import numpy as np
import pytest
from scipy import stats

from pasa.envs import GarnetSpec, TabularEnv, sample_garnet
from pasa.errors import InvalidArgument
from pasa.evaluation import (FixedPolicy, bellman_operator, cycle_samples, cycle_statistics,
                             determinism_gap_policy, determinism_gap_transitions,
                             exact_c1_moments, exact_mean_cyclic_states, induced_chain,
                             l_bound, mse_bound, mse_weights, path_length_pmf, score_l,
                             score_l_tilde, score_mse, score_report, solve_q_linear,
                             stationary_distribution, subset_metrics, true_q)
from strategies import random_mdp


def dense_q(P, R, pi, gamma):
    """Independent oracle: dense numpy solve of Q = R + gamma P Pi Q."""
    S, A = R.shape
    Pi = np.zeros((S, S * A))
    for s in range(S):
        Pi[s, s * A:(s + 1) * A] = pi[s]
    M = P.reshape(S * A, S) @ Pi
    return np.linalg.solve(np.eye(S * A) - gamma * M, R.ravel()).reshape(S, A)


class TestTrueQ:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("gamma", [0.5, 0.98])
    def test_three_way_agreement(self, seed, gamma):
        rng = np.random.default_rng(seed)
        P, R, pi = random_mdp(rng, int(rng.integers(2, 60)), int(rng.integers(1, 5)))
        ref = dense_q(P, R, pi, gamma)
        assert np.abs(true_q(P, R, pi, gamma) - ref).max() < 1e-8
        assert np.abs(solve_q_linear(P, R, pi, gamma) - ref).max() < 1e-10

    def test_one_state(self):
        P = np.ones((1, 1, 1))
        assert true_q(P, np.ones((1, 1)), np.ones((1, 1)), 0.5)[0, 0] == pytest.approx(2.0)

    def test_two_cycle(self):
        # 0 -> 1 -> 0, reward 1 leaving state 0 only: Q0 = 1/(1-g^2), Q1 = g/(1-g^2)
        P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
        q = true_q(P, np.array([[1.0], [0.0]]), np.ones((2, 1)), 0.5)
        np.testing.assert_allclose(q.ravel(), [4 / 3, 2 / 3], atol=1e-9)

    def test_zero_rewards(self):
        rng = np.random.default_rng(0)
        P, _, pi = random_mdp(rng, 10, 3)
        assert (true_q(P, np.zeros((10, 3)), pi, 0.9) == 0).all()

    def test_fixed_point(self):
        rng = np.random.default_rng(1)
        P, R, pi = random_mdp(rng, 20, 2)
        q = solve_q_linear(P, R, pi, 0.9)
        np.testing.assert_allclose(bellman_operator(q, P, R, pi, 0.9), q, atol=1e-10)

    def test_env_input(self):
        env = sample_garnet(GarnetSpec(S=30, zeta=5, delta=0.1), np.random.default_rng(0))
        pol = FixedPolicy.sample(30, 2, 0.1, np.random.default_rng(1))
        ref = dense_q(env.dense_transitions(), env.reward, pol.pi, 0.9)
        assert np.abs(true_q(env, env.reward, pol.pi, 0.9) - ref).max() < 1e-8

    @pytest.mark.parametrize("bad", [
        dict(gamma=1.0), dict(pi=np.array([[0.5, 0.6]])), dict(R=np.zeros((2, 2)))])
    def test_rejects(self, bad):
        P = np.ones((1, 2, 1))
        args = dict(R=np.zeros((1, 2)), pi=np.array([[0.5, 0.5]]), gamma=0.5) | bad
        with pytest.raises(InvalidArgument):
            true_q(P, args["R"], args["pi"], args["gamma"])

    def test_rejects_non_stochastic(self):
        with pytest.raises(InvalidArgument):
            true_q(np.full((2, 1, 2), 0.7), np.zeros((2, 1)), np.ones((2, 1)), 0.5)


class TestPolicy:
    def test_epsilon_deterministic(self):
        pol = FixedPolicy.epsilon_deterministic(np.array([1, 0]), 2, 0.1)
        np.testing.assert_allclose(pol.pi, [[0.05, 0.95], [0.95, 0.05]])
        assert pol.delta_pi == pytest.approx(0.05)

    def test_gaps(self):
        assert determinism_gap_policy(np.array([[1.0, 0.0]])) == 0.0
        P = np.array([[[0.8, 0.2]], [[0.0, 1.0]]])
        assert determinism_gap_transitions(P) == pytest.approx(0.2)

    def test_induced_chain_rows(self):
        P, _, pi = random_mdp(np.random.default_rng(2), 15, 3)
        M = induced_chain(P, pi).toarray()
        np.testing.assert_allclose(M, np.einsum("sa,sat->st", pi, P), atol=1e-14)


class TestStationary:
    def swap(self):
        return np.array([[[0.0, 1.0]], [[1.0, 0.0]]]), np.ones((2, 1))

    @pytest.mark.parametrize("method", ["exact", "power"])
    def test_periodic_swap(self, method):
        P, pi = self.swap()
        np.testing.assert_allclose(stationary_distribution(P, pi, 0, method), [0.5, 0.5], atol=1e-8)

    @pytest.mark.parametrize("method", ["exact", "power"])
    def test_absorber(self, method):
        # 0 -> {1 w.p. 0.5, 2 w.p. 0.5}; 1 and 2 absorbing
        P = np.array([[[0.0, 0.5, 0.5]], [[0, 1, 0]], [[0, 0, 1]]], dtype=float)
        psi = stationary_distribution(P, np.ones((3, 1)), 0, method)
        np.testing.assert_allclose(psi, [0, 0.5, 0.5], atol=1e-8)

    def test_unreachable_class_ignored(self):
        P = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        np.testing.assert_allclose(stationary_distribution(P, np.ones((2, 1)), 1), [0, 1])

    def test_methods_agree(self):
        P, _, pi = random_mdp(np.random.default_rng(3), 25, 2)
        exact = stationary_distribution(P, pi, 0)
        power = stationary_distribution(P, pi, 0, "power", tol=1e-13)
        emp = stationary_distribution(P, pi, 0, "empirical", steps=400_000, rng=np.random.default_rng(4))
        np.testing.assert_allclose(power, exact, atol=1e-8)
        assert np.abs(emp - exact).max() < 0.01
        M = induced_chain(P, pi).toarray()
        np.testing.assert_allclose(exact @ M, exact, atol=1e-12)

    def test_unknown_method(self):
        P, pi = self.swap()
        with pytest.raises(InvalidArgument):
            stationary_distribution(P, pi, 0, "magic")


class TestScores:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.P, self.R, self.pi = random_mdp(rng, 12, 3)
        self.psi = stationary_distribution(self.P, self.pi, 0)
        self.q = solve_q_linear(self.P, self.R, self.pi, 0.9)

    def test_exact_q_scores_zero(self):
        assert score_mse(self.q, self.q, self.psi, self.pi) == 0.0
        assert score_l(self.q, self.P, self.R, self.pi, self.psi, 0.9) < 1e-20

    def test_constant_shift(self):
        c = 0.7
        w = mse_weights(self.psi, self.pi)
        assert score_mse(self.q + c, self.q, self.psi, self.pi) == pytest.approx(c * c * w.sum())
        # B(Q + c) - (Q + c) = (gamma - 1) c everywhere
        expect = ((0.9 - 1) * c) ** 2 * w.sum()
        assert score_l(self.q + c, self.P, self.R, self.pi, self.psi, 0.9) == pytest.approx(expect)

    def test_l_tilde_by_enumeration(self):
        rng = np.random.default_rng(6)
        q_hat = self.q + rng.normal(size=self.q.shape)
        S, A = self.R.shape
        total = 0.0
        for s in range(S):
            for a in range(A):
                for s2 in range(S):
                    for a2 in range(A):
                        td = self.R[s, a] + 0.9 * q_hat[s2, a2] - q_hat[s, a]
                        total += self.psi[s] * self.pi[s, a] * self.P[s, a, s2] * self.pi[s2, a2] * td ** 2
        assert score_l_tilde(q_hat, self.P, self.R, self.pi, self.psi, 0.9) == pytest.approx(total, rel=1e-10)

    def test_l_tilde_dominates_l(self):
        q_hat = self.q + 0.3
        assert (score_l_tilde(q_hat, self.P, self.R, self.pi, self.psi, 0.9)
                >= score_l(q_hat, self.P, self.R, self.pi, self.psi, 0.9) - 1e-12)

    def test_report_row(self):
        env = sample_garnet(GarnetSpec(S=20, zeta=5), np.random.default_rng(0))
        pol = FixedPolicy.sample(20, 2, 0.1, np.random.default_rng(1))
        psi = stationary_distribution(env, pol.pi, env.initial_state)
        rep = score_report(np.zeros((20, 2)), env, pol.pi, psi, 0.9)
        row = rep.csv_row(0, 100)
        assert len(row) == len(rep.CSV_COLUMNS) and float(row[3]) == pytest.approx(math.sqrt(rep.mse))


class TestBounds:
    def test_subset_metrics(self):
        # 0 <-> 1 closed pair, 2 feeds in
        P = np.array([[[0, 1, 0]], [[0.9, 0, 0.1]], [[1, 0, 0]]], dtype=float)
        psi = stationary_distribution(P, np.ones((3, 1)), 0)
        h, d = subset_metrics(P, np.ones((3, 1)), [0, 1], psi)
        assert h == pytest.approx(psi[0] + psi[1]) and d == pytest.approx(0.1)

    def test_whole_space(self):
        P, _, pi = random_mdp(np.random.default_rng(0), 8, 2)
        psi = stationary_distribution(P, pi, 0)
        h, d = subset_metrics(P, pi, range(8), psi)
        assert h == pytest.approx(1.0) and d == pytest.approx(0.0, abs=1e-12)

    def test_bound_values(self):
        assert mse_bound(1.0, 0.0, 0.9, 1.0) == 0.0
        assert mse_bound(0.5, 0.0, 0.5, 1.0) == pytest.approx(8.0)
        assert l_bound(0.75, 0.5, 1.0) == pytest.approx(4.0)


class TestCycles:
    def test_two_states_enumerated(self):
        # four maps on {0,1}; from state 0: C1 = 1 w.p. 3/4, 2 w.p. 1/4
        m, v = exact_c1_moments(2)
        assert m == pytest.approx(1.25) and v == pytest.approx(0.1875)
        # cyclic points: maps 00,11 -> 1; 01 -> 2 (identity); 10 -> 2 (swap)
        assert exact_mean_cyclic_states(2) == pytest.approx(1.5)

    @pytest.mark.parametrize("S", [2, 3, 5])
    def test_exact_by_brute_force(self, S):
        import itertools
        c1s, cs = [], []
        for f in itertools.product(range(S), repeat=S):
            cyc = {s for s in range(S) if any(self._iterate(f, s, k) == s for k in range(1, S + 1))}
            cs.append(len(cyc))
            s, seen = 0, []
            while s not in seen:
                seen.append(s)
                s = f[s]
            c1s.append(len(seen) - seen.index(s))
        m, v = exact_c1_moments(S)
        assert m == pytest.approx(np.mean(c1s)) and v == pytest.approx(np.var(c1s))
        assert exact_mean_cyclic_states(S) == pytest.approx(np.mean(cs))

    @staticmethod
    def _iterate(f, s, k):
        for _ in range(k):
            s = f[s]
        return s

    def test_pmf_sums_to_one(self):
        assert path_length_pmf(500).sum() == pytest.approx(1.0)

    def test_sampler_matches_exact(self):
        x = cycle_samples(50, 20_000, np.random.default_rng(0))
        m, v = exact_c1_moments(50)
        assert abs(x[:, 0].mean() - m) < 4 * math.sqrt(v / 20_000)
        assert (x[:, 0] <= x[:, 1]).all() and (x[:, 0] <= x[:, 2]).all()
        assert abs(x[:, 2].mean() - exact_mean_cyclic_states(50)) < 0.2

    def test_first_cycle_given_path_uniform(self):
        x = cycle_samples(30, 40_000, np.random.default_rng(1))
        sel = x[x[:, 1] == 6, 0]
        counts = np.bincount(sel, minlength=7)[1:]
        assert stats.chisquare(counts).pvalue > 1e-3

    @pytest.mark.parametrize("S", [10, 100, 1000, 10_000])
    def test_cyclic_states_bound(self, S):
        m, _ = exact_c1_moments(S)
        assert exact_mean_cyclic_states(S) <= m * (math.log(S) + 1)

    def test_statistics_record(self):
        st_ = cycle_statistics(20, 100, np.random.default_rng(0))
        assert st_.n_samples == 100 and st_.mean_c1 <= st_.mean_l1

    def test_rejects_tiny(self):
        with pytest.raises(InvalidArgument):
            cycle_samples(1, 10, np.random.default_rng(0))
