import numpy as np
import pytest

from pasa.adaptive import PasaParams
from pasa.envs import GarnetSpec, TabularEnv, sample_garnet
from pasa.errors import InvalidArgument
from pasa.partition import OrderedPartition, equal_partition, split_cell
from pasa.sarsa import (Agent, AgentConfig, LastTransition, SarsaParams, WeightMatrix,
                        behaviour_prob, q_value, run_episodeless_loop, select_action,
                        tabular_update, td_update, weight_transfer)


def gen(seed):
    return np.random.Generator(np.random.PCG64(seed))


class TestWeights:
    def test_zero_init(self):
        w = WeightMatrix.zeros(4, 3)
        assert all(q_value(w, c, a) == 0.0 for c in range(4) for a in range(3))

    def test_direct_read(self):
        w = WeightMatrix.zeros(4, 2)
        w.theta[1, 0] = 0.7   # cell 2, action 1 in 1-based terms
        assert q_value(w, 1, 0) == 0.7

    def test_q_table_matches_scan(self):
        p = split_cell(OrderedPartition(10, [(1, 5), (6, 10)]), 1, 2)
        theta = np.arange(6.0).reshape(3, 2)
        agent_owner = [next(j for j, c in enumerate(p.cells) if s in c) for s in range(1, 11)]
        expected = np.array([sum(theta[k] * (s + 1 in p.cells[k]) for k in range(3)) for s in range(10)])
        assert (theta[agent_owner] == expected).all()

    def test_text_round_trip(self):
        w = WeightMatrix(np.array([[0.1, -2.5], [1e-300, 3.0]]))
        assert WeightMatrix.from_text(w.to_text()).theta.tolist() == w.theta.tolist()

    def test_text_golden(self):
        w = WeightMatrix(np.array([[0.1, -2.5], [1e-300, 3.0]]))
        assert w.to_text() == "0.1 -2.5\n1e-300 3.0\n"


class TestSelectAction:
    def test_greedy(self):
        theta = np.array([[0.1, 0.9]])
        rng = gen(0)
        assert {select_action(theta, 0, 0.0, rng) for _ in range(20)} == {1}

    def test_tie_lowest_index(self):
        assert select_action(np.array([[0.5, 0.5]]), 0, 0.0, gen(0)) == 0

    def test_uniform_when_fully_random(self):
        theta = np.array([[0.0, 5.0, 1.0, 2.0]])
        rng = gen(1)
        n = 100_000
        counts = np.bincount([select_action(theta, 0, 1.0, rng) for _ in range(n)], minlength=4)
        sigma = np.sqrt(n * 0.25 * 0.75)
        assert (np.abs(counts - n / 4) < 3 * sigma).all()

    def test_behaviour_prob(self):
        theta = np.array([[0.0, 1.0]])
        assert behaviour_prob(theta, 0, 1, 0.1) == pytest.approx(0.95)
        assert behaviour_prob(theta, 0, 0, 0.1) == pytest.approx(0.05)


class TestTD:
    def test_reward_only(self):
        theta = np.zeros((2, 2))
        td_update(theta, 0, 1, 1.0, 1, 0, eta=0.5, gamma=0.0)
        assert theta[0, 1] == 0.5

    def test_bootstrap(self):
        theta = np.zeros((2, 2))
        theta[1, 0] = 1.0
        td_update(theta, 0, 0, 0.0, 1, 0, eta=1.0, gamma=0.98)
        assert theta[0, 0] == pytest.approx(0.98)

    @pytest.mark.parametrize("eta", [0.1, 0.5])
    def test_geometric_convergence(self, eta):
        theta = np.zeros((2, 1))
        theta[1, 0] = 2.0
        r, gamma = 1.0, 0.5
        for n in range(1, 30):
            td_update(theta, 0, 0, r, 1, 0, eta=eta, gamma=gamma)
            assert theta[0, 0] == pytest.approx((r + gamma * 2.0) * (1 - (1 - eta) ** n), rel=1e-12)

    def test_reciprocal_weighting(self):
        theta = np.zeros((2, 1))
        theta[1, 0] = 1.0
        d = td_update(theta, 0, 0, 0.0, 1, 0, eta=1.0, gamma=0.5, pi_prob=0.25, reciprocal=True)
        assert d == 4.0 and theta[0, 0] == 2.0
        with pytest.raises(InvalidArgument):
            td_update(theta, 0, 0, 0.0, 1, 0, eta=1.0, gamma=0.5, pi_prob=0.0, reciprocal=True)

    def test_tabular_update(self):
        q = np.zeros((3, 2))
        tabular_update(q, 2, 1, 1.0, 0, 0, SarsaParams(eta=0.25, gamma=0.9))
        assert q[2, 1] == 0.25


class TestWeightTransfer:
    def test_identity(self):
        p = OrderedPartition(8, [(1, 4), (5, 8)], (1,))
        theta = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        assert (weight_transfer(theta, p, p) == theta).all()

    def test_split_inherits(self):
        old = OrderedPartition(8, [(1, 4), (5, 8)])
        new = split_cell(old, 1, 2)
        theta = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = weight_transfer(theta, old, new)
        assert out.tolist() == [[1.0, 2.0], [3.0, 4.0], [3.0, 4.0]]

    def test_merge_takes_mean(self):
        # old cells [1,1],[2,2] | [3,4]; new cells [1,2] | [3,3],[4,4]
        old = OrderedPartition(4, [(1, 2), (3, 4)], (1,))
        new = OrderedPartition(4, [(1, 2), (3, 4)], (2,))
        theta = np.array([[1.0, 10.0], [5.0, 50.0], [3.0, 30.0]])  # rows: [1,1], [3,4], [2,2]
        out = weight_transfer(theta, old, new)
        assert out.tolist() == [[2.0, 20.0], [5.0, 50.0], [5.0, 50.0]]

    def test_literal_correction(self):
        old = OrderedPartition(4, [(1, 2), (3, 4)])
        new = split_cell(old, 1, 2)
        theta = np.zeros((2, 2))
        out = weight_transfer(theta, old, new, LastTransition(state=3, action=1, d=2.0, eta=0.5))
        assert out.tolist() == [[0.0, 0.0], [0.0, 1.0], [0.0, 1.0]]


def one_state_env(r=1.0):
    return TabularEnv(np.zeros((1, 1), dtype=np.int64), np.full((1, 1), r), 0.0, 0)


def reference_loop(env, agent: Agent, T, env_rng, agent_rng):
    """Plain-Python SARSA with the same stream order as the compiled loop."""
    p = agent.config.sarsa
    part = agent.partition
    theta = agent.theta.copy()
    cell = lambda s: part.tree.cell_of(s + 1) - 1
    s = env.initial_state
    if p.epsilon > 0 and agent_rng.random() < p.epsilon:
        a = int(agent_rng.integers(0, env.A))
    elif agent.use_fixed:
        a = int(agent.fixed_actions[s])
    else:
        a = int(np.argmax(theta[cell(s)]))
    rewards = []
    pasa = agent.pasa
    for _ in range(T):
        q = env.noise[s, a]
        if q > 0 and env_rng.random() < q:
            s2 = int(env_rng.integers(0, env.S))
        else:
            s2 = int(env.succ[s, a])
        r = env.reward[s, a]
        rewards.append(r)
        if pasa is not None:
            rep = pasa.tick(s2 + 1)
            if rep is not None and rep.changed:
                theta = weight_transfer(theta, part, pasa.partition)
                part = pasa.partition
        if p.epsilon > 0 and agent_rng.random() < p.epsilon:
            a2 = int(agent_rng.integers(0, env.A))
        elif agent.use_fixed:
            a2 = int(agent.fixed_actions[s2])
        else:
            a2 = int(np.argmax(theta[cell(s2)]))
        c, c2 = cell(s), cell(s2)
        theta[c, a] += p.eta * (r + p.gamma * theta[c2, a2] - theta[c, a])
        s, a = s2, a2
    return theta, np.array(rewards), part


class TestLoop:
    def test_zero_iterations(self):
        agent = Agent(AgentConfig("fixed", X=1), 1, 1)
        res = run_episodeless_loop(one_state_env(), agent, 0, gen(0), gen(1))
        assert res.reward_windows.size == 0 and (agent.theta == 0).all()

    def test_geometric_series(self):
        agent = Agent(AgentConfig("tabular", sarsa=SarsaParams(eta=0.05, gamma=0.5, epsilon=0.0)), 1, 1)
        run_episodeless_loop(one_state_env(), agent, 2000, gen(0), gen(1), n_windows=1)
        assert agent.theta[0, 0] == pytest.approx(2.0, abs=1e-3)

    def test_rejects_bad_window_count(self):
        agent = Agent(AgentConfig("fixed", X=1), 1, 1)
        with pytest.raises(InvalidArgument):
            run_episodeless_loop(one_state_env(), agent, 101, gen(0), gen(1), n_windows=100)

    @pytest.mark.parametrize("kind,counter", [("tabular", "batched"), ("fixed", "batched"),
                                              ("pasa", "batched"), ("pasa", "per-step")])
    @pytest.mark.parametrize("noisy", [False, True])
    @pytest.mark.parametrize("fixed_policy", [False, True])
    def test_matches_reference(self, kind, counter, noisy, fixed_policy):
        env = sample_garnet(GarnetSpec(S=40, zeta=5, delta=0.3 if noisy else 0.0), gen(3))
        T = 3000
        pasa = PasaParams(varsigma=0.01, nu=250, counter_mode=counter)
        cfg = AgentConfig(kind, X=12, X0=4, sarsa=SarsaParams(eta=0.1, epsilon=0.2), pasa=pasa)
        actions = gen(9).integers(0, env.A, env.S) if fixed_policy else None
        fast = Agent(cfg, env.S, env.A, actions)
        slow = Agent(cfg, env.S, env.A, actions)
        res = run_episodeless_loop(env, fast, T, gen(4), gen(5), n_windows=T)
        theta, rewards, part = reference_loop(env, slow, T, gen(4), gen(5))
        np.testing.assert_array_equal(res.reward_windows, rewards)
        np.testing.assert_allclose(fast.theta, theta, rtol=0, atol=1e-12)
        assert fast.partition == part
        if kind == "pasa":
            assert res.repartitions == T // 250

    def test_deterministic(self):
        env = sample_garnet(GarnetSpec(S=100), gen(0))
        cfg = AgentConfig("pasa", X=20, pasa=PasaParams(nu=500))
        a, b = Agent(cfg, 100, 2), Agent(cfg, 100, 2)
        ra = run_episodeless_loop(env, a, 20_000, gen(1), gen(2))
        rb = run_episodeless_loop(env, b, 20_000, gen(1), gen(2))
        assert ra.reward_windows.tobytes() == rb.reward_windows.tobytes()
        assert a.theta.tobytes() == b.theta.tobytes()

    def test_checkpoints_do_not_perturb(self):
        env = sample_garnet(GarnetSpec(S=100), gen(0))
        cfg = AgentConfig("pasa", X=20, pasa=PasaParams(nu=700))
        a, b = Agent(cfg, 100, 2), Agent(cfg, 100, 2)
        seen = []
        run_episodeless_loop(env, a, 10_000, gen(1), gen(2), checkpoints=(1234, 5000, 9999),
                             on_checkpoint=lambda t, ag: seen.append(t))
        run_episodeless_loop(env, b, 10_000, gen(1), gen(2))
        assert seen == [1234, 5000, 9999] and a.theta.tobytes() == b.theta.tobytes()


def test_agent_rejects_unknown_kind():
    with pytest.raises(InvalidArgument):
        Agent(AgentConfig("other"), 10, 2)


def test_fixed_partition_layout():
    assert AgentConfig("fixed", X=3).partition_for(10) == equal_partition(10, 3)
