"""SARSA(0) over a state-aggregation architecture, with optional PASA adaptation.

Three agent kinds share one compiled loop:

* ``tabular``: one cell per state;
* ``fixed``: a frozen partition of X near-equal intervals (SARSA-F);
* ``pasa``: a partition regenerated every ``nu`` steps (SARSA-P).

States, cells and actions are 0-based in this module.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numba
import numpy as np

from .adaptive import BATCHED, PER_STEP, EventLog, PasaParams, PasaState, observe_state
from .envs import TabularEnv
from .errors import InvalidArgument
from .partition import OrderedPartition, equal_partition

AgentKind = Literal["tabular", "fixed", "pasa"]
NO_PASA = -1


@dataclass
class SarsaParams:
    eta: float = 3e-4
    gamma: float = 0.98
    epsilon: float = 0.01
    reciprocal_pi_weighting: bool = False
    weight_transfer: bool = True

    def __post_init__(self):
        if not self.eta > 0:
            raise InvalidArgument("eta must be > 0")
        if not 0 <= self.gamma < 1:
            raise InvalidArgument("gamma must lie in [0,1)")
        if not 0 <= self.epsilon <= 1:
            raise InvalidArgument("epsilon must lie in [0,1]")


@dataclass
class WeightMatrix:
    theta: np.ndarray

    @classmethod
    def zeros(cls, X: int, A: int) -> "WeightMatrix":
        return cls(np.zeros((X, A)))

    @property
    def X(self) -> int:
        return self.theta.shape[0]

    @property
    def A(self) -> int:
        return self.theta.shape[1]

    def q_table(self, partition_owner: np.ndarray) -> np.ndarray:
        """Per-state estimates given each state's 0-based cell."""
        return self.theta[partition_owner]

    def to_text(self) -> str:
        """Dense dump: one row per cell, values in shortest round-trip form."""
        return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in self.theta)

    @classmethod
    def from_text(cls, text: str) -> "WeightMatrix":
        rows = [[float(v) for v in line.split()] for line in text.strip().splitlines()]
        return cls(np.array(rows, dtype=float))


# primitive operations ------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _argmax_row(theta, cell):
    best = 0
    for j in range(1, theta.shape[1]):
        if theta[cell, j] > theta[cell, best]:
            best = j
    return best


@numba.njit(cache=True)
def select_action(theta, cell, epsilon, rng):
    """Epsilon-greedy over the cell's row; ties go to the lowest action."""
    if epsilon > 0 and rng.random() < epsilon:
        return rng.integers(0, theta.shape[1])
    return _argmax_row(theta, cell)


@numba.njit(cache=True)
def behaviour_prob(theta, cell, action, epsilon):
    A = theta.shape[1]
    p = epsilon / A
    if action == _argmax_row(theta, cell):
        p += 1 - epsilon
    return p


def q_value(theta: WeightMatrix | np.ndarray, cell: int, action: int) -> float:
    arr = theta.theta if isinstance(theta, WeightMatrix) else theta
    return float(arr[cell, action])


@numba.njit(cache=True)
def _td(theta, cell, action, reward, next_cell, next_action, eta, gamma, pi_prob, reciprocal):
    d = theta[next_cell, next_action]
    if reciprocal:
        d = d / pi_prob
    theta[cell, action] += eta * (reward + gamma * d - theta[cell, action])
    return d


def td_update(theta: np.ndarray, cell: int, action: int, reward: float, next_cell: int,
              next_action: int, eta: float, gamma: float, pi_prob: float = 1.0,
              reciprocal: bool = False) -> float:
    """In-place update of one weight; returns the bootstrap value d actually used."""
    if reciprocal and not pi_prob > 0:
        raise InvalidArgument("pi_prob must be > 0 with reciprocal weighting")
    return _td(theta, cell, action, reward, next_cell, next_action, eta, gamma, pi_prob, reciprocal)


def tabular_update(q_table: np.ndarray, s: int, a: int, r: float, s2: int, a2: int,
                   params: SarsaParams, pi_prob: float = 1.0) -> float:
    return td_update(q_table, s, a, r, s2, a2, params.eta, params.gamma, pi_prob,
                     params.reciprocal_pi_weighting)


@numba.njit(cache=True)
def _overlap_mean(theta, old_lo, old_hi, old_order, new_lo, new_hi, new_order):
    X_new = new_lo.shape[0]
    A = theta.shape[1]
    out = np.zeros((X_new, A))
    p = 0
    n_old = old_order.shape[0]
    for q in new_order:
        while old_hi[old_order[p]] < new_lo[q]:
            p += 1
        k = p
        count = 0
        while k < n_old and old_lo[old_order[k]] <= new_hi[q]:
            for l in range(A):
                out[q, l] += theta[old_order[k], l]
            count += 1
            k += 1
        for l in range(A):
            out[q, l] /= count
    return out


@dataclass
class LastTransition:
    """What the optional literal correction needs: the last state/action and d."""
    state: int
    action: int
    d: float
    eta: float


def weight_transfer(theta: np.ndarray, old: OrderedPartition, new: OrderedPartition,
                    last: LastTransition | None = None) -> np.ndarray:
    """Each new cell takes the mean row of the old cells it overlaps.

    With ``last`` given, every new cell overlapping the old cell of
    ``last.state`` also gets ``eta * d`` added at ``last.action``. The SARSA
    loop leaves this off because it applies the pending update itself, after
    the transfer.
    """
    olo, ohi, _, _ = old.arrays()
    nlo, nhi, _, _ = new.arrays()
    # the lookup order lists cells by position, which is the sweep order needed here
    out = _overlap_mean(theta, olo, ohi, old.lookup_arrays()[1], nlo, nhi, new.lookup_arrays()[1])
    if last is not None:
        s1 = last.state + 1
        k = int(np.flatnonzero((olo <= s1) & (s1 <= ohi))[0])
        hit = (nlo <= ohi[k]) & (nhi >= olo[k])
        out[hit, last.action] += last.eta * last.d
    return out


# the loop ------------------------------------------------------------------------
# The hot loop is written out by hand: in numba, every call that passes an
# array costs tens of nanoseconds in reference counting, which is as much
# as the rest of an iteration.

def _lookup(starts, owner, s):
    """0-based cell of 0-based state ``s`` (Python-side twin of the inlined search)."""
    return int(owner[np.searchsorted(starts, s, side="right") - 1])


@numba.njit(cache=True)
def run_chunk(n_steps, t0, s, a, pending, pend_r, pend_s2,
              succ, reward, noise, theta, starts, owner,
              eta, gamma, epsilon, reciprocal, fixed_actions, use_fixed,
              pasa_mode, parent, u_bar, counts, varsigma, mark, counter, nu,
              win_sums, win_size, env_rng, agent_rng):
    """Advance up to ``n_steps`` iterations.

    Returns early, right after observing the successor, when the PASA
    counter wraps; the unfinished transition comes back as
    (pending=True, pend_r, pend_s2) and is completed on the next call.
    Returns (steps, s, a, pending, pend_r, pend_s2, counter, last_d).
    """
    S = succ.shape[0]
    A = theta.shape[1]
    X = u_bar.shape[0]
    n_starts = starts.shape[0]
    last_d = 0.0
    done = 0
    s2 = pend_s2
    r = pend_r
    resume = pending
    while resume or done < n_steps:
        if not resume:
            q = noise[s, a]
            if q > 0.0 and env_rng.random() < q:
                s2 = env_rng.integers(0, S)
            else:
                s2 = succ[s, a]
            r = reward[s, a]
            win_sums[(t0 + done) // win_size] += r
            done += 1
        # cell of the successor
        base = 0
        n = n_starts
        while n > 1:
            half = n >> 1
            if starts[base + half] <= s2:
                base += half
            n -= half
        c2 = owner[base]
        if not resume and pasa_mode >= 0:
            if pasa_mode == 1:
                counts[c2] += 1
            else:
                j = c2
                while j >= 0:
                    mark[j] = 1.0
                    j = parent[j]
                for j in range(X):
                    u_bar[j] += varsigma[j] * (mark[j] - u_bar[j])
                    mark[j] = 0.0
            counter += 1
            if counter == nu:
                return done, s, a, True, r, s2, 0, last_d
        resume = False
        # cell of the current state
        base = 0
        n = n_starts
        while n > 1:
            half = n >> 1
            if starts[base + half] <= s:
                base += half
            n -= half
        c = owner[base]
        # next action
        explore = epsilon > 0.0 and agent_rng.random() < epsilon
        if explore:
            a2 = agent_rng.integers(0, A)
        elif use_fixed:
            a2 = fixed_actions[s2]
        else:
            a2 = 0
            for l in range(1, A):
                if theta[c2, l] > theta[c2, a2]:
                    a2 = l
        d = theta[c2, a2]
        if reciprocal:
            if use_fixed:
                greedy = fixed_actions[s]
            else:
                greedy = 0
                for l in range(1, A):
                    if theta[c, l] > theta[c, greedy]:
                        greedy = l
            p = epsilon / A + (1.0 - epsilon if a == greedy else 0.0)
            d = d / p
        theta[c, a] += eta * (r + gamma * d - theta[c, a])
        last_d = d
        s = s2
        a = a2
    return done, s, a, False, 0.0, 0, counter, last_d


@dataclass
class AgentConfig:
    kind: AgentKind = "pasa"
    X: int | None = None
    X0: int | None = None
    sarsa: SarsaParams = field(default_factory=SarsaParams)
    pasa: PasaParams = field(default_factory=PasaParams)

    def partition_for(self, S: int) -> OrderedPartition:
        if self.kind == "tabular":
            return equal_partition(S, S)
        X = self.X if self.X is not None else S
        if self.kind == "fixed":
            return equal_partition(S, X)
        raise InvalidArgument("PASA partitions come from PasaState.create")


@dataclass
class RunResult:
    reward_windows: np.ndarray        # total reward per window
    window_size: int
    theta: np.ndarray
    partition: OrderedPartition
    repartitions: int
    rho_changes: int
    final_state: int

    @property
    def mean_reward_windows(self) -> np.ndarray:
        return self.reward_windows / max(self.window_size, 1)


class Agent:
    """Mutable agent state; ``run`` can be called repeatedly to continue."""

    def __init__(self, config: AgentConfig, S: int, A: int, policy_actions: np.ndarray | None = None):
        self.config = config
        self.S, self.A = S, A
        if config.kind == "pasa":
            X = config.X if config.X is not None else S
            self.pasa = PasaState.create(S, X, config.X0, config.pasa)
            self.partition = self.pasa.partition
        elif config.kind in ("fixed", "tabular"):
            self.pasa = None
            self.partition = config.partition_for(S)
        else:
            raise InvalidArgument(f"unknown agent kind {config.kind!r}")
        self.theta = np.zeros((self.partition.X, A))
        self.use_fixed = policy_actions is not None
        self.fixed_actions = (np.asarray(policy_actions, dtype=np.int64) if self.use_fixed
                              else np.zeros(1, dtype=np.int64))
        self.starts, self.owner = self.partition.lookup_arrays()
        self.repartitions = 0
        self.rho_changes = 0
        self.pending = None        # (reward, successor) of an unfinished transition
        self.last_d = 0.0

    def cell_of_states(self) -> np.ndarray:
        """0-based cell of every state under the current partition."""
        idx = np.searchsorted(self.starts, np.arange(self.S), side="right") - 1
        return self.owner[idx]

    def q_table(self) -> np.ndarray:
        return self.theta[self.cell_of_states()]

    def _on_repartition(self, event_log: EventLog | None, s: int, a: int):
        old = self.partition
        report = self.pasa.repartition()
        self.repartitions += 1
        if report.changed:
            self.rho_changes += 1
            new = self.pasa.partition
            if self.config.sarsa.weight_transfer:
                self.theta = weight_transfer(self.theta, old, new)
            self.partition = new
            self.starts, self.owner = self.pasa.starts, self.pasa.owner
        if event_log is not None:
            event_log.write(report)


def _first_action(agent: Agent, s: int, rng: np.random.Generator) -> int:
    p = agent.config.sarsa
    if p.epsilon > 0 and rng.random() < p.epsilon:
        return int(rng.integers(0, agent.A))
    if agent.use_fixed:
        return int(agent.fixed_actions[s])
    return int(np.argmax(agent.theta[_lookup(agent.starts, agent.owner, s)]))


def run_episodeless_loop(env: TabularEnv, agent: Agent, iterations: int,
                         env_rng: np.random.Generator, agent_rng: np.random.Generator,
                         n_windows: int = 100, checkpoints: tuple[int, ...] = (),
                         on_checkpoint: Callable[[int, Agent], None] | None = None,
                         event_log: EventLog | None = None, start_state: int | None = None,
                         ) -> RunResult:
    """Run a continuing task for ``iterations`` steps from the initial state.

    ``checkpoints`` are iteration counts at which ``on_checkpoint`` is called.
    Windows split the run into ``n_windows`` equal blocks of reward.
    """
    if iterations < 0:
        raise InvalidArgument("iterations must be >= 0")
    if env.S != agent.S or env.A != agent.A:
        raise InvalidArgument("agent and environment sizes differ")
    n_windows = min(n_windows, iterations) if iterations else 0
    if n_windows and iterations % n_windows:
        raise InvalidArgument(f"iterations={iterations} is not a multiple of n_windows={n_windows}")
    win_size = iterations // n_windows if n_windows else 1
    win_sums = np.zeros(max(n_windows, 1))
    p = agent.config.sarsa
    s = env.initial_state if start_state is None else start_state
    a = 0
    if iterations:
        a = _first_action(agent, s, agent_rng)
    pasa = agent.pasa
    if pasa is not None:
        mode = PER_STEP if pasa.params.counter_mode == "per-step" else BATCHED
        nu = pasa.params.nu
    else:
        mode, nu = NO_PASA, 1
    dummy_i = np.zeros(1, dtype=np.int64)
    dummy_f = np.zeros(1)
    stops = sorted({c for c in checkpoints if 0 < c <= iterations} | {iterations})
    t = 0
    pending, pend_r, pend_s2 = False, 0.0, 0
    for stop in stops:
        while t < stop:
            if pasa is not None:
                parent, u_bar, counts = pasa.parent, pasa.u_bar, pasa.visit_counters
                varsigma, mark, counter = pasa.varsigma, pasa._mark, pasa.counter
            else:
                parent, u_bar, counts, varsigma, mark, counter = dummy_i, dummy_f, dummy_i, dummy_f, dummy_f, 0
            done, s, a, pending, pend_r, pend_s2, counter, agent.last_d = run_chunk(
                stop - t, t, s, a, pending, pend_r, pend_s2,
                env.succ, env.reward, env.noise, agent.theta, agent.starts, agent.owner,
                p.eta, p.gamma, p.epsilon, p.reciprocal_pi_weighting,
                agent.fixed_actions, agent.use_fixed,
                mode, parent, u_bar, counts, varsigma, mark, counter, nu,
                win_sums, win_size, env_rng, agent_rng)
            t += done
            if pasa is not None:
                pasa.counter = counter
                pasa.iteration += done
                if pending:
                    agent._on_repartition(event_log, s, a)
            if not np.isfinite(agent.theta).all():
                raise FloatingPointError(f"weights became non-finite by iteration {t}")
        if on_checkpoint is not None and stop in checkpoints:
            on_checkpoint(stop, agent)
    if pending:
        # finish the transition interrupted by a repartition on the very last step
        run_chunk(0, t, s, a, True, pend_r, pend_s2, env.succ, env.reward, env.noise,
                  agent.theta, agent.starts, agent.owner, p.eta, p.gamma, p.epsilon,
                  p.reciprocal_pi_weighting, agent.fixed_actions, agent.use_fixed, NO_PASA,
                  dummy_i, dummy_f, dummy_i, dummy_f, dummy_f, 0, 1, win_sums, win_size,
                  env_rng, agent_rng)
        s = pend_s2
    return RunResult(win_sums[:n_windows].copy(), win_size, agent.theta, agent.partition,
                     agent.repartitions, agent.rho_changes, int(s))
