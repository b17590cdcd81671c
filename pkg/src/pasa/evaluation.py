"""Exact policy evaluation, scoring functions, bound evaluation and cycle statistics.

Transition models may be given as a ``TabularEnv``, a dense ``(S, A, S)``
array, or a sparse ``(S*A, S)`` matrix whose row ``s*A + a`` is P(.|s,a).
All indices are 0-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .envs import TabularEnv
from .errors import InvalidArgument

ROW_TOL = 1e-9


# transition models -----------------------------------------------------------

def sa_matrix(P, A: int | None = None) -> sp.csr_matrix:
    """Return P as a CSR matrix of shape (S*A, S)."""
    if isinstance(P, TabularEnv):
        return P.transition_matrix()
    if sp.issparse(P):
        return sp.csr_matrix(P)
    P = np.asarray(P, dtype=float)
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        raise InvalidArgument(f"dense P must be (S, A, S), got {P.shape}")
    S, A, _ = P.shape
    return sp.csr_matrix(P.reshape(S * A, S))


def _check_stochastic(Psa: sp.csr_matrix):
    sums = np.asarray(Psa.sum(axis=1)).ravel()
    if Psa.nnz and (Psa.data.min() < 0 or np.abs(sums - 1).max() > ROW_TOL):
        raise InvalidArgument("transition rows must be nonnegative and sum to 1")
    if not Psa.nnz:
        raise InvalidArgument("empty transition matrix")


def _check_policy(pi: np.ndarray, S: int, A: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (S, A):
        raise InvalidArgument(f"policy must be ({S}, {A}), got {pi.shape}")
    if pi.min() < 0 or np.abs(pi.sum(axis=1) - 1).max() > 1e-12:
        raise InvalidArgument("policy rows must be nonnegative and sum to 1")
    return pi


def induced_chain(P, pi: np.ndarray) -> sp.csr_matrix:
    """State-to-state matrix M(s, s') = sum_a pi(a|s) P(s'|s,a)."""
    Psa = sa_matrix(P)
    S = Psa.shape[1]
    A = Psa.shape[0] // S
    pi = _check_policy(pi, S, A)
    weights = sp.diags(pi.ravel())
    pool = sp.kron(sp.eye(S, format="csr"), np.ones((1, A)), format="csr")
    return (pool @ weights @ Psa).tocsr()


# policies --------------------------------------------------------------------

@dataclass
class FixedPolicy:
    pi: np.ndarray
    actions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        if self.pi.min() < 0 or np.abs(self.pi.sum(axis=1) - 1).max() > 1e-12:
            raise InvalidArgument("policy rows must sum to 1")

    @property
    def delta_pi(self) -> float:
        return determinism_gap_policy(self.pi)

    @classmethod
    def epsilon_deterministic(cls, actions: np.ndarray, A: int, epsilon: float) -> "FixedPolicy":
        """Play ``actions[s]`` w.p. 1-epsilon, otherwise a uniformly random action."""
        actions = np.asarray(actions, dtype=np.int64)
        pi = np.full((len(actions), A), epsilon / A)
        pi[np.arange(len(actions)), actions] += 1 - epsilon
        return cls(pi, actions)

    @classmethod
    def sample(cls, S: int, A: int, epsilon: float, rng: np.random.Generator) -> "FixedPolicy":
        return cls.epsilon_deterministic(rng.integers(0, A, size=S), A, epsilon)


def determinism_gap_policy(pi: np.ndarray) -> float:
    return float(np.max(1 - np.max(pi, axis=1)))


def determinism_gap_transitions(P) -> float:
    Psa = sa_matrix(P)
    return float(np.max(1 - Psa.max(axis=1).toarray().ravel()))


def determinism_gap_rewards(reward_var: np.ndarray | float) -> float:
    """Rewards are delta-deterministic when every variance is at most delta."""
    return float(np.max(reward_var))


# oracles ---------------------------------------------------------------------

def _shape(Psa, R_mean):
    S = Psa.shape[1]
    A = Psa.shape[0] // S
    R = np.asarray(R_mean, dtype=float)
    if R.shape != (S, A):
        raise InvalidArgument(f"reward table must be ({S}, {A}), got {R.shape}")
    return S, A, R


def bellman_operator(Q: np.ndarray, P, R_mean: np.ndarray, pi: np.ndarray, gamma: float) -> np.ndarray:
    Psa = sa_matrix(P)
    S, A, R = _shape(Psa, R_mean)
    V = np.sum(pi * Q, axis=1)
    return R + gamma * (Psa @ V).reshape(S, A)


def true_q(P, R_mean: np.ndarray, pi: np.ndarray, gamma: float, tol: float = 1e-10,
           max_iter: int = 10_000_000) -> np.ndarray:
    """Fixed point of the policy's Bellman operator by successive application."""
    if not 0 <= gamma < 1:
        raise InvalidArgument("gamma must lie in [0,1)")
    Psa = sa_matrix(P)
    _check_stochastic(Psa)
    S, A, R = _shape(Psa, R_mean)
    pi = _check_policy(pi, S, A)
    Q = np.zeros((S, A))
    for _ in range(max_iter):
        nxt = R + gamma * (Psa @ np.sum(pi * Q, axis=1)).reshape(S, A)
        change = np.max(np.abs(nxt - Q))
        Q = nxt
        if change < tol:
            return Q
    raise RuntimeError("fixed-point iteration did not converge")


def solve_q_linear(P, R_mean: np.ndarray, pi: np.ndarray, gamma: float) -> np.ndarray:
    """Direct sparse solve of (I - gamma P Pi) Q = R."""
    Psa = sa_matrix(P)
    _check_stochastic(Psa)
    S, A, R = _shape(Psa, R_mean)
    pi = _check_policy(pi, S, A)
    rows = np.repeat(np.arange(S), A)
    Pi = sp.csr_matrix((pi.ravel(), (rows, np.arange(S * A))), shape=(S, S * A))
    system = sp.eye(S * A, format="csc") - gamma * (Psa @ Pi).tocsc()
    return spla.spsolve(system, R.ravel()).reshape(S, A)


def _stationary_closed(M: sp.csr_matrix, members: np.ndarray) -> np.ndarray:
    """Stationary distribution of an irreducible closed class."""
    n = len(members)
    if n == 1:
        return np.ones(1)
    sub = M[members][:, members]
    system = (sub.T - sp.eye(n)).tolil()
    system[n - 1, :] = np.ones(n)
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    x = spla.spsolve(system.tocsc(), rhs)
    x = np.clip(x, 0, None)
    return x / x.sum()


def stationary_distribution(P, pi: np.ndarray, s1: int, method: str = "exact", *,
                            tol: float = 1e-10, max_iter: int = 10_000_000,
                            steps: int = 1_000_000, rng: np.random.Generator | None = None,
                            env: TabularEnv | None = None) -> np.ndarray:
    """Long-run state frequencies of the chain started at ``s1``.

    ``exact`` decomposes the chain into strongly connected components and
    weights each closed class by its absorption probability from ``s1``.
    ``power`` iterates the lazy chain (I + M)/2 from the point mass at ``s1``;
    its limit equals the Cesàro limit of M and exists even for periodic
    chains. ``empirical`` simulates ``steps`` transitions.
    """
    M = induced_chain(P, pi)
    S = M.shape[0]
    if method == "power":
        x = np.zeros(S)
        x[s1] = 1.0
        MT = M.T.tocsr()
        for _ in range(max_iter):
            nxt = 0.5 * (x + MT @ x)
            if np.max(np.abs(nxt - x)) < tol:
                return nxt / nxt.sum()
            x = nxt
        raise RuntimeError("power iteration did not converge")
    if method == "empirical":
        rng = rng if rng is not None else np.random.default_rng(0)
        return _empirical_frequencies(M, s1, steps, rng)
    if method != "exact":
        raise InvalidArgument(f"unknown method {method!r}")

    reach = csgraph.breadth_first_order(M, s1, directed=True, return_predecessors=False)
    reach = np.sort(reach)
    sub = M[reach][:, reach].tocsr()
    n_comp, label = csgraph.connected_components(sub, directed=True, connection="strong")
    # a class is closed when no edge leaves it
    coo = sub.tocoo()
    leaving = np.zeros(n_comp, dtype=bool)
    out_edge = (label[coo.row] != label[coo.col]) & (coo.data > 0)
    leaving[label[coo.row[out_edge]]] = True
    closed = np.flatnonzero(~leaving)
    start = int(np.searchsorted(reach, s1))
    psi_sub = np.zeros(len(reach))
    transient = np.flatnonzero(leaving[label])
    if not leaving[label[start]]:
        members = np.flatnonzero(label == label[start])
        psi_sub[members] = _stationary_closed(sub, members)
    else:
        T = transient
        pos_t = np.full(len(reach), -1)
        pos_t[T] = np.arange(len(T))
        system = (sp.eye(len(T)) - sub[T][:, T]).tocsc()
        lu = spla.splu(system)
        for c in closed:
            members = np.flatnonzero(label == c)
            into = np.asarray(sub[T][:, members].sum(axis=1)).ravel()
            absorb = lu.solve(into)[pos_t[start]]
            if absorb > 0:
                psi_sub[members] += absorb * _stationary_closed(sub, members)
    psi = np.zeros(S)
    psi[reach] = psi_sub
    return psi / psi.sum()


def _empirical_frequencies(M: sp.csr_matrix, s1: int, steps: int, rng) -> np.ndarray:
    return _simulate_chain(M.indptr, M.indices, _row_cdf(M), s1, steps, rng)


def _row_cdf(M: sp.csr_matrix) -> np.ndarray:
    cdf = np.empty_like(M.data)
    for i in range(M.shape[0]):
        a, b = M.indptr[i], M.indptr[i + 1]
        cdf[a:b] = np.cumsum(M.data[a:b])
    return cdf


@numba.njit(cache=True)
def _simulate_chain(indptr, indices, cdf, s, steps, rng):
    counts = np.zeros(indptr.shape[0] - 1)
    for _ in range(steps):
        counts[s] += 1
        a, b = indptr[s], indptr[s + 1]
        u = rng.random() * cdf[b - 1]
        k = a
        while k < b - 1 and cdf[k] < u:
            k += 1
        s = indices[k]
    return counts / steps


# scores ----------------------------------------------------------------------

@dataclass
class ScoreReport:
    psi: np.ndarray
    q_true: np.ndarray
    q_hat: np.ndarray
    mse: float
    l: float
    l_tilde: float
    gamma: float
    weighting: str = "psi*pi"
    per_pair_sq_error: np.ndarray | None = field(default=None, repr=False)

    CSV_COLUMNS = ("trial", "checkpoint", "mse", "rmse", "l", "l_tilde", "gamma")

    def csv_row(self, trial: int, checkpoint: int) -> list:
        return [trial, checkpoint, repr(self.mse), repr(math.sqrt(self.mse)),
                repr(self.l), repr(self.l_tilde), repr(self.gamma)]


def mse_weights(psi: np.ndarray, pi: np.ndarray) -> np.ndarray:
    return psi[:, None] * pi


def score_mse(q_hat: np.ndarray, q_true: np.ndarray, psi: np.ndarray, pi: np.ndarray) -> float:
    return float(np.sum(mse_weights(psi, pi) * (q_hat - q_true) ** 2))


def score_l(q_hat, P, R_mean, pi, psi, gamma, w_tilde=None) -> float:
    """Weighted squared Bellman error, weights psi * w_tilde (w_tilde defaults to pi)."""
    w = psi[:, None] * (pi if w_tilde is None else w_tilde)
    return float(np.sum(w * (bellman_operator(q_hat, P, R_mean, pi, gamma) - q_hat) ** 2))


def score_l_tilde(q_hat, P, R_mean, pi, psi, gamma, w_tilde=None, reward_var=0.0) -> float:
    """Weighted expected squared one-step TD error.

    Rewards are assumed independent of the successor, so the inner
    expectation is Var(R) + E[(E R + gamma Q(s',a') - Q(s,a))^2] exactly.
    """
    Psa = sa_matrix(P)
    S, A, R = _shape(Psa, R_mean)
    w = psi[:, None] * (pi if w_tilde is None else w_tilde)
    first = (Psa @ np.sum(pi * q_hat, axis=1)).reshape(S, A)
    second = (Psa @ np.sum(pi * q_hat ** 2, axis=1)).reshape(S, A)
    c = R - q_hat
    inner = reward_var + c ** 2 + 2 * gamma * c * first + gamma ** 2 * second
    return float(np.sum(w * inner))


def score_report(q_hat, env: TabularEnv, pi, psi, gamma, q_true=None) -> ScoreReport:
    if q_true is None:
        q_true = true_q(env, env.reward, pi, gamma)
    sq = (q_hat - q_true) ** 2
    return ScoreReport(psi, q_true, q_hat, score_mse(q_hat, q_true, psi, pi),
                       score_l(q_hat, env, env.reward, pi, psi, gamma),
                       score_l_tilde(q_hat, env, env.reward, pi, psi, gamma),
                       gamma, per_pair_sq_error=sq)


# bounds ----------------------------------------------------------------------

def subset_metrics(P, pi: np.ndarray, subset, psi: np.ndarray) -> tuple[float, float]:
    """(h, delta_I): stable mass of the subset and its worst per-step escape probability."""
    M = induced_chain(P, pi)
    S = M.shape[0]
    inside = np.zeros(S, dtype=bool)
    inside[np.asarray(list(subset), dtype=np.int64)] = True
    stay = np.asarray(M[:, inside].sum(axis=1)).ravel()
    escape = 1 - stay[inside]
    return float(psi[inside].sum()), float(max(0.0, escape.max(initial=0.0)))


def mse_bound(h: float, delta_I: float, gamma: float, r_max: float) -> float:
    g = 1 - gamma
    core = 2 * (1 - h) + delta_I + delta_I ** 2 * gamma ** 2 / g + delta_I ** 2 * gamma ** 4 / g ** 2
    return core * 2 * r_max ** 2 / g ** 2


def l_bound(h: float, gamma: float, r_max: float) -> float:
    return 4 * (1 - h) * r_max ** 2 / (1 - gamma) ** 2


def l_tilde_bound(h, gamma, r_max, delta_P, delta_pi, delta_R) -> float:
    lam = (1 - delta_P) * (1 - delta_pi)
    return (4 * (1 - h) + gamma ** 2 * (1 + 2 * lam - 3 * lam ** 2)) * r_max ** 2 / (1 - gamma) ** 2 + delta_R


# cycle statistics of random successor maps -----------------------------------

@numba.njit(cache=True)
def _cycle_sample(S, rng, succ, seen, stamp):
    """One random map on S states, successors drawn lazily.

    Returns (C1, L1, C): first cycle length and path length from state 0,
    and the total number of states lying on cycles.
    """
    for i in range(S):
        succ[i] = -1
        seen[i] = -1
        stamp[i] = -1
    C1 = 0
    L1 = 0
    total = 0
    clock = 0
    for root in range(S):
        if seen[root] >= 0:
            continue
        s = root
        while seen[s] < 0:
            seen[s] = root
            stamp[s] = clock
            clock += 1
            if succ[s] < 0:
                succ[s] = rng.integers(0, S)
            s = succ[s]
        if seen[s] == root:  # closed a new cycle on this walk
            length = clock - stamp[s]
            total += length
            if root == 0:
                C1 = length
                L1 = clock
    return C1, L1, total


@numba.njit(cache=True)
def _cycle_batch(S, n, rng):
    out = np.empty((n, 3), np.int64)
    succ = np.empty(S, np.int64)
    seen = np.empty(S, np.int64)
    stamp = np.empty(S, np.int64)
    for k in range(n):
        c1, l1, c = _cycle_sample(S, rng, succ, seen, stamp)
        out[k, 0] = c1
        out[k, 1] = l1
        out[k, 2] = c
    return out


@dataclass
class CycleStats:
    S: int
    n_samples: int
    mean_c1: float
    var_c1: float
    mean_c: float
    mean_l1: float


def cycle_samples(S: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Raw (C1, L1, C) rows."""
    if S < 2:
        raise InvalidArgument("need S >= 2")
    return _cycle_batch(S, n_samples, rng)


def cycle_statistics(S: int, n_samples: int, rng: np.random.Generator) -> CycleStats:
    x = cycle_samples(S, n_samples, rng).astype(float)
    return CycleStats(S, n_samples, x[:, 0].mean(), x[:, 0].var(ddof=1), x[:, 2].mean(), x[:, 1].mean())


def path_length_pmf(S: int) -> np.ndarray:
    """P(L1 = j) for j = 1..S, from Pr(C1=i, L1=j) = (S-1)!/(S^j (S-j)!) summed over i <= j."""
    j = np.arange(1, S + 1)
    logp = np.log(j) + math.lgamma(S) - j * math.log(S) - np.array([math.lgamma(S - k + 1) for k in j])
    return np.exp(logp)


def exact_c1_moments(S: int) -> tuple[float, float]:
    """Exact E(C1) and Var(C1); C1 is uniform on 1..L1 given L1."""
    j = np.arange(1, S + 1)
    p = path_length_pmf(S)
    m1 = np.sum(p * (j + 1) / 2)
    m2 = np.sum(p * (j + 1) * (2 * j + 1) / 6)
    return float(m1), float(m2 - m1 ** 2)


def exact_mean_cyclic_states(S: int) -> float:
    """E(C) = sum_k S!/((S-k)! S^k), the expected number of cyclic points."""
    k = np.arange(1, S + 1)
    logt = math.lgamma(S + 1) - np.array([math.lgamma(S - x + 1) for x in k]) - k * math.log(S)
    return float(np.exp(logt).sum())
