"""Table-backed environments: GARNET, Gridworld and the depot/stores logistics task.

Every environment is a ``TabularEnv``. From (state, action) the successor
is ``succ[s, a]`` with probability ``1 - noise[s, a]``. Otherwise it is a
uniformly random state. Rewards are deterministic per pair. States and
actions are 0-based throughout this module.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError, InvalidArgument

TABLE_FORMAT = "pasa-tabular-env"
TABLE_VERSION = 1


@dataclass(frozen=True)
class GarnetSpec:
    S: int
    A: int = 2
    zeta: float = 30.0
    delta: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.S < 1 or self.A < 1:
            raise InvalidArgument("GARNET needs S >= 1 and A >= 1")
        if not 0 < self.zeta <= self.S:
            raise InvalidArgument(f"zeta must lie in (0, S], got {self.zeta}")
        if not 0 <= self.delta <= 1:
            raise InvalidArgument(f"delta must lie in [0,1], got {self.delta}")


@dataclass(frozen=True)
class GridworldSpec:
    N: int = 32
    r: int = 24
    random_teleport: bool = False
    walls: tuple[tuple[int, int], ...] = ()
    seed: int | None = None

    def __post_init__(self):
        if self.N < 1 or self.r < 0:
            raise InvalidArgument("Gridworld needs N >= 1 and r >= 0")
        if 2 * self.r + len(self.walls) > self.N * self.N:
            raise InvalidArgument(f"cannot place {self.r} reward/start pairs on a {self.N}x{self.N} grid")


@dataclass(frozen=True)
class LogisticsSpec:
    capacities: tuple[int, ...] = (12, 3, 4, 3, 6)   # depot first
    transport_cost: tuple[float, float] = (-1.2, -0.6)
    order_cost: float = -2.0
    sale_revenue: float = 7.0
    sales_rate: int = 1
    rent_ranges: tuple[tuple[float, float], ...] = (
        (-0.2, -0.05), (-0.05, -0.01), (-0.08, -0.03), (-0.08, -0.01), (-0.4, -0.001))
    seed: int | None = None

    def __post_init__(self):
        if len(self.rent_ranges) != len(self.capacities):
            raise InvalidArgument("one rent range per location is required")
        if len(self.capacities) < 2:
            raise InvalidArgument("need a depot and at least one store")

    @property
    def n_stores(self) -> int:
        return len(self.capacities) - 1


@dataclass
class TabularEnv:
    succ: np.ndarray            # (S, A) int64
    reward: np.ndarray          # (S, A) float64
    noise: np.ndarray           # (S, A) float64, probability of a uniform jump
    initial_state: int
    name: str = "tabular"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.succ = np.ascontiguousarray(self.succ, dtype=np.int64)
        self.reward = np.ascontiguousarray(self.reward, dtype=np.float64)
        self.noise = np.ascontiguousarray(np.broadcast_to(self.noise, self.succ.shape), dtype=np.float64)
        if self.succ.ndim != 2 or self.reward.shape != self.succ.shape:
            raise InvalidArgument("succ and reward must both be (S, A)")
        S = self.succ.shape[0]
        if self.succ.min(initial=0) < 0 or self.succ.max(initial=0) >= S:
            raise InvalidArgument("successor index out of range")
        if np.any(self.noise < 0) or np.any(self.noise > 1):
            raise InvalidArgument("noise probabilities must lie in [0,1]")
        if not 0 <= self.initial_state < S:
            raise InvalidArgument("initial state out of range")

    @property
    def S(self) -> int:
        return self.succ.shape[0]

    @property
    def A(self) -> int:
        return self.succ.shape[1]

    @property
    def deterministic(self) -> bool:
        return not self.noise.any()

    @property
    def reward_bound(self) -> float:
        return float(np.abs(self.reward).max(initial=0.0))

    def expect(self, v: np.ndarray) -> np.ndarray:
        """E[v(s') | s, a] as an (S, A) array."""
        out = v[self.succ]
        if not self.deterministic:
            out = (1 - self.noise) * out + self.noise * v.mean()
        return out

    def transition_matrix(self, max_dense_entries: int = 50_000_000) -> sp.csr_matrix:
        """Sparse (S*A, S) matrix with row ``s*A + a`` holding P(.|s,a)."""
        S, A = self.S, self.A
        rows = np.arange(S * A)
        P = sp.csr_matrix(((1 - self.noise).ravel(), (rows, self.succ.ravel())), shape=(S * A, S))
        if not self.deterministic:
            if S * S * A > max_dense_entries:
                raise CapacityError(f"noisy transitions need {S * S * A} entries")
            P = P + sp.csr_matrix(np.repeat(self.noise.reshape(-1, 1) / S, S, axis=1))
        return P.tocsr()

    def dense_transitions(self) -> np.ndarray:
        return self.transition_matrix().toarray().reshape(self.S, self.A, self.S)

    # serialisation
    def save(self, path: str | Path):
        """Write an ``.npz`` archive with a versioned JSON header."""
        header = {"format": TABLE_FORMAT, "version": TABLE_VERSION, "name": self.name,
                  "S": self.S, "A": self.A, "initial_state": int(self.initial_state),
                  "meta": self.meta}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)),
                     succ=self.succ, reward=self.reward, noise=self.noise)

    @classmethod
    def load(cls, path: str | Path) -> "TabularEnv":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("format") != TABLE_FORMAT:
                raise InvalidArgument(f"{path}: not a {TABLE_FORMAT} file")
            if header.get("version") != TABLE_VERSION:
                raise InvalidArgument(f"{path}: unsupported table version {header.get('version')}")
            return cls(z["succ"], z["reward"], z["noise"], header["initial_state"],
                       header["name"], header["meta"])


def step(env: TabularEnv, s: int, a: int, rng: np.random.Generator) -> tuple[int, float]:
    """Sample one transition. The RNG is only consulted for noisy pairs."""
    if not (0 <= s < env.S and 0 <= a < env.A):
        raise InvalidArgument(f"invalid state/action ({s}, {a})")
    r = float(env.reward[s, a])
    q = env.noise[s, a]
    if q > 0 and rng.random() < q:
        return int(rng.integers(env.S)), r
    return int(env.succ[s, a]), r


def _rng(spec, rng):
    if rng is not None:
        return rng
    return np.random.default_rng(spec.seed)


def sample_garnet(spec: GarnetSpec, rng: np.random.Generator | None = None) -> TabularEnv:
    """Draw order: successor table, then reward table, then the initial state."""
    rng = _rng(spec, rng)
    S, A = spec.S, spec.A
    succ = rng.integers(0, S, size=(S, A))
    reward = np.where(rng.random((S, A)) < spec.zeta / S, float(S), 0.0)
    s1 = int(rng.integers(S))
    return TabularEnv(succ, reward, np.full((S, A), float(spec.delta)), s1, "garnet",
                      {"spec": asdict(spec)})


UP, DOWN, LEFT, RIGHT = range(4)
_MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])


def sample_gridworld(spec: GridworldSpec, rng: np.random.Generator | None = None) -> TabularEnv:
    """State ``row * N + col``. Moving into a reward position pays 1 and relocates the agent."""
    rng = _rng(spec, rng)
    N, S = spec.N, spec.N * spec.N
    wall = np.zeros(S, dtype=bool)
    for row, col in spec.walls:
        wall[row * N + col] = True
    free = np.flatnonzero(~wall)
    picks = rng.choice(free, size=2 * spec.r, replace=False)
    rewards_at, starts = picks[: spec.r], picks[spec.r:]
    target = np.full(S, -1, dtype=np.int64)
    target[rewards_at] = starts

    rows, cols = np.divmod(np.arange(S), N)
    succ = np.empty((S, 4), dtype=np.int64)
    reward = np.zeros((S, 4))
    noise = np.zeros((S, 4))
    for a, (dr, dc) in enumerate(_MOVES):
        nr, nc = rows + dr, cols + dc
        inside = (nr >= 0) & (nr < N) & (nc >= 0) & (nc < N)
        nxt = np.where(inside, nr * N + nc, np.arange(S))
        nxt = np.where(wall[nxt], np.arange(S), nxt)
        hit = target[nxt] >= 0
        reward[hit, a] = 1.0
        if spec.random_teleport:
            noise[hit, a] = 1.0
        succ[:, a] = np.where(hit, target[nxt], nxt)
    open_cells = np.setdiff1d(free, rewards_at)
    s1 = int(rng.choice(open_cells))
    return TabularEnv(succ, reward, noise, s1, "gridworld",
                      {"spec": {**asdict(spec), "walls": [list(w) for w in spec.walls]},
                       "reward_positions": rewards_at.tolist(), "start_positions": starts.tolist()})


# Logistics -----------------------------------------------------------------
# State factors, in encoding order: stock at each location (depot first),
# truck location, truck cargo flag. Each factor takes ceil(log2(levels)) bits,
# most significant factor first.

def logistics_levels(spec: LogisticsSpec) -> tuple[int, ...]:
    return tuple(c + 1 for c in spec.capacities) + (len(spec.capacities), 2)


def logistics_bits(spec: LogisticsSpec) -> tuple[int, ...]:
    return tuple(max(1, int(np.ceil(np.log2(n)))) for n in logistics_levels(spec))


def logistics_encode(spec: LogisticsSpec, factors) -> np.ndarray:
    factors = np.asarray(factors, dtype=np.int64)
    code = np.zeros(factors.shape[:-1], dtype=np.int64)
    for f, b in zip(np.moveaxis(factors, -1, 0), logistics_bits(spec)):
        code = (code << b) | f
    return code


def logistics_decode(spec: LogisticsSpec, code) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    bits = logistics_bits(spec)
    out = np.empty(code.shape + (len(bits),), dtype=np.int64)
    for i in range(len(bits) - 1, -1, -1):
        out[..., i] = code & ((1 << bits[i]) - 1)
        code = code >> bits[i]
    return out


def logistics_actions(spec: LogisticsSpec) -> list[str]:
    locs = len(spec.capacities)
    return ["order", "load"] + [f"move{l}" for l in range(locs)] + ["unload"]


def sample_logistics(spec: LogisticsSpec, rng: np.random.Generator | None = None) -> TabularEnv:
    """Precompute the deterministic table over every 18-bit input code.

    Per step, in order: the chosen action takes effect; every store holding
    stock sells ``sales_rate`` units (capped by its stock); rent is charged on
    the stock left at each location. Codes that decode to no valid state are
    absorbing with zero reward.
    """
    rng = _rng(spec, rng)
    transport = float(rng.uniform(*spec.transport_cost))
    rents = np.array([rng.uniform(lo, hi) for lo, hi in spec.rent_ranges])
    caps = np.array(spec.capacities, dtype=np.int64)
    L = len(caps)
    levels = np.array(logistics_levels(spec))
    S = 1 << int(sum(logistics_bits(spec)))
    codes = np.arange(S, dtype=np.int64)
    fac = logistics_decode(spec, codes)
    valid = np.all(fac < levels, axis=1)
    actions = logistics_actions(spec)
    A = len(actions)
    succ = np.repeat(codes[:, None], A, axis=1)
    reward = np.zeros((S, A))

    stock0 = fac[:, :L]
    loc0 = fac[:, L]
    cargo0 = fac[:, L + 1]
    idx = np.arange(S)
    for a, name in enumerate(actions):
        stock = stock0.copy()
        loc = loc0.copy()
        cargo = cargo0.copy()
        r = np.zeros(S)
        if name == "order":
            ok = stock[:, 0] < caps[0]
            stock[ok, 0] += 1
            r[ok] += spec.order_cost
        elif name == "load":
            here = stock[idx, np.minimum(loc, L - 1)]
            ok = (cargo == 0) & (here > 0) & (loc < L)
            stock[idx[ok], loc[ok]] -= 1
            cargo[ok] = 1
        elif name == "unload":
            room = stock[idx, np.minimum(loc, L - 1)] < caps[np.minimum(loc, L - 1)]
            ok = (cargo == 1) & room & (loc < L)
            stock[idx[ok], loc[ok]] += 1
            cargo[ok] = 0
        else:
            dest = int(name[4:])
            moved = loc != dest
            r[moved] += transport
            loc[:] = dest
        sold = np.minimum(stock[:, 1:], spec.sales_rate)
        stock[:, 1:] -= sold
        r += spec.sale_revenue * sold.sum(axis=1)
        r += stock @ rents
        nxt = logistics_encode(spec, np.column_stack([stock, loc, cargo]))
        succ[valid, a] = nxt[valid]
        reward[valid, a] = r[valid]
    s1 = int(logistics_encode(spec, np.zeros(L + 2, dtype=np.int64)))
    return TabularEnv(succ, reward, np.zeros((S, A)), s1, "logistics",
                      {"spec": asdict(spec), "transport_cost": transport,
                       "rents": rents.tolist(), "actions": actions})


def logistics_reachable(env: TabularEnv) -> np.ndarray:
    """States reachable from the initial state (breadth-first over the table)."""
    seen = np.zeros(env.S, dtype=bool)
    frontier = np.array([env.initial_state])
    seen[frontier] = True
    while frontier.size:
        nxt = np.unique(env.succ[frontier].ravel())
        nxt = nxt[~seen[nxt]]
        seen[nxt] = True
        frontier = nxt
    return np.flatnonzero(seen)
