"""Ordered interval partitions of the state range and their split history.

States and cell indices are 1-based here. Cell ``j`` lives at array
position ``j - 1``. The ``lookup_arrays`` / ``parent_array`` exports are
0-based and are what the compiled kernels consume.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, InvalidSplit, InvalidSplitVector


@dataclass(frozen=True)
class Interval:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo < 1 or self.hi < self.lo:
            raise InvalidArgument(f"bad interval [{self.lo},{self.hi}]")

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    def __contains__(self, s: int) -> bool:
        return self.lo <= s <= self.hi

    def __str__(self) -> str:
        return f"{self.lo}-{self.hi}"


def split_interval(lo: int, hi: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Halve ``[lo, hi]``; the lower child is never the larger one."""
    if hi <= lo:
        raise InvalidSplit(f"cell [{lo},{hi}] is a singleton")
    mid = lo + (hi - lo - 1) // 2
    return (lo, mid), (mid + 1, hi)


def splitting_sequence(n: int) -> list[int]:
    """First ``n`` terms of 1, 1,2, 1,2,3,4, 1..8, ..."""
    out: list[int] = []
    block = 1
    while len(out) < n:
        out.extend(range(1, block + 1))
        block *= 2
    return out[:n]


def _largest_cell(lo: np.ndarray, hi: np.ndarray, n: int) -> int:
    sizes = hi[:n] - lo[:n]
    return int(np.argmax(sizes)) + 1  # argmax returns the lowest index on ties


class OrderedPartition:
    """Base cells plus a split vector, with the derived cells and bar sets.

    Instances are immutable; ``split_cell`` returns a new partition.
    """

    __slots__ = ("S", "X0", "rho", "_lo", "_hi", "_bar_lo", "_bar_hi", "_tree", "_lookup")

    def __init__(self, S: int, base_cells: Sequence[tuple[int, int] | Interval],
                 rho: Iterable[int] = ()):
        base = [(c.lo, c.hi) if isinstance(c, Interval) else (int(c[0]), int(c[1]))
                for c in base_cells]
        if S < 1 or not base:
            raise InvalidArgument("need S >= 1 and at least one base cell")
        expect = 1
        for lo, hi in base:
            if lo != expect or hi < lo:
                raise InvalidArgument(f"base cells must tile [1,{S}] in order, got {base}")
            expect = hi + 1
        if expect != S + 1:
            raise InvalidArgument(f"base cells must tile [1,{S}] in order, got {base}")
        rho = tuple(int(r) for r in rho)
        X0 = len(base)
        X = X0 + len(rho)
        lo = np.empty(X, dtype=np.int64)
        hi = np.empty(X, dtype=np.int64)
        lo[:X0] = [b[0] for b in base]
        hi[:X0] = [b[1] for b in base]
        bar_lo, bar_hi = lo.copy(), hi.copy()
        for k, target in enumerate(rho, start=1):
            if not 1 <= target <= X0 + k - 1:
                raise InvalidSplitVector(f"rho[{k}]={target} outside [1,{X0 + k - 1}]")
            t = target - 1
            if lo[t] == hi[t]:
                raise InvalidSplitVector(f"rho[{k}]={target} targets a singleton")
            (_, mid), (ulo, uhi) = split_interval(int(lo[t]), int(hi[t]))
            hi[t] = mid
            lo[X0 + k - 1], hi[X0 + k - 1] = ulo, uhi
            bar_lo[X0 + k - 1], bar_hi[X0 + k - 1] = ulo, uhi
        self._set(S, X0, rho, lo, hi, bar_lo, bar_hi)

    def _set(self, S, X0, rho, lo, hi, bar_lo, bar_hi):
        self.S, self.X0, self.rho = int(S), int(X0), tuple(rho)
        for a in (lo, hi, bar_lo, bar_hi):
            a.setflags(write=False)
        self._lo, self._hi, self._bar_lo, self._bar_hi = lo, hi, bar_lo, bar_hi
        self._tree = None
        self._lookup = None

    @classmethod
    def _from_arrays(cls, S, X0, rho, lo, hi, bar_lo, bar_hi, lookup=None) -> "OrderedPartition":
        """Trusted constructor used by compiled repartition code."""
        obj = cls.__new__(cls)
        obj._set(S, X0, tuple(np.asarray(rho).tolist()), np.array(lo, dtype=np.int64),
                 np.array(hi, dtype=np.int64), np.array(bar_lo, dtype=np.int64),
                 np.array(bar_hi, dtype=np.int64))
        obj._lookup = lookup
        return obj

    # views
    @property
    def X(self) -> int:
        return len(self._lo)

    @property
    def base_cells(self) -> list[Interval]:
        return [Interval(int(a), int(b)) for a, b in zip(self._bar_lo[:self.X0], self._bar_hi[:self.X0])]

    @property
    def cells(self) -> list[Interval]:
        return [Interval(int(a), int(b)) for a, b in zip(self._lo, self._hi)]

    @property
    def bar_sets(self) -> list[Interval]:
        return [Interval(int(a), int(b)) for a, b in zip(self._bar_lo, self._bar_hi)]

    @property
    def sigma(self) -> np.ndarray:
        return self._lo == self._hi

    @property
    def base_sigma(self) -> np.ndarray:
        return self._bar_lo[:self.X0] == self._bar_hi[:self.X0]

    def cell(self, j: int) -> Interval:
        return Interval(int(self._lo[j - 1]), int(self._hi[j - 1]))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(lo, hi, bar_lo, bar_hi), 1-based state values, read-only."""
        return self._lo, self._hi, self._bar_lo, self._bar_hi

    def parent_array(self) -> np.ndarray:
        """0-based parent of each bar set in the nesting tree, -1 for base cells."""
        parent = np.full(self.X, -1, dtype=np.int64)
        if self.rho:
            parent[self.X0:] = np.asarray(self.rho, dtype=np.int64) - 1
        return parent

    def lookup_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted 0-based cell starts and the 0-based cell found at each start.

        The cell of 0-based state ``s`` is ``owner[searchsorted(starts, s, 'right') - 1]``.
        """
        if self._lookup is None:
            order = np.argsort(self._lo, kind="stable").astype(np.int64)
            self._lookup = (self._lo[order] - 1, order)
        return self._lookup

    @property
    def tree(self) -> "CellIndexTree":
        if self._tree is None:
            self._tree = CellIndexTree(self)
        return self._tree

    def __eq__(self, other) -> bool:
        return (isinstance(other, OrderedPartition) and self.S == other.S
                and self.X0 == other.X0 and self.rho == other.rho
                and np.array_equal(self._bar_lo[:self.X0], other._bar_lo[:other.X0]))

    def __hash__(self):
        return hash((self.S, self.X0, self.rho))

    def __repr__(self) -> str:
        return f"OrderedPartition(S={self.S}, X0={self.X0}, rho={self.rho})"

    def to_text(self) -> str:
        """One ``lo-hi:cell_index`` line per cell, in state order."""
        order = np.argsort(self._lo, kind="stable")
        return "".join(f"{self._lo[j]}-{self._hi[j]}:{j + 1}\n" for j in order)

    @classmethod
    def from_text(cls, text: str, S: int, X0: int, rho: Sequence[int]) -> "OrderedPartition":
        """Rebuild from (S, X0 base cells, rho) and check against a text dump."""
        records = {}
        for line in text.strip().splitlines():
            span, idx = line.split(":")
            lo, hi = span.split("-")
            records[int(idx)] = (int(lo), int(hi))
        base = _base_from_records(records, S, X0, rho)
        p = cls(S, base, rho)
        if p.to_text().strip() != text.strip():
            raise InvalidArgument("text dump is not consistent with the given split vector")
        return p


def _base_from_records(records, S, X0, rho):
    # undo splits in reverse: each split's upper child merges back into its target
    cells = dict(records)
    for k in range(len(rho), 0, -1):
        t = rho[k - 1]
        up = cells.pop(X0 + k)
        cells[t] = (cells[t][0], up[1])
    return [cells[j] for j in range(1, X0 + 1)]


def build_base_partition(S: int, X0: int) -> OrderedPartition:
    """X0 near-equal base cells produced by splitting [1,S] along the fixed sequence.

    A sequence entry that lands on a singleton (only possible when X0 > S/2)
    is replaced by the largest cell. Cells are renumbered by position.
    """
    if not 1 <= X0 <= S:
        raise InvalidArgument(f"need 1 <= X0 <= S, got X0={X0}, S={S}")
    lo = np.empty(X0, dtype=np.int64)
    hi = np.empty(X0, dtype=np.int64)
    lo[0], hi[0] = 1, S
    for k, target in enumerate(splitting_sequence(X0 - 1), start=1):
        t = target - 1
        if lo[t] == hi[t]:
            t = _largest_cell(lo, hi, k) - 1
        (_, mid), (ulo, uhi) = split_interval(int(lo[t]), int(hi[t]))
        hi[t] = mid
        lo[k], hi[k] = ulo, uhi
    order = np.argsort(lo)
    return OrderedPartition(S, list(zip(lo[order].tolist(), hi[order].tolist())))


def initial_split_vector(base: OrderedPartition, n_splits: int) -> tuple[int, ...]:
    """Split the largest cell (lowest index on ties) ``n_splits`` times.

    Deterministic, never targets a singleton, and keeps cells near-equal.
    """
    X0 = base.X0
    X = X0 + n_splits
    if X > base.S:
        raise InvalidArgument(f"cannot hold X={X} nonempty cells in S={base.S} states")
    lo = np.empty(X, dtype=np.int64)
    hi = np.empty(X, dtype=np.int64)
    lo[:X0], hi[:X0] = base._lo, base._hi
    rho = []
    for n in range(X0, X):
        t = _largest_cell(lo, hi, n) - 1
        (_, mid), (ulo, uhi) = split_interval(int(lo[t]), int(hi[t]))
        hi[t] = mid
        lo[n], hi[n] = ulo, uhi
        rho.append(t + 1)
    return tuple(rho)


def equal_partition(S: int, X: int) -> OrderedPartition:
    """X contiguous cells whose sizes differ by at most one (the fixed-aggregation layout)."""
    if not 1 <= X <= S:
        raise InvalidArgument(f"need 1 <= X <= S, got X={X}, S={S}")
    sizes = np.full(X, S // X, dtype=np.int64)
    sizes[: S % X] += 1
    hi = np.cumsum(sizes)
    lo = hi - sizes + 1
    return OrderedPartition(S, list(zip(lo.tolist(), hi.tolist())))


def split_cell(partition: OrderedPartition, k: int, target: int) -> OrderedPartition:
    if k != len(partition.rho) + 1:
        raise InvalidArgument(f"next split step is {len(partition.rho) + 1}, got k={k}")
    if not 1 <= target <= partition.X:
        raise InvalidSplit(f"no cell {target}")
    if partition.sigma[target - 1]:
        raise InvalidSplit(f"cell {target} is a singleton")
    return OrderedPartition(partition.S, partition.base_cells, partition.rho + (target,))


def apply_split_vector(base: OrderedPartition, rho: Iterable[int]) -> OrderedPartition:
    if base.rho:
        raise InvalidArgument("expected a base partition with an empty split vector")
    return OrderedPartition(base.S, base.base_cells, rho)


class CellIndexTree:
    """Binary search tree over base boundaries and then over the split history.

    Internal node ``n`` sends states ``<= split_at[n]`` left. Split-history
    nodes record the cell created by that split in ``created``; walking right
    through such a node enters that cell's bar set.
    """

    def __init__(self, partition: OrderedPartition):
        self.partition = partition
        X0 = partition.X0
        rho = partition.rho
        base_lo = partition._bar_lo[:X0].tolist()
        base_hi = partition._bar_hi[:X0].tolist()
        splits_of: dict[int, list[int]] = {}
        for k, t in enumerate(rho, start=1):
            splits_of.setdefault(t, []).append(k)
        self.split_at: list[int] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf: list[int] = []     # cell index at leaves, 0 otherwise
        self.created: list[int] = []  # new cell index at split nodes, 0 otherwise
        self.owner: list[int] = []    # cell whose history the node belongs to, 0 for base nodes

        def node(split_at=0, leaf=0, created=0, owner=0):
            self.split_at.append(split_at)
            self.left.append(-1)
            self.right.append(-1)
            self.leaf.append(leaf)
            self.created.append(created)
            self.owner.append(owner)
            return len(self.leaf) - 1

        def history(cell: int, lo: int, hi: int, pos: int) -> int:
            steps = splits_of.get(cell, [])
            if pos == len(steps):
                return node(leaf=cell, owner=cell)
            k = steps[pos]
            (_, mid), (ulo, uhi) = split_interval(lo, hi)
            n = node(split_at=mid, created=X0 + k, owner=cell)
            self.left[n] = history(cell, lo, mid, pos + 1)
            self.right[n] = history(X0 + k, ulo, uhi, 0)
            return n

        def base_tree(i: int, j: int) -> int:
            if i == j:
                return history(i + 1, base_lo[i], base_hi[i], 0)
            m = (i + j) // 2
            n = node(split_at=base_hi[m])
            self.left[n] = base_tree(i, m)
            self.right[n] = base_tree(m + 1, j)
            return n

        self.root = base_tree(0, X0 - 1)

    def _check(self, state: int):
        if not 1 <= state <= self.partition.S:
            raise InvalidArgument(f"state {state} outside [1,{self.partition.S}]")

    def cell_of(self, state: int) -> int:
        self._check(state)
        n = self.root
        while not self.leaf[n]:
            n = self.left[n] if state <= self.split_at[n] else self.right[n]
        return self.leaf[n]

    def bar_membership(self, state: int) -> set[int]:
        self._check(state)
        n = self.root
        while self.owner[n] == 0:
            n = self.left[n] if state <= self.split_at[n] else self.right[n]
        found = {self.owner[n]}  # the base cell
        while not self.leaf[n]:
            if state <= self.split_at[n]:
                n = self.left[n]
            else:
                found.add(self.created[n])
                n = self.right[n]
        return found

    def depth(self) -> int:
        best, stack = 0, [(self.root, 0)]
        while stack:
            n, d = stack.pop()
            if self.leaf[n]:
                best = max(best, d)
            else:
                stack += [(self.left[n], d + 1), (self.right[n], d + 1)]
        return best


def cell_of(tree: CellIndexTree, state: int) -> int:
    return tree.cell_of(state)


def bar_membership(partition: OrderedPartition, state: int) -> set[int]:
    return partition.tree.bar_membership(state)
