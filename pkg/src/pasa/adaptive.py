"""Visit-frequency tracking and periodic regeneration of the split vector.

The fast path lives in compiled helpers (``observe_state``,
``regenerate_split_vector``). ``PasaState`` wraps them for use from Python
and from the SARSA loop.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Literal

import numba
import numpy as np

from .errors import InvalidArgument
from .partition import OrderedPartition, build_base_partition, initial_split_vector

ThresholdMode = Literal["additive", "multiplicative"]
CounterMode = Literal["per-step", "batched"]
PreserveMode = Literal["interval", "index"]

PER_STEP, BATCHED = 0, 1
ADDITIVE, MULTIPLICATIVE = 0, 1


@dataclass
class PasaParams:
    varsigma: float | np.ndarray = 1e-8
    vartheta: float = 0.9
    nu: int = 50_000
    threshold_mode: ThresholdMode = "multiplicative"
    counter_mode: CounterMode = "batched"
    preserve: PreserveMode = "interval"

    def __post_init__(self):
        if self.nu < 1:
            raise InvalidArgument(f"nu must be >= 1, got {self.nu}")
        vs = np.asarray(self.varsigma, dtype=float)
        # 0 is accepted as a degenerate "frozen estimates" setting
        if np.any(vs < 0) or np.any(vs > 1):
            raise InvalidArgument(f"varsigma must lie in [0,1], got {self.varsigma}")
        if vs.ndim and self.counter_mode != "per-step":
            raise InvalidArgument("a per-index varsigma vector needs counter_mode='per-step'")
        if self.threshold_mode == "additive":
            if not self.vartheta > 0:
                raise InvalidArgument("additive vartheta must be > 0")
        elif self.threshold_mode == "multiplicative":
            if not 0 < self.vartheta < 1:
                raise InvalidArgument("multiplicative vartheta must lie in (0,1)")
        else:
            raise InvalidArgument(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.counter_mode not in ("per-step", "batched"):
            raise InvalidArgument(f"unknown counter_mode {self.counter_mode!r}")
        if self.preserve not in ("interval", "index"):
            raise InvalidArgument(f"unknown preserve mode {self.preserve!r}")

    def varsigma_vector(self, X: int) -> np.ndarray:
        vs = np.asarray(self.varsigma, dtype=np.float64)
        if vs.ndim == 0:
            return np.full(X, float(vs))
        if vs.shape != (X,):
            raise InvalidArgument(f"varsigma vector must have length X={X}")
        return vs.copy()

    @property
    def batched_step(self) -> float:
        """Step size for one batched fold standing in for ``nu`` per-step folds."""
        vs = float(self.varsigma)
        return 1.0 if vs == 1.0 else -math.expm1(self.nu * math.log1p(-vs))


@dataclass
class RepartitionReport:
    iteration: int
    old_rho: tuple[int, ...]
    new_rho: tuple[int, ...]
    cells_changed: tuple[int, ...]
    u_bar: np.ndarray = field(repr=False)

    @property
    def changed(self) -> bool:
        return self.old_rho != self.new_rho

    def to_json(self) -> str:
        return json.dumps({"iteration": self.iteration, "old_rho": list(self.old_rho),
                           "new_rho": list(self.new_rho),
                           "cells_changed": list(self.cells_changed),
                           "u_bar": [float(x) for x in self.u_bar]})


@numba.njit(cache=True)
def observe_state(mode, cell, parent, u_bar, counts, varsigma, mark):
    """Record a visit to a state lying in 0-based ``cell``.

    Per-step mode applies the stochastic-approximation update to every bar
    set. Batched mode only bumps the cell's counter; bar-set counts are
    recovered at fold time by summing up the nesting tree.
    """
    if mode == BATCHED:
        counts[cell] += 1
        return
    j = cell
    while j >= 0:
        mark[j] = 1
        j = parent[j]
    for j in range(u_bar.shape[0]):
        u_bar[j] += varsigma[j] * (mark[j] - u_bar[j])
        mark[j] = 0


@numba.njit(cache=True)
def fold_batched_counts(counts, parent, u_bar, step, nu):
    """Fold per-cell visit counts into the bar-set estimates and clear them."""
    X = counts.shape[0]
    bar = counts.astype(np.float64)
    for c in range(X - 1, -1, -1):  # children always have larger indices than parents
        if parent[c] >= 0:
            bar[parent[c]] += bar[c]
    for j in range(X):
        u_bar[j] += step * (bar[j] / nu - u_bar[j])
        counts[j] = 0


@numba.njit(cache=True)
def _better(u, i, j):
    """Winner of two candidate cells, -1 meaning none; ``i < j`` so ties go to ``i``."""
    if i < 0:
        return j
    if j < 0:
        return i
    return i if u[i] >= u[j] else j


@numba.njit(cache=True)
def _set_leaf(tree, u, P, i, value):
    k = P + i
    tree[k] = value
    k >>= 1
    while k:
        tree[k] = _better(u, tree[2 * k], tree[2 * k + 1])
        k >>= 1


@numba.njit(cache=True)
def regenerate_split_vector(u_bar, base_lo, base_hi, rho, vartheta, mode):
    """Rebuild rho and the cells from the current estimates.

    The largest-estimate splittable cell (lowest index on ties) comes from a
    tournament tree, so a rebuild costs O(X log X).
    Returns (rho, lo, hi, bar_lo, bar_hi, u) with 1-based rho and states.
    """
    X0 = base_lo.shape[0]
    n = rho.shape[0]
    X = X0 + n
    u = u_bar.copy()
    new_rho = rho.copy()
    lo = np.empty(X, np.int64)
    hi = np.empty(X, np.int64)
    lo[:X0] = base_lo
    hi[:X0] = base_hi
    bar_lo = lo.copy()
    bar_hi = hi.copy()
    P = 1
    while P < X:
        P <<= 1
    tree = np.full(2 * P, -1, np.int64)
    for i in range(X0):
        if lo[i] < hi[i]:
            tree[P + i] = i
    for k in range(P - 1, 0, -1):
        tree[k] = _better(u, tree[2 * k], tree[2 * k + 1])
    for k in range(n):
        m = X0 + k
        imax = tree[1]
        if imax < 0:
            raise ValueError("no splittable cell; X must not exceed S")
        t = new_rho[k] - 1
        singleton = lo[t] == hi[t]
        keep = 0.0 if singleton else u[t]
        if mode == ADDITIVE:
            move = keep < u[imax] - vartheta
        else:
            move = keep < u[imax] * vartheta
        if move or singleton:
            t = imax
            new_rho[k] = imax + 1
        u[t] -= u[m]
        mid = lo[t] + (hi[t] - lo[t] - 1) // 2
        lo[m] = mid + 1
        hi[m] = hi[t]
        hi[t] = mid
        bar_lo[m] = lo[m]
        bar_hi[m] = hi[m]
        _set_leaf(tree, u, P, t, t if lo[t] < hi[t] else -1)
        if lo[m] < hi[m]:
            _set_leaf(tree, u, P, m, m)
    return new_rho, lo, hi, bar_lo, bar_hi, u


@numba.njit(cache=True)
def carry_estimates(u_bar, old_lo, old_hi, new_lo, new_hi, X0, S):
    """Give each re-created bar set the estimate of an identical old interval, if any.

    Distinct bar sets never share an interval, so the match is unique.
    """
    X = u_bar.shape[0]
    key = old_lo * (S + 1) + old_hi
    order = np.argsort(key)
    sorted_key = key[order]
    out = u_bar.copy()
    for j in range(X0, X):
        if new_lo[j] == old_lo[j] and new_hi[j] == old_hi[j]:
            continue
        k = new_lo[j] * (S + 1) + new_hi[j]
        pos = np.searchsorted(sorted_key, k)
        if pos < X and sorted_key[pos] == k:
            out[j] = u_bar[order[pos]]
    return out


@numba.njit(cache=True)
def _repartition_kernel(counts, parent, u_bar, step, nu, batched, base_lo, base_hi, rho,
                        vartheta, mode, old_lo, old_hi, old_bar_lo, old_bar_hi, carry, S):
    """Fold, rebuild and, when rho moved, carry estimates and rebuild the lookup.

    One compiled call per event: right after a long stretch of the hot loop
    every separate dispatch is slow, so the event does all of its work here.
    """
    if batched:
        fold_batched_counts(counts, parent, u_bar, step, nu)
    new_rho, lo, hi, bar_lo, bar_hi, u = regenerate_split_vector(
        u_bar, base_lo, base_hi, rho, vartheta, mode)
    X0 = base_lo.shape[0]
    changed = False
    for k in range(rho.shape[0]):
        if new_rho[k] != rho[k]:
            changed = True
            break
    if not changed:
        return False, new_rho, lo, hi, bar_lo, bar_hi, u, u_bar, lo, lo, lo
    if carry:
        u_bar = carry_estimates(u_bar, old_bar_lo, old_bar_hi, bar_lo, bar_hi, X0, S)
    parent[X0:] = new_rho - 1
    order = np.argsort(lo, kind="mergesort")
    starts = lo[order] - 1
    moved = np.flatnonzero((old_lo != lo) | (old_hi != hi)) + 1
    return True, new_rho, lo, hi, bar_lo, bar_hi, u, u_bar, starts, order, moved


class PasaState:
    """Mutable PASA bookkeeping for one agent."""

    def __init__(self, partition: OrderedPartition, params: PasaParams):
        if partition.X > partition.S:
            raise InvalidArgument(f"X={partition.X} exceeds S={partition.S}")
        self.params = params
        self.partition = partition
        X = partition.X
        self.u_bar = np.zeros(X)
        self.u = np.zeros(X)
        self.counter = 0
        self.visit_counters = np.zeros(X, dtype=np.int64)
        self.iteration = 0
        self.varsigma = params.varsigma_vector(X)
        self._mark = np.zeros(X)
        self._refresh()

    @classmethod
    def create(cls, S: int, X: int, X0: int | None, params: PasaParams) -> "PasaState":
        """Base cells from the fixed sequence, initial rho from the largest-cell rule."""
        X0 = X // 2 if X0 is None else X0
        if not 1 <= X0 <= X <= S:
            raise InvalidArgument(f"need 1 <= X0 <= X <= S, got X0={X0}, X={X}, S={S}")
        base = build_base_partition(S, X0)
        rho = initial_split_vector(base, X - X0)
        return cls(OrderedPartition(S, base.base_cells, rho), params)

    def _refresh(self):
        p = self.partition
        self._rho = np.asarray(p.rho, dtype=np.int64)
        self.parent = p.parent_array()
        self.starts, self.owner = p.lookup_arrays()
        # writable copies: compiled calls dispatch slower on read-only arrays
        self._cells = tuple(x.copy() for x in p.arrays())
        _, _, bar_lo, bar_hi = self._cells
        self._base_lo = bar_lo[: p.X0].copy()
        self._base_hi = bar_hi[: p.X0].copy()

    @property
    def counter_mode(self) -> int:
        return PER_STEP if self.params.counter_mode == "per-step" else BATCHED

    def cell0(self, s: int) -> int:
        """0-based cell of a 1-based state via the flat lookup."""
        return int(self.owner[np.searchsorted(self.starts, s - 1, side="right") - 1])

    def update_visit_estimates(self, s: int):
        observe_state(self.counter_mode, self.cell0(s), self.parent, self.u_bar,
                      self.visit_counters, self.varsigma, self._mark)

    def tick(self, s: int) -> RepartitionReport | None:
        self.update_visit_estimates(s)
        self.iteration += 1
        self.counter += 1
        if self.counter == self.params.nu:
            self.counter = 0
            return self.repartition()
        return None

    def fold(self):
        if self.counter_mode == BATCHED:
            fold_batched_counts(self.visit_counters, self.parent, self.u_bar,
                                self.params.batched_step, float(self.params.nu))

    def repartition(self) -> RepartitionReport:
        old = self.partition
        old_lo, old_hi, old_bar_lo, old_bar_hi = self._cells
        params = self.params
        mode = ADDITIVE if params.threshold_mode == "additive" else MULTIPLICATIVE
        (changed, new_rho, lo, hi, bar_lo, bar_hi, self.u, self.u_bar, starts, order,
         moved) = _repartition_kernel(
            self.visit_counters, self.parent, self.u_bar, params.batched_step, float(params.nu),
            self.counter_mode == BATCHED, self._base_lo, self._base_hi, self._rho,
            float(params.vartheta), mode, old_lo, old_hi, old_bar_lo, old_bar_hi,
            params.preserve == "interval", old.S)
        if not changed:
            # same split vector: the partition and lookup arrays stay as they are
            return RepartitionReport(self.iteration, old.rho, old.rho, (), self.u_bar.copy())
        new = OrderedPartition._from_arrays(old.S, old.X0, new_rho, lo, hi, bar_lo, bar_hi,
                                            lookup=(starts, order))
        self.partition = new
        self._rho = new_rho
        self._cells = (lo, hi, bar_lo, bar_hi)
        self.starts, self.owner = starts, order
        return RepartitionReport(self.iteration, old.rho, new.rho, tuple(moved.tolist()),
                                 self.u_bar.copy())

class EventLog:
    """Line-delimited JSON log of repartition events."""

    def __init__(self, stream: IO[str]):
        self.stream = stream

    def write(self, report: RepartitionReport):
        self.stream.write(report.to_json() + "\n")
