"""Latent true counts: free level-1 class counts plus derived aggregates."""

from __future__ import annotations

import numpy as np

from ._kernels import loglik_grid
from .errors import NumericalError
from .hierarchy import CountTable
from .likelihood import CellLikelihoodTable


class LatentState:
    """Level-1 class counts with structurally derived totals and aggregates.

    ``counts[k-1]`` is an ``(N_k, M)`` array at level ``k``; only the first
    ``M - 1`` columns of level 1 are free. Everything else changes only
    through :meth:`apply_move`, which cascades a +/-1 to the five derived
    cells. Per-cell log-likelihood terms are cached in ``ll``.
    """

    def __init__(self, obs: CountTable, lik: CellLikelihoodTable, mb_counts):
        mb = np.asarray(mb_counts, dtype=np.int64)
        h = obs.hierarchy
        if mb.shape != (h.sizes[0], obs.M - 1):
            raise ValueError(f"level-1 counts must have shape {(h.sizes[0], obs.M - 1)}")
        if np.any(mb < 0):
            raise ValueError("latent counts must be non-negative")
        self.obs = obs
        self.lik = lik
        self.hierarchy = h
        truth = CountTable.from_level1(h, mb)
        self.counts = [v.copy() for v in truth.values]
        self.ll = [np.zeros(v.shape) for v in self.counts]
        self.loglik = 0.0
        self.recompute()

    @property
    def M(self) -> int:
        return self.obs.M

    @property
    def mb_counts(self) -> np.ndarray:
        view = self.counts[0][:, :-1]
        view.flags.writeable = False
        return view

    @property
    def values(self):
        return tuple(self.counts)

    def recompute(self) -> float:
        """Refresh every cached term from scratch and return the total."""
        args = self.lik.kernel_args()
        for k in range(3):
            self.ll[k] = loglik_grid(self.obs.values[k], self.counts[k], *args)
        self.loglik = float(sum(v.sum() for v in self.ll))
        return self.loglik

    def full_loglik(self) -> float:
        """Independent recomputation through the vectorized likelihood table."""
        return float(sum(self.lik.log_lik_array(o, c, check=False).sum() for o, c in zip(self.obs.values, self.counts)))

    def _affected(self, unit: int, cls: int):
        h = self.hierarchy
        u2 = int(h.parent1[unit])
        u3 = int(h.parent2[u2])
        tot = self.M - 1
        return [(0, unit, cls), (0, unit, tot), (1, u2, cls), (1, u2, tot), (2, u3, cls), (2, u3, tot)]

    def delta_loglik(self, unit: int, cls: int, delta: int) -> float:
        if cls < 0 or cls >= self.M - 1:
            raise ValueError("only class cells (not totals) are free")
        if self.counts[0][unit, cls] + delta < 0:
            raise ValueError("move would make a latent count negative")
        d = 0.0
        for k, j, i in self._affected(unit, cls):
            new = self.lik.log_lik_array(self.obs.values[k][j, i], self.counts[k][j, i] + delta, check=False)
            d += float(new) - self.ll[k][j, i]
        return d

    def apply_move(self, unit: int, cls: int, delta: int) -> float:
        """Apply a +/-1 move, update caches, and return the log-likelihood change."""
        dll = self.delta_loglik(unit, cls, delta)
        for k, j, i in self._affected(unit, cls):
            self.counts[k][j, i] += delta
            self.ll[k][j, i] = float(self.lik.log_lik_array(self.obs.values[k][j, i], self.counts[k][j, i], check=False))
        self.loglik += dll
        return dll

    def table(self) -> CountTable:
        return CountTable(self.hierarchy, tuple(v.copy() for v in self.counts), perturbed=False)

    def is_consistent(self) -> bool:
        return self.table().is_consistent()


def initial_counts(obs: CountTable, lik: CellLikelihoodTable, rng: np.random.Generator) -> np.ndarray:
    """Start at the observed level-1 class outputs, then repair infinite terms.

    A positive observation whose latent counterpart is 0 has zero
    likelihood. That happens for a positive total over all-suppressed
    classes, or for a positive aggregate over all-zero children. Each such
    cell gets its observed value added to one randomly chosen level-1 child
    cell, working from level 1 upwards; additions never create new zeros,
    so one pass suffices.
    """
    h = obs.hierarchy
    m = obs.M
    tot = m - 1
    mb = obs.level(1)[:, :tot].copy()
    current = [v.copy() for v in CountTable.from_level1(h, mb).values]

    def add(units, cls, amount):
        j = int(rng.choice(units))
        c = int(rng.integers(tot)) if cls == tot else cls
        mb[j, c] += amount
        u2 = h.parent1[j]
        for arr, idx in zip(current, (j, u2, h.parent2[u2])):
            arr[idx, c] += amount
            arr[idx, tot] += amount

    for j in np.flatnonzero((obs.level(1)[:, tot] > 0) & (current[0][:, tot] == 0)):
        add(np.array([j]), tot, obs.level(1)[j, tot])

    children = {2: h.children(2), 3: [np.flatnonzero(h.parent13 == u) for u in range(h.sizes[2])]}
    for level in (2, 3):
        for i in range(m):
            for u in np.flatnonzero(obs.level(level)[:, i] > 0):
                if current[level - 1][u, i] == 0:
                    add(children[level][u], i, obs.level(level)[u, i])

    state_ll = LatentState(obs, lik, mb).loglik
    if not np.isfinite(state_ll):
        raise NumericalError("could not find a starting state with finite likelihood")
    return mb
