"""Minimum-cost one-to-one assignment for small square cost matrices."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .numcore import ShapeError

EXHAUSTIVE_MAX = 6


@dataclass(frozen=True)
class PermutationResult:
    """``perm[i]`` is the column (label row) assigned to row ``i`` (0-based)."""

    perm: tuple[int, ...]
    cost: float


def _square(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    return c


def perm_cost(cost: np.ndarray, perm) -> float:
    # fixed summation order so every search path reports identical floats
    total = 0.0
    for i, j in enumerate(perm):
        total += float(cost[i, j])
    return total


def exhaustive_assignment(cost) -> PermutationResult:
    """Enumerate all permutations; ties go to the lexicographically smallest."""
    c = _square(cost)
    n = c.shape[0]
    best, best_cost = tuple(range(n)), None
    for perm in itertools.permutations(range(n)):
        v = perm_cost(c, perm)
        if best_cost is None or v < best_cost:
            best, best_cost = perm, v
    return PermutationResult(best, perm_cost(c, best))


def hungarian(cost) -> PermutationResult:
    """O(n^3) shortest augmenting path with row/column potentials."""
    c = _square(cost)
    n = c.shape[0]
    if n == 0:
        return PermutationResult((), 0.0)
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)  # match[col] = row, 1-based, 0 = free
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = inf, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    perm = tuple(perm)
    return PermutationResult(perm, perm_cost(c, perm))


def optimal_permutation(cost) -> PermutationResult:
    c = _square(cost)
    if c.shape[0] <= EXHAUSTIVE_MAX:
        return exhaustive_assignment(c)
    return hungarian(c)
