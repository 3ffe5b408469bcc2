"""Constrained non-dominated sorting, crowding distance and tournaments."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FitnessVector:
    latency_ms: float
    params: int
    accuracy: float
    feasible: bool

    def objectives(self) -> tuple:
        return (self.latency_ms, self.params)


def dominates(x: FitnessVector, y: FitnessVector) -> bool:
    """Constrained domination: feasibility first, then Pareto on (latency, params)."""
    if x.feasible != y.feasible:
        return x.feasible
    return (x.latency_ms <= y.latency_ms and x.params <= y.params
            and (x.latency_ms < y.latency_ms or x.params < y.params))


def non_dominated_sort(pop: Sequence[FitnessVector]) -> list:
    """Fronts F1, F2, ... as lists of indices into ``pop`` (ascending within a front)."""
    n = len(pop)
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(pop[i], pop[j]):
                dominated_by[i].append(j)
                counts[j] += 1
            elif dominates(pop[j], pop[i]):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(sorted(current))
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = nxt
    return fronts


def crowding_distance(front: Sequence[FitnessVector]) -> list:
    n = len(front)
    if n == 0:
        raise ValueError("crowding distance of an empty front")
    dist = [0.0] * n
    for key in (lambda f: f.latency_ms, lambda f: f.params):
        vals = [float(key(f)) for f in front]
        order = sorted(range(n), key=lambda i: (vals[i], i))
        lo, hi = vals[order[0]], vals[order[-1]]
        span = hi - lo
        dist[order[0]] = math.inf
        dist[order[-1]] = math.inf
        if span == 0:
            continue  # zero-range objective adds nothing to interior points
        for r in range(1, n - 1):
            i = order[r]
            if dist[i] != math.inf:
                dist[i] += (vals[order[r + 1]] - vals[order[r - 1]]) / span
    return dist


def rank_and_crowd(pop: Sequence[FitnessVector]) -> tuple:
    """(rank per index, crowding distance per index, fronts)."""
    fronts = non_dominated_sort(pop)
    rank = [0] * len(pop)
    dist = [0.0] * len(pop)
    for r, f in enumerate(fronts):
        d = crowding_distance([pop[i] for i in f])
        for i, di in zip(f, d):
            rank[i] = r
            dist[i] = di
    return rank, dist, fronts


def tournament_select(ids: Sequence[int], rank: Sequence[int], dist: Sequence[float], k: int,
                      rng: np.random.Generator) -> int:
    """Index of the tournament winner among ``k`` entrants drawn without replacement.

    ``ids`` are candidate ids used as the final tie-break (lower wins).
    """
    k = min(k, len(ids))
    entrants = rng.choice(len(ids), size=k, replace=False)
    return min(entrants, key=lambda i: (rank[i], -dist[i], ids[i]))


def environmental_select(pop: Sequence[FitnessVector], ids: Sequence[int], size: int) -> list:
    """Indices of the ``size`` survivors: whole fronts, then the most crowded-apart."""
    rank, dist, fronts = rank_and_crowd(pop)
    chosen: list[int] = []
    for f in fronts:
        if len(chosen) + len(f) <= size:
            chosen.extend(f)
            continue
        rest = sorted(f, key=lambda i: (-dist[i], ids[i]))
        chosen.extend(rest[: size - len(chosen)])
        break
    return chosen


def pareto_filter(pop: Sequence[FitnessVector]) -> list:
    """Indices of feasible members not dominated by any other feasible member."""
    feas = [i for i, f in enumerate(pop) if f.feasible]
    return [i for i in feas if not any(dominates(pop[j], pop[i]) for j in feas if j != i)]
