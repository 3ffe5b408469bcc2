import math

import numpy as np
import pytest

from opsearch.evolution.nsga import (
    FitnessVector,
    crowding_distance,
    dominates,
    environmental_select,
    non_dominated_sort,
    pareto_filter,
    rank_and_crowd,
    tournament_select,
)

import oracles


def random_pop(rng, n):
    return [FitnessVector(float(rng.integers(0, 6)), int(rng.integers(0, 6)), 0.9, bool(rng.random() < 0.7))
            for _ in range(n)]


def tup(f):
    return (f.latency_ms, f.params, f.feasible)


def test_dominance_examples():
    a = FitnessVector(1.0, 10, 0.9, True)
    assert dominates(a, FitnessVector(2.0, 10, 0.9, True))
    assert not dominates(a, a)
    assert not dominates(a, FitnessVector(0.5, 20, 0.9, True))
    assert dominates(FitnessVector(9.0, 99, 0.1, True), FitnessVector(0.1, 1, 0.1, False))


def test_fronts_match_bruteforce(rng):
    for _ in range(200):
        pop = random_pop(rng, int(rng.integers(1, 15)))
        assert non_dominated_sort(pop) == oracles.fronts_bruteforce([tup(f) for f in pop])


def test_crowding_matches_hand(rng):
    for _ in range(200):
        n = int(rng.integers(1, 10))
        front = [FitnessVector(float(rng.integers(0, 8)), int(rng.integers(0, 8)), 0.9, True) for _ in range(n)]
        assert crowding_distance(front) == oracles.crowding_hand([(f.latency_ms, f.params) for f in front])


def test_crowding_small_fronts():
    one = [FitnessVector(1.0, 1, 0.9, True)]
    assert crowding_distance(one) == [math.inf]
    with pytest.raises(ValueError):
        crowding_distance([])


def test_tournament_monte_carlo():
    """With distinct ranks the best of n wins a size-k tournament with probability k/n."""
    n, k, trials = 12, 3, 20000
    rank = list(range(n))
    rng = np.random.default_rng(5)
    wins = sum(tournament_select(list(range(n)), rank, [0.0] * n, k, rng) == 0 for _ in range(trials))
    p = k / n
    sd = math.sqrt(p * (1 - p) / trials)
    assert abs(wins / trials - p) <= 4 * sd


def test_tournament_tie_break_by_crowding_then_id():
    rng = np.random.default_rng(0)
    assert tournament_select([5, 6, 7], [0, 0, 0], [1.0, math.inf, 1.0], 3, rng) == 1
    assert tournament_select([5, 6, 7], [0, 0, 0], [1.0, 1.0, 1.0], 3, rng) == 0


def test_environmental_select(rng):
    for _ in range(100):
        pop = random_pop(rng, 20)
        size = int(rng.integers(1, 20))
        keep = environmental_select(pop, list(range(20)), size)
        assert len(keep) == size and len(set(keep)) == size
        rank, _, _ = rank_and_crowd(pop)
        worst_kept = max(rank[i] for i in keep)
        assert all(rank[i] >= worst_kept for i in set(range(20)) - set(keep))


def test_pareto_filter(rng):
    for _ in range(100):
        pop = random_pop(rng, 12)
        front = pareto_filter(pop)
        feas = [i for i, f in enumerate(pop) if f.feasible]
        want = [i for i in feas if not any(oracles.dominates(tup(pop[j]), tup(pop[i])) for j in feas)]
        assert front == want


def fv(lat, params, feasible=True):
    return FitnessVector(float(lat), params, 0.5, feasible)


def test_front_examples():
    assert non_dominated_sort([fv(1, 10), fv(2, 5), fv(3, 20)]) == [[0, 1], [2]]
    mixed = [fv(9, 9), fv(1, 1, False), fv(2, 2, False), fv(3, 0, False)]
    assert non_dominated_sort(mixed)[0] == [0]
    assert non_dominated_sort([fv(1, 1)] * 4) == [[0, 1, 2, 3]]


def test_crowding_two_points_infinite():
    assert crowding_distance([fv(1, 2), fv(2, 1)]) == [math.inf, math.inf]


def test_degenerate_tournament_returns_best():
    rank, dist = [1, 0, 0, 2], [math.inf, 0.3, 0.9, math.inf]
    for s in range(20):
        assert tournament_select([0, 1, 2, 3], rank, dist, 4, np.random.default_rng(s)) == 2


def test_rank_one_beats_rank_two_more_often():
    rank, n = [0, 0, 1, 1, 2, 2], 6
    rng = np.random.default_rng(11)
    wins = [0] * n
    for _ in range(10_000):
        wins[tournament_select(list(range(n)), rank, [1.0] * n, 3, rng)] += 1
    assert wins[0] + wins[1] > wins[2] + wins[3] > wins[4] + wins[5]
