"""Evolutionary adaptation of one selected operator group."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..cost import DeviceProfile, analytic_latency, operator_latency_attribution, param_count
from ..engine.data import DatasetPair
from ..engine.params import ParamStore, digest, init_tensor
from ..engine.train import Frontier, TrainConfig, accuracy, dirty_set, finetune
from ..errors import ConfigError, KernelMissing, NumericalError, SeedingFailed
from ..graph import GraphLimits, OperatorGraph, canonical_hash, validate
from .crossover import crossover_graphs
from .mutation import NOOP, mutate_graph
from .nsga import FitnessVector, environmental_select, pareto_filter, rank_and_crowd, tournament_select

XOVER_NOOP = "xover-noop"
XOVER_RETRIES = 3


@dataclass(frozen=True)
class SearchConfig:
    iterations: int = 50
    population_size: int = 24
    tournament_size: int = 3
    p_mutation: float = 0.8
    p_crossover: float = 0.6
    epsilon: float = 0.01
    n_i: int = 100
    max_nodes: int = 20
    max_edges: int = 25
    rng_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.01, epochs=1))

    def __post_init__(self):
        for name in ("p_mutation", "p_crossover", "epsilon"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.population_size < 2 or self.tournament_size < 2:
            raise ConfigError("population_size and tournament_size must be >= 2")
        if self.iterations < 0 or self.n_i < 1:
            raise ConfigError("iterations must be >= 0 and n_i >= 1")
        if not 1 < self.max_nodes or not 1 < self.max_edges:
            raise ConfigError("graph bounds must exceed 1")

    @property
    def limits(self) -> GraphLimits:
        return GraphLimits(self.max_nodes, self.max_edges)


@dataclass
class Candidate:
    id: int
    graph: OperatorGraph
    params: dict  # (operator id, node id) -> tensor for every operator of the group
    fitness: FitnessVector | None = None
    lineage: tuple = ()  # (parent ids, tags)
    digest: int = 0

    def __post_init__(self):
        if not self.digest:
            self.digest = canonical_hash(self.graph)


# ---------------------------------------------------------------------------
# parameter inheritance


def fit_tensor(old: np.ndarray, fresh: np.ndarray) -> np.ndarray:
    """Copy the overlap of ``old`` into ``fresh`` (spatial dims centred)."""
    if old.ndim != fresh.ndim:
        return fresh
    out = fresh.copy()
    src, dst = [], []
    for axis, (so, sn) in enumerate(zip(old.shape, fresh.shape)):
        m = min(so, sn)
        if old.ndim == 4 and axis >= 2:
            a, b = (so - m) // 2, (sn - m) // 2
        else:
            a = b = 0
        src.append(slice(a, a + m))
        dst.append(slice(b, b + m))
    out[tuple(dst)] = old[tuple(src)]
    return out


def inherit(group: Sequence[int], graph: OperatorGraph, sources: Mapping, rng: np.random.Generator) -> dict:
    """Parameter fragment for ``graph``.

    ``sources`` maps node id -> per-operator dict {op id: tensor} taken from a
    parent; nodes without a source are freshly initialised.
    """
    frag = {}
    for n in graph.nodes.values():
        if not n.is_parameter:
            continue
        src = sources.get(n.id)
        for o in group:
            old = None if src is None else src.get(o)
            if old is not None and old.shape == tuple(n.shape):
                frag[(o, n.id)] = old
            else:
                fresh = init_tensor(n, rng)
                frag[(o, n.id)] = fresh if old is None else fit_tensor(old, fresh)
    return frag


def _by_node(params: Mapping) -> dict:
    out: dict[int, dict] = {}
    for (o, nid), v in params.items():
        out.setdefault(nid, {})[o] = v
    return out


# ---------------------------------------------------------------------------
# context and evaluation


class SearchContext:
    """Everything needed to score candidates for one operator group."""

    def __init__(self, model, params: ParamStore, group: Sequence[int], data: DatasetPair, profile: DeviceProfile,
                 cfg: SearchConfig, baseline_accuracy: float):
        self.model = model
        self.params = params
        self.group = tuple(group)
        self.data = data
        self.profile = profile
        self.cfg = cfg
        self.baseline_accuracy = baseline_accuracy
        dirty = dirty_set(model, self.group)
        self.train_frontier = Frontier(model, params, dirty, data.train.inputs)
        self.val_frontier = Frontier(model, params, dirty, data.val.inputs)
        self.base = params.without_operators(self.group)
        self.cache: dict = {}
        self.evaluations = 0
        self.next_id = 0

    def new_id(self) -> int:
        self.next_id += 1
        return self.next_id - 1

    def original_candidate(self) -> Candidate:
        g = self.model.operators[self.group[0]].graph
        frag = {k: v for k, v in self.params.items() if k[0] in self.group}
        return Candidate(self.new_id(), g, frag, lineage=((), ("original",)))

    def latency(self, graph: OperatorGraph, m2, tuned: ParamStore) -> float:
        if self.profile.mode == "analytic":
            return analytic_latency(graph, self.profile).mean_ms * len(self.group)
        return operator_latency_attribution(self.model, m2, self.group, self.profile, self.params, tuned)


def evaluate(c: Candidate, ctx: SearchContext) -> FitnessVector:
    """Fine-tune the candidate in place of the group, then score it."""
    key = (c.digest, digest(c.params))
    hit = ctx.cache.get(key)
    if hit is not None:
        c.fitness, c.params = hit
        return c.fitness
    ctx.evaluations += 1
    m2 = ctx.model.replace_operators(ctx.group, c.graph)
    store = ctx.base.merged(c.params)
    seed = [ctx.cfg.rng_seed, c.digest & 0xFFFFFFFF, c.digest >> 32, int(key[1], 16) & 0xFFFFFFFF]
    rng = np.random.default_rng(seed)
    n_params = param_count(c.graph) * len(ctx.group)
    try:
        tuned = finetune(m2, store, ctx.group, ctx.data.train, ctx.cfg.train, rng, frontier=ctx.train_frontier)
        acc = accuracy(m2, tuned, ctx.data.val, frontier=ctx.val_frontier)
        lat = ctx.latency(c.graph, m2, tuned)
        frag = {k: v for k, v in tuned.items() if k[0] in ctx.group}
    except (NumericalError, KernelMissing, FloatingPointError):
        acc, frag = 0.0, c.params
        lat = analytic_latency(c.graph, ctx.profile).mean_ms * len(ctx.group)
    feasible = acc > ctx.baseline_accuracy - ctx.cfg.epsilon
    c.fitness = FitnessVector(float(lat), int(n_params), float(acc), bool(feasible))
    c.params = frag
    ctx.cache[key] = (c.fitness, frag)
    return c.fitness


# ---------------------------------------------------------------------------
# genetic operators on candidates


def mutate(c: Candidate, ctx: SearchContext, rng: np.random.Generator) -> Candidate:
    res = mutate_graph(c.graph, rng, ctx.cfg.limits)
    if res.tag == NOOP:
        return Candidate(ctx.new_id(), c.graph, dict(c.params), lineage=((c.id,), (NOOP,)), digest=c.digest)
    frag = inherit(ctx.group, res.graph, _by_node(c.params), rng)
    return Candidate(ctx.new_id(), res.graph, frag, lineage=((c.id,), (res.tag,)))


def _fitter(a: Candidate, b: Candidate) -> Candidate:
    def key(c):
        f = c.fitness
        if f is None:
            return (1, math.inf, math.inf, c.id)
        return (0 if f.feasible else 1, f.latency_ms, f.params, c.id)

    return a if key(a) <= key(b) else b


def crossover(a: Candidate, b: Candidate, ctx: SearchContext, rng: np.random.Generator) -> Candidate:
    out = None
    for _ in range(XOVER_RETRIES):
        out = crossover_graphs(a.graph, b.graph, rng, ctx.cfg.limits)
        if out is not None:
            break
    if out is None:
        f = _fitter(a, b)
        return Candidate(ctx.new_id(), f.graph, dict(f.params), lineage=((a.id, b.id), (XOVER_NOOP,)),
                         digest=f.digest)
    child, origin, _ = out
    pa, pb = _by_node(a.params), _by_node(b.params)
    sources = {}
    for nid, (parent, old) in origin.items():
        src = (pa if parent == 0 else pb).get(old)
        if src is not None:
            sources[nid] = src
    frag = inherit(ctx.group, child, sources, rng)
    return Candidate(ctx.new_id(), child, frag, lineage=((a.id, b.id), ("crossover",)))


def seed_population(original: Candidate, ctx: SearchContext, rng: np.random.Generator) -> list:
    """The original plus single-mutation variants of it."""
    pop = [original]
    budget = 20 * ctx.cfg.population_size
    while len(pop) < ctx.cfg.population_size and budget > 0:
        budget -= 1
        child = mutate(original, ctx, rng)
        if child.lineage[1] == (NOOP,) or validate(child.graph, ctx.cfg.limits):
            continue
        pop.append(child)
    if len(pop) < 2:
        raise SeedingFailed("could not produce a valid variant of the original operator")
    return pop


# ---------------------------------------------------------------------------
# generational loop


@dataclass
class EvolveResult:
    best: Candidate
    pareto: list
    log: list
    no_improvement: bool
    evaluations: int
    original: Candidate
    archive: list  # every evaluated candidate, in creation order


def _best(cands: Sequence[Candidate], prefer: str = "latency") -> Candidate | None:
    feas = [c for c in cands if c.fitness is not None and c.fitness.feasible]
    if not feas:
        return None
    if prefer == "params":
        return min(feas, key=lambda c: (c.fitness.params, c.fitness.latency_ms, c.id))
    return min(feas, key=lambda c: (c.fitness.latency_ms, c.fitness.params, c.id))


def evolve(ctx: SearchContext, cfg: SearchConfig | None = None, target_ms: float | None = None,
           prefer: str = "latency") -> EvolveResult:
    """Run the generational loop.

    ``prefer`` orders the feasible candidates when picking the best one
    ("latency" then params, or "params" then latency). With ``target_ms`` the
    loop stops once the best candidate's latency reaches it.
    """
    if prefer not in ("latency", "params"):
        raise ConfigError(f"prefer must be 'latency' or 'params', got {prefer!r}")
    cfg = cfg or ctx.cfg
    rng = np.random.default_rng(cfg.rng_seed)
    original = ctx.original_candidate()
    pop = seed_population(original, ctx, rng)
    for c in pop:
        evaluate(c, ctx)
    archive = list(pop)
    log = []
    for gen in range(cfg.iterations):
        fits = [c.fitness for c in pop]
        ids = [c.id for c in pop]
        rank, dist, _ = rank_and_crowd(fits)
        offspring = []
        while len(offspring) < cfg.population_size:
            p1 = pop[int(tournament_select(ids, rank, dist, cfg.tournament_size, rng))]
            if rng.random() < cfg.p_crossover:
                p2 = pop[int(tournament_select(ids, rank, dist, cfg.tournament_size, rng))]
                child = crossover(p1, p2, ctx, rng)
            else:
                child = Candidate(ctx.new_id(), p1.graph, dict(p1.params), lineage=((p1.id,), ("clone",)),
                                  digest=p1.digest)
            if rng.random() < cfg.p_mutation:
                child = mutate(child, ctx, rng)
            evaluate(child, ctx)
            offspring.append(child)
        archive.extend(offspring)
        union = pop + offspring
        keep = environmental_select([c.fitness for c in union], [c.id for c in union], cfg.population_size)
        pop = [union[i] for i in sorted(keep)]
        best = _best(archive, prefer)
        log.append({
            "generation": gen,
            "feasible": sum(1 for c in pop if c.fitness.feasible),
            "best_latency_ms": None if best is None else best.fitness.latency_ms,
            "best_params": None if best is None else best.fitness.params,
            "evaluations": ctx.evaluations,
        })
        if target_ms is not None and best is not None and best.fitness.latency_ms <= target_ms:
            break
    best = _best(archive, prefer)
    no_improvement = best is None
    if best is None:
        best = original
    fits = [c.fitness for c in archive]
    front = [archive[i] for i in pareto_filter(fits)]
    return EvolveResult(best, front, log, no_improvement, ctx.evaluations, original, archive)
