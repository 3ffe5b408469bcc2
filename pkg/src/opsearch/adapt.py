"""Outer adaptation loop and the experiment harnesses built on it."""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .analyzer import NON_DEPLOYABLE, analyze, select
from .cost import DeviceProfile, deployable, group_latency, model_latency, model_param_count, required_bytes
from .engine.data import DatasetPair, save_pair, synthetic
from .engine.params import ParamStore
from .engine.train import TrainConfig, accuracy
from .errors import AllExcluded, ConfigError, SeedingFailed, Unsatisfiable
from .evolution.mutation import NOOP
from .evolution.search import Candidate, SearchConfig, SearchContext, evaluate, evolve, inherit, mutate
from .graph import relabel_canonical
from .model import ModelGraph, relabel_model
from .seeds import random_generate

REPORT_VERSION = 1
MAX_SWEEP_NODES = 40
DEFAULT_SWEEP = (5, 10, 15, 20, 25, 30, 35, 40)


@dataclass(frozen=True)
class RunConfig:
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
    n_o: int = 4
    closeness_tol: float = 0.05
    max_layers_replaced: int = 10
    stop_on_target: float | None = None  # model latency target, ms
    dataset_seed: int = 1
    device: str = "rpi3-like"
    train: TrainConfig = field(default_factory=lambda: SearchConfig().train)

    def __post_init__(self):
        if self.max_layers_replaced < 1:
            raise ConfigError("max_layers_replaced must be >= 1")
        if self.n_o < 1:
            raise ConfigError("n_o must be >= 1")
        if not 0 <= self.closeness_tol < 1:
            raise ConfigError("closeness_tol must be in [0, 1)")
        if self.stop_on_target is not None and self.stop_on_target <= 0:
            raise ConfigError("stop_on_target must be a positive latency in ms")
        self.search()  # validates the shared fields

    def search(self, seed_offset: int = 0) -> SearchConfig:
        names = {f.name for f in fields(SearchConfig)}
        kw = {k: getattr(self, k) for k in names}
        kw["rng_seed"] = self.rng_seed + seed_offset
        return SearchConfig(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = dataclasses.asdict(self.train)
        return d

    @staticmethod
    def from_dict(d: Mapping, **overrides) -> "RunConfig":
        names = {f.name for f in fields(RunConfig)}
        merged = {**d, **{k: v for k, v in overrides.items() if v is not None}}
        unknown = sorted(set(merged) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if isinstance(merged.get("train"), Mapping):
            tnames = {f.name for f in fields(TrainConfig)}
            bad = sorted(set(merged["train"]) - tnames)
            if bad:
                raise ConfigError(f"unknown train config keys: {', '.join(bad)}")
            merged["train"] = TrainConfig(**merged["train"])
        try:
            return RunConfig(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _hex(d: int) -> str:
    return f"{d:016x}"


def _summary(m: ModelGraph, params: ParamStore, data: DatasetPair, profile: DeviceProfile) -> dict:
    fits, need = deployable(m, params, profile)
    return {
        "params_count": model_param_count(m),
        "accuracy": float(accuracy(m, params, data.val)),
        "latency_ms": float(model_latency(m, profile, params).mean_ms),
        "required_bytes": int(need),
        "deployable": bool(fits),
    }


def splice(m: ModelGraph, params: ParamStore, group: Sequence[int], c: Candidate) -> tuple:
    """Model and parameters with ``c`` in place of every operator of ``group``."""
    g, mapping = relabel_canonical(c.graph)
    tensors = {k: v for k, v in params.items() if k[0] not in set(group)}
    for (o, nid), v in c.params.items():
        tensors[(o, mapping[nid])] = v
    return m.replace_operators(group, g), ParamStore(tensors)


def _fitness_dict(c: Candidate) -> dict | None:
    f = c.fitness
    if f is None:
        return None
    return {"latency_ms": f.latency_ms, "params_count": f.params, "accuracy": f.accuracy, "feasible": f.feasible}


@dataclass
class AdaptResult:
    model: ModelGraph
    params: ParamStore
    report: dict

    @property
    def no_improvement(self) -> bool:
        return self.report["no_improvement"]


def adapt(m: ModelGraph, params: ParamStore, data: DatasetPair, profile: DeviceProfile, cfg: RunConfig,
          log=None) -> AdaptResult:
    """analyze -> select -> evolve -> splice, until a stopping rule fires."""
    m, params = relabel_model(m, params)
    m = m.check()
    original = _summary(m, params, data, profile)
    acc0 = original["accuracy"]
    excluded: set = set()
    replaced: set = set()
    iterations = []
    stop_reason = "MaxLayersReplaced"
    it = 0
    while len(replaced) < cfg.max_layers_replaced:
        it += 1
        fits, _ = deployable(m, params, profile)
        records = analyze(m, params, profile, cfg.n_i, excluded)
        try:
            sel = select(records, fits, cfg.n_o, cfg.closeness_tol)
        except AllExcluded:
            stop_reason = "AllExcluded"
            break
        room = cfg.max_layers_replaced - len(replaced)
        group = list(sel.chosen[:room])
        entry = {"iteration": it, "branch": sel.branch, "selected": group, "digest": _hex(sel.digest)}
        excluded.update(group)
        scfg = cfg.search(seed_offset=it - 1)
        ctx = SearchContext(m, params, group, data, profile, scfg, acc0)
        target = None
        if cfg.stop_on_target is not None and sel.branch != NON_DEPLOYABLE:
            total = model_latency(m, profile, params).mean_ms
            target = group_latency(m, group, profile, params) - (total - cfg.stop_on_target)
        prefer = "params" if sel.branch == NON_DEPLOYABLE else "latency"
        try:
            res = evolve(ctx, target_ms=target, prefer=prefer)
        except SeedingFailed as exc:
            entry.update(outcome="SeedingFailed", detail=str(exc))
            iterations.append(entry)
            if log:
                log(f"iteration {it}: operators {group} could not be seeded")
            continue
        entry.update(evaluations=res.evaluations, generations=len(res.log), best=_fitness_dict(res.best),
                     original_operator=_fitness_dict(res.original), pareto_size=len(res.pareto))
        improved = (not res.no_improvement and res.best.digest != res.original.digest)
        if not improved:
            entry["outcome"] = "NoImprovement"
            iterations.append(entry)
            if log:
                log(f"iteration {it}: no feasible improvement for operators {group}")
            continue
        m2, p2 = splice(m, params, group, res.best)
        acc2 = float(accuracy(m2, p2, data.val))
        if not acc2 > acc0 - cfg.epsilon:
            entry.update(outcome="RolledBack", accuracy_after=acc2)
            iterations.append(entry)
            stop_reason = "RolledBack"
            break
        new_digest = _hex(m2.digest(group[0]))
        m = m2.with_history({"iteration": it, "replaced": group, "digest": entry["digest"],
                             "new_digest": new_digest})
        params = p2
        replaced.update(group)
        lat = float(model_latency(m, profile, params).mean_ms)
        fits, need = deployable(m, params, profile)
        entry.update(outcome="Replaced", new_digest=new_digest, cumulative={
            "latency_ms": lat, "params_count": model_param_count(m), "accuracy": acc2,
            "required_bytes": int(need), "deployable": bool(fits)})
        iterations.append(entry)
        if log:
            log(f"iteration {it}: replaced {group}, model latency {lat:.4f} ms, accuracy {acc2:.4f}")
        if cfg.stop_on_target is not None and lat <= cfg.stop_on_target and fits:
            stop_reason = "TargetMet"
            break
    adapted = _summary(m, params, data, profile)
    report = {
        "format_version": REPORT_VERSION,
        "kind": "adaptation",
        "device": profile.to_dict(),
        "config": cfg.to_dict(),
        "original": original,
        "adapted": adapted,
        "speedup": original["latency_ms"] / adapted["latency_ms"] if adapted["latency_ms"] > 0 else None,
        "replaced_operators": sorted(replaced),
        "stop_reason": stop_reason,
        "no_improvement": not replaced,
        "iterations": iterations,
        "replacement_history": list(m.history),
    }
    return AdaptResult(m, params, report)


# ---------------------------------------------------------------------------
# experiments


def first_conv(m: ModelGraph) -> int:
    for o in m.graph_ops():
        if any(n.opcode == "cross_correlation" for n in m.operators[o].graph.nodes.values()):
            return o
    raise ConfigError("model has no convolution operator")


def histogram(values: Sequence[float], bins: int = 10) -> dict:
    counts, edges = np.histogram(np.asarray(values, float), bins=bins, range=(0.0, 1.0))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def random_vs_adapted(m: ModelGraph, params: ParamStore, data: DatasetPair, profile: DeviceProfile, n: int,
                      seed: int = 0, operator: int | None = None, train: TrainConfig | None = None) -> dict:
    """Fine-tuned accuracy of random replacements against single-mutation adaptations."""
    if n < 10:
        raise ConfigError("random-vs-adapted needs n >= 10")
    m, params = relabel_model(m, params)
    o = first_conv(m) if operator is None else operator
    if o not in m.operators or not m.operators[o].is_graph:
        raise ConfigError(f"operator {o} is not an operator graph")
    d = m.digest(o)
    group = [x for x in m.graph_ops() if m.digest(x) == d]
    cfg = SearchConfig(rng_seed=seed, **({"train": train} if train is not None else {}))
    baseline = float(accuracy(m, params, data.val))
    ctx = SearchContext(m, params, group, data, profile, cfg, baseline)
    rng = np.random.default_rng(seed)
    orig = ctx.original_candidate()
    g0 = orig.graph
    records = []
    for trial in range(n):
        for _ in range(100):
            try:
                g = random_generate(tuple(g0.activation_shape), tuple(g0.required_output_shape), rng,
                                    limits=cfg.limits)
                break
            except Unsatisfiable:
                continue
        else:
            raise SeedingFailed("random generation kept failing")
        c = Candidate(ctx.new_id(), g, inherit(group, g, {}, rng), lineage=((), ("random",)))
        f = evaluate(c, ctx)
        records.append({"arm": "random", "trial": trial, "accuracy": f.accuracy, "digest": _hex(c.digest)})
    for trial in range(n):
        c = mutate(orig, ctx, rng)
        for _ in range(20):
            if c.lineage[1] != (NOOP,):
                break
            c = mutate(orig, ctx, rng)
        f = evaluate(c, ctx)
        records.append({"arm": "adapted", "trial": trial, "accuracy": f.accuracy, "digest": _hex(c.digest),
                        "mutation": c.lineage[1][0]})
    arms = {}
    for arm in ("random", "adapted"):
        accs = [r["accuracy"] for r in records if r["arm"] == arm]
        arms[arm] = {"median_accuracy": float(np.median(accs)), "histogram": histogram(accs)}
    return {
        "format_version": REPORT_VERSION,
        "kind": "random_vs_adapted",
        "operator": o,
        "group": group,
        "baseline_accuracy": baseline,
        "n": n,
        "seed": seed,
        "arms": arms,
        "records": records,
    }


def sweep(m: ModelGraph, params: ParamStore, data: DatasetPair, profile: DeviceProfile, cfg: RunConfig,
          values: Sequence[int] = DEFAULT_SWEEP) -> dict:
    """One adapt run per max_nodes value."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one max_nodes value")
    for v in values:
        if v > MAX_SWEEP_NODES or v < 2:
            raise ConfigError(f"max_nodes values must be in [2, {MAX_SWEEP_NODES}], got {v}")
    rows = []
    for v in values:
        run = dataclasses.replace(cfg, max_nodes=v, max_edges=max(2, math.ceil(v * 1.25)))
        t = time.perf_counter()
        res = adapt(m, params, data, profile, run)
        wall = time.perf_counter() - t
        a = res.report["adapted"]
        rows.append({"max_nodes": v, "best_accuracy": a["accuracy"], "best_latency_ms": a["latency_ms"],
                     "wall_clock_s": wall})
    walls = [r["wall_clock_s"] for r in rows]
    return {
        "format_version": REPORT_VERSION,
        "kind": "max_nodes_sweep",
        "rows": rows,
        "wall_clock_non_decreasing": all(a <= b for a, b in zip(walls, walls[1:])),
    }


def gen_dataset(seed: int, path: str, n_train: int = 1800, n_val: int = 600) -> DatasetPair:
    pair = synthetic(seed, n_train, n_val)
    save_pair(pair, path)
    return pair


BASELINE_TRAIN = TrainConfig(learning_rate=0.01, epochs=5)


def trained_toy(data: DatasetPair, seed: int = 0, cfg: TrainConfig = BASELINE_TRAIN) -> tuple:
    """The toy CNN trained from scratch on ``data``: (model, params)."""
    from .engine.train import train_model
    from .model import init_params, toy_cnn

    shape = (1,) + tuple(data.train.sample_shape)
    m = toy_cnn(shape, int(data.train.labels.max()) + 1)
    p = init_params(m, np.random.default_rng(seed))
    return m, train_model(m, p, data.train, cfg, np.random.default_rng(seed))
