"""Device profiles, parameter counts, latency estimates and deployability."""
from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping

import numpy as np

from . import catalog
from .errors import ConfigError, ParseError
from .graph import OperatorGraph, infer_shapes

TIMING_LOCK = threading.Lock()
WARMUP_RUNS = 3


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    memory_capacity_bytes: int
    mode: str = "analytic"  # "analytic" | "measured"
    flops_per_ms: float = 1e6
    per_opcode_overhead_us: Mapping = field(default_factory=lambda: {"default": 2.0})
    bytes_per_param: int = 4
    tiling_speedup_factor: float = 1.0
    energy_per_flop: float | None = None
    n_runs: int = 100

    def __post_init__(self):
        if self.mode not in ("analytic", "measured"):
            raise ConfigError(f"profile mode must be analytic or measured, got {self.mode!r}")
        if not self.flops_per_ms > 0:
            raise ConfigError("flops_per_ms must be positive")
        if not 0 < self.tiling_speedup_factor <= 1:
            raise ConfigError("tiling_speedup_factor must be in (0, 1]")
        if self.memory_capacity_bytes < 0 or self.bytes_per_param < 1:
            raise ConfigError("memory capacity must be >= 0 and bytes_per_param >= 1")

    def overhead_ms(self, opcode: str) -> float:
        table = self.per_opcode_overhead_us
        return float(table.get(opcode, table.get("default", 0.0))) / 1000.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "memory_capacity_bytes": self.memory_capacity_bytes,
            "mode": self.mode,
            "flops_per_ms": self.flops_per_ms,
            "per_opcode_overhead_us": dict(self.per_opcode_overhead_us),
            "bytes_per_param": self.bytes_per_param,
            "tiling_speedup_factor": self.tiling_speedup_factor,
            "energy_per_flop": self.energy_per_flop,
            "n_runs": self.n_runs,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "DeviceProfile":
        known = {f for f in DeviceProfile.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown profile fields {sorted(extra)}")
        try:
            return DeviceProfile(**d)
        except TypeError as exc:
            raise ConfigError(f"bad device profile: {exc}") from None


BUILTIN_PROFILES = ("rpi3-like", "phone-like")


def load_profile(name_or_path: str) -> DeviceProfile:
    """Load a shipped profile by name or a profile JSON file by path."""
    try:
        if name_or_path in BUILTIN_PROFILES:
            text = resources.files("opsearch.profiles").joinpath(f"{name_or_path}.json").read_text()
        else:
            with open(name_or_path) as f:
                text = f.read()
        return DeviceProfile.from_dict(json.loads(text))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read device profile {name_or_path}: {exc}") from None


@dataclass(frozen=True)
class LatencyEstimate:
    mean_ms: float
    runs: int = 1
    stddev_ms: float = 0.0


# -- operator level -------------------------------------------------------------


def param_count(g: OperatorGraph) -> int:
    return sum(math.prod(n.shape) for n in g.nodes.values() if n.is_parameter)


def node_flops(g: OperatorGraph) -> dict:
    table = infer_shapes(g)
    out = {}
    for nid in g.topo_order:
        node = g.nodes[nid]
        if node.is_instruction:
            ins = [table[o] for o in g.operands(nid)]
            out[nid] = catalog.node_flops(node.opcode, ins, table[nid], node.hyperparams)
    return out


def graph_flops(g: OperatorGraph) -> int:
    return sum(node_flops(g).values())


def node_latencies(g: OperatorGraph, profile: DeviceProfile) -> dict:
    """Analytic per-instruction latency in ms."""
    lat = {}
    for nid, flops in node_flops(g).items():
        node = g.nodes[nid]
        ms = flops / profile.flops_per_ms + profile.overhead_ms(node.opcode)
        for flag in ("tile", "unroll"):
            if node.hyperparams.get(flag):
                ms *= profile.tiling_speedup_factor
        lat[nid] = ms
    return lat


def analytic_latency(g: OperatorGraph, profile: DeviceProfile) -> LatencyEstimate:
    return LatencyEstimate(float(sum(node_latencies(g, profile).values())), 1, 0.0)


def _time(fn, n_runs: int) -> LatencyEstimate:
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    with TIMING_LOCK:
        for _ in range(WARMUP_RUNS):
            fn()
        samples = []
        for _ in range(n_runs):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(samples)
    return LatencyEstimate(float(arr.mean()), n_runs, float(arr.std()))


def measured_latency(g: OperatorGraph, params: Mapping, x: np.ndarray, n_runs: int = 100) -> LatencyEstimate:
    """Wall-clock latency of evaluating ``g`` on ``x`` averaged over ``n_runs``."""
    from .engine.autodiff import eval_operator

    return _time(lambda: eval_operator(g, params, x), n_runs)


def energy_j(g: OperatorGraph, profile: DeviceProfile) -> float | None:
    if profile.energy_per_flop is None:
        return None
    return graph_flops(g) * profile.energy_per_flop


# -- model level ------------------------------------------------------------------


def _merge_latency(m, o: int, shapes: Mapping, profile: DeviceProfile) -> float:
    op = m.operators[o]
    flops = math.prod(shapes[o]) if op.kind == "add" else 0
    return flops / profile.flops_per_ms + profile.overhead_ms(op.kind)


def operator_latencies(m, profile: DeviceProfile, params=None, n_runs: int | None = None) -> dict:
    """Latency estimate per model operator (analytic, or timed in measured mode)."""
    shapes = m.output_shapes()
    out = {}
    if profile.mode == "analytic":
        for o in m.order:
            op = m.operators[o]
            ms = analytic_latency(op.graph, profile).mean_ms if op.is_graph else _merge_latency(m, o, shapes, profile)
            out[o] = LatencyEstimate(ms, 1, 0.0)
        return out
    if params is None:
        raise ConfigError("measured latency needs parameters")
    runs = n_runs or profile.n_runs
    from .engine.train import model_values

    x = np.zeros(m.input_shape, np.float32)
    vals = model_values(m, params, x)
    for o in m.order:
        op = m.operators[o]
        ins = [vals[s] for s in m.operands(o)]
        if op.is_graph:
            out[o] = measured_latency(op.graph, params.for_operator(o), ins[0], runs)
        elif op.kind == "add":
            out[o] = _time(lambda: ins[0] + ins[1], runs)
        else:
            out[o] = _time(lambda: np.concatenate(ins, axis=1), runs)
    return out


def model_latency(m, profile: DeviceProfile, params=None, n_runs: int | None = None) -> LatencyEstimate:
    if profile.mode == "analytic":
        lats = operator_latencies(m, profile)
        return LatencyEstimate(float(sum(l.mean_ms for l in lats.values())), 1, 0.0)
    from .engine.train import eval_model

    x = np.zeros(m.input_shape, np.float32)
    return _time(lambda: eval_model(m, params, x), n_runs or profile.n_runs)


def group_latency(m, op_ids: Iterable[int], profile: DeviceProfile, params=None) -> float:
    lats = operator_latencies(m, profile, params)
    return float(sum(lats[o].mean_ms for o in op_ids))


def operator_latency_attribution(m_original, m_adapted, op_ids: Iterable[int], profile: DeviceProfile,
                                 params_original=None, params_adapted=None) -> float:
    """Latency charged to the replaced group: the original group's latency
    corrected by the whole-model difference the replacement causes."""
    op_ids = list(op_ids)
    lo = model_latency(m_original, profile, params_original).mean_ms
    la = model_latency(m_adapted, profile, params_adapted).mean_ms
    return la - lo + group_latency(m_original, op_ids, profile, params_original)


def model_param_count(m) -> int:
    return sum(param_count(m.operators[o].graph) for o in m.graph_ops())


def peak_activation_bytes(m, bytes_per_elem: int = 4) -> int:
    shapes = m.output_shapes()
    return max(math.prod(shapes[o]) for o in m.order) * bytes_per_elem


def required_bytes(m, profile: DeviceProfile) -> int:
    return model_param_count(m) * profile.bytes_per_param + peak_activation_bytes(m)


def deployable(m, params, profile: DeviceProfile) -> tuple:
    """(fits, required bytes): parameters plus the largest operator output must fit."""
    need = required_bytes(m, profile)
    return need <= profile.memory_capacity_bytes, need


def with_capacity(profile: DeviceProfile, capacity: int) -> DeviceProfile:
    return replace(profile, memory_capacity_bytes=int(capacity))
