"""Least-efficient operator selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .cost import DeviceProfile, LatencyEstimate, operator_latencies, param_count
from .errors import AllExcluded, ConfigError

NON_DEPLOYABLE = "NonDeployable"
RANKED = "Ranked"


@dataclass(frozen=True)
class OperatorRecord:
    operator: int
    digest: int
    latency: LatencyEstimate
    params: int
    excluded: bool = False


@dataclass(frozen=True)
class SelectionResult:
    branch: str
    chosen: tuple
    digest: int
    rationale: tuple = field(default_factory=tuple)


def ranking_key(r: OperatorRecord) -> tuple:
    return (-r.latency.mean_ms, -r.params, r.operator)


def analyze(m, params, profile: DeviceProfile, n_i: int = 100, excluded: Iterable[int] = ()) -> list:
    """One record per operator graph of ``m`` (merges are not candidates)."""
    if n_i < 1:
        raise ConfigError("n_i must be >= 1")
    excluded = set(excluded)
    lats = operator_latencies(m, profile, params, n_i)
    records = [
        OperatorRecord(o, m.digest(o), lats[o], param_count(m.operators[o].graph), o in excluded)
        for o in m.graph_ops()
    ]
    return sorted(records, key=ranking_key)


def select(records: Sequence[OperatorRecord], deployable: bool, n_o: int = 4,
           closeness_tol: float = 0.05) -> SelectionResult:
    if n_o < 1:
        raise ConfigError("n_o must be >= 1")
    if not 0 <= closeness_tol < 1:
        raise ConfigError("closeness_tol must be in [0, 1)")
    eligible = [r for r in records if not r.excluded]
    if not eligible:
        raise AllExcluded("every operator has already been selected")
    if not deployable:
        order = sorted(eligible, key=lambda r: (-r.params, r.operator))
        top = order[0]
        branch = NON_DEPLOYABLE
    else:
        order = sorted(eligible, key=ranking_key)
        lmax = order[0].latency.mean_ms
        if lmax > 0:
            window = [r for r in order if (lmax - r.latency.mean_ms) / lmax <= closeness_tol]
        else:
            window = list(order)
        top = min(window, key=lambda r: (-r.params, -r.latency.mean_ms, r.operator))
        branch = RANKED
    chosen = [top.operator] + [r.operator for r in order if r.digest == top.digest and r is not top]
    return SelectionResult(branch, tuple(chosen[:n_o]), top.digest, tuple(r.operator for r in order))
