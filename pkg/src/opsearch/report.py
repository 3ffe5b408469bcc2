"""Report emission: deterministic JSON and a markdown comparison table."""
from __future__ import annotations

import json
import math
from typing import Mapping

from .engine.data import _atomic_write
from .errors import ConfigError

FORMATS = ("json", "markdown")


def _clean(x):
    # JSON has no inf/nan; the only non-finite values reports carry are latencies
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, Mapping):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if hasattr(x, "item") and not isinstance(x, (str, bytes)):
        return _clean(x.item())
    return x


def to_json(report: Mapping) -> str:
    return json.dumps(_clean(report), indent=1, sort_keys=True) + "\n"


def from_json(text: str) -> dict:
    return json.loads(text)


def _row(name: str, s: Mapping, speedup: float) -> str:
    return (f"| {name} | {s['params_count']:,} | {100 * s['accuracy']:.2f}% | "
            f"{s['latency_ms']:.2f} | {speedup:.2f} |")


def to_markdown(report: Mapping) -> str:
    if report.get("kind") != "adaptation":
        raise ConfigError("markdown output is only defined for adaptation reports")
    o, a = report["original"], report["adapted"]
    speed = o["latency_ms"] / a["latency_ms"] if a["latency_ms"] > 0 else float("inf")
    lines = [
        "| Model | #Parameters | Top-1 Accuracy | Latency(ms) | Speedup |",
        "|---|---|---|---|---|",
        _row("Original", o, 1.0),
        _row("GOS", a, speed),
        "",
        f"Stopped: {report['stop_reason']}; operators replaced: {len(report['replaced_operators'])}.",
    ]
    return "\n".join(lines) + "\n"


def render(report: Mapping, fmt: str) -> str:
    if fmt == "json":
        return to_json(report)
    if fmt == "markdown":
        return to_markdown(report)
    raise ConfigError(f"unknown report format {fmt!r}; expected one of {', '.join(FORMATS)}")


def emit(report: Mapping, fmt: str, path: str) -> None:
    _atomic_write(path, render(report, fmt).encode())
