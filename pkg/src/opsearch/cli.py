"""Command-line entry point: ``opsearch <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys

from . import adapt as adapt_mod, catalog, report
from .analyzer import analyze, select
from .cost import deployable, load_profile
from .engine.data import _atomic_write, load_pair, synthetic
from .errors import ConfigError, KernelMissing, NumericalError, OpSearchError, ParseError
from .evolution.search import SearchContext, evolve
from .model import load_model, relabel_model, save_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_IMPROVEMENT = 3
EXIT_NUMERICAL = 4


def _load_config(args) -> adapt_mod.RunConfig:
    doc = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ParseError("config file must hold a JSON object")
    return adapt_mod.RunConfig.from_dict(
        doc,
        rng_seed=getattr(args, "seed", None),
        device=getattr(args, "device", None),
        iterations=getattr(args, "iterations", None),
        max_layers_replaced=getattr(args, "max_layers", None),
        stop_on_target=getattr(args, "target_ms", None),
    )


def _dataset(args, cfg):
    if getattr(args, "dataset", None):
        return load_pair(args.dataset)
    return synthetic(cfg.dataset_seed)


def _model(args):
    m, params = load_model(args.model)
    if params is None:
        raise ParseError(f"model {args.model} has no weights")
    return m, params


def _write(text: str, out: str | None) -> None:
    if out:
        _atomic_write(out, text.encode())
    else:
        sys.stdout.write(text)


def _json(doc) -> str:
    return report.to_json(doc)


# -- commands ------------------------------------------------------------------


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    m, params = _model(args)
    profile = load_profile(cfg.device)
    fits, need = deployable(m, params, profile)
    records = analyze(m, params, profile, cfg.n_i)
    sel = select(records, fits, cfg.n_o, cfg.closeness_tol)
    doc = {
        "format_version": adapt_mod.REPORT_VERSION,
        "kind": "analysis",
        "deployable": fits,
        "required_bytes": need,
        "capacity_bytes": profile.memory_capacity_bytes,
        "operators": [
            {"operator": r.operator, "name": m.operators[r.operator].name, "digest": f"{r.digest:016x}",
             "latency_ms": r.latency.mean_ms, "params_count": r.params}
            for r in records
        ],
        "selection": {"branch": sel.branch, "chosen": list(sel.chosen), "digest": f"{sel.digest:016x}"},
    }
    _write(_json(doc), args.out)
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _load_config(args)
    m, params = _model(args)
    profile = load_profile(cfg.device)
    data = _dataset(args, cfg)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    res = adapt_mod.adapt(m, params, data, profile, cfg, log=log)
    _write(report.render(res.report, args.format), args.out)
    if args.save_model:
        save_model(res.model, res.params, args.save_model)
    return EXIT_NO_IMPROVEMENT if res.no_improvement else EXIT_OK


def cmd_evolve_one(args) -> int:
    cfg = _load_config(args)
    m, params = _model(args)
    m, params = relabel_model(m, params)
    profile = load_profile(cfg.device)
    data = _dataset(args, cfg)
    if args.operator not in m.operators or not m.operators[args.operator].is_graph:
        raise ConfigError(f"operator {args.operator} is not an operator graph of the model")
    from .engine.train import accuracy

    baseline = float(accuracy(m, params, data.val))
    ctx = SearchContext(m, params, [args.operator], data, profile, cfg.search(), baseline)
    res = evolve(ctx)
    doc = {
        "format_version": adapt_mod.REPORT_VERSION,
        "kind": "evolve_one",
        "operator": args.operator,
        "baseline_accuracy": baseline,
        "no_improvement": res.no_improvement,
        "evaluations": res.evaluations,
        "best": {"graph": res.best.graph.to_dict(), **adapt_mod._fitness_dict(res.best)},
        "pareto": [adapt_mod._fitness_dict(c) for c in res.pareto],
        "log": res.log,
    }
    _write(_json(doc), args.out)
    return EXIT_NO_IMPROVEMENT if res.no_improvement else EXIT_OK


def cmd_gen_dataset(args) -> int:
    adapt_mod.gen_dataset(args.seed, args.out, args.n_train, args.n_val)
    return EXIT_OK


def cmd_toy_model(args) -> int:
    data = load_pair(args.dataset) if args.dataset else synthetic(args.dataset_seed)
    m, params = adapt_mod.trained_toy(data, args.seed)
    save_model(m, params, args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    m, params = _model(args)
    profile = load_profile(cfg.device)
    data = _dataset(args, cfg)
    if args.experiment == "random-vs-adapted":
        doc = adapt_mod.random_vs_adapted(m, params, data, profile, args.n, cfg.rng_seed, args.operator, cfg.train)
    else:
        try:
            values = [int(v) for v in args.values.split(",")] if args.values else list(adapt_mod.DEFAULT_SWEEP)
        except ValueError:
            raise ConfigError(f"--values must be comma-separated integers, got {args.values!r}") from None
        doc = adapt_mod.sweep(m, params, data, profile, cfg, values)
    _write(_json(doc), args.out)
    return EXIT_OK


def cmd_catalog(args) -> int:
    _write(_json(catalog.catalog_document()), args.out)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _common(p, model=True, dataset=True):
    if model:
        p.add_argument("--model", required=True, help="model JSON (weights sidecar alongside)")
    p.add_argument("--device", help="profile name (rpi3-like, phone-like) or JSON path")
    p.add_argument("--config", help="RunConfig JSON; flags override its values")
    p.add_argument("--seed", type=int, help="search seed")
    if dataset:
        p.add_argument("--dataset", help="GOSD dataset file (default: synthetic from the config's dataset_seed)")
    p.add_argument("--out", help="output file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opsearch", description="Hardware-aware operator search.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="rank operators and show the selection")
    _common(p, dataset=False)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("adapt", help="run the full adaptation loop")
    _common(p)
    p.add_argument("--format", choices=report.FORMATS, default="json")
    p.add_argument("--iterations", type=int)
    p.add_argument("--max-layers", type=int)
    p.add_argument("--target-ms", type=float, help="stop once model latency reaches this value")
    p.add_argument("--save-model", help="write the adapted model here")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evolve-one", help="evolve a single operator")
    _common(p)
    p.add_argument("--operator", type=int, required=True)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_evolve_one)

    p = sub.add_parser("gen-dataset", help="write the synthetic dataset")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=1800)
    p.add_argument("--n-val", type=int, default=600)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("toy-model", help="train the toy CNN and save it")
    p.add_argument("--dataset")
    p.add_argument("--dataset-seed", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy_model)

    p = sub.add_parser("experiment", help="random-vs-adapted or max-nodes sweep")
    p.add_argument("experiment", choices=("random-vs-adapted", "sweep"))
    _common(p)
    p.add_argument("--n", type=int, default=100, help="trials per arm")
    p.add_argument("--operator", type=int, help="operator id (default: first convolution)")
    p.add_argument("--values", help="comma-separated max_nodes values for the sweep")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("catalog", help="catalog utilities")
    p.add_argument("action", choices=("dump",))
    p.add_argument("--out")
    p.set_defaults(func=cmd_catalog)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericalError, KernelMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OpSearchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
