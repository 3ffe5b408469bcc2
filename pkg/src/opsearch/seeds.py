"""Seed operator graphs and random operator generation."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import catalog
from .errors import BadHyperparam, IncompatibleElementCount, ShapeMismatch, SizeBound, Unsatisfiable
from .graph import (
    DEFAULT_LIMITS,
    INSTRUCTION,
    Edge,
    GraphLimits,
    Node,
    OperatorGraph,
    conform_output,
    prune_unused,
    validate,
)

SEED_KINDS = ("conv2d", "maxpool", "avgpool", "batchnorm", "linear", "activation", "reshape")

# generated per-sample tensors above this many elements are not worth exploring
MAX_SAMPLE_ELEMS = 1 << 15
MAX_RESTARTS = 50


def _channel_shape(shape: tuple) -> tuple:
    """Shape of a per-channel (dim 1) tensor broadcastable onto ``shape``."""
    if len(shape) >= 3:
        return (shape[1],) + (1,) * (len(shape) - 2)
    return (shape[-1],)


def _finish(nodes, edges, in_id, out_id, out_shape) -> OperatorGraph:
    g = OperatorGraph.build(nodes, edges, in_id, out_id, out_shape)
    problems = validate(g)
    if problems:
        raise ShapeMismatch("; ".join(f"{p.kind}: {p.detail}" for p in problems))
    return g


def build_seed(kind: str, in_shape: Sequence[int], out_shape: Sequence[int], **hp) -> OperatorGraph:
    """Standard operator decomposed into catalog instructions.

    Every seed ends in an ``identity`` node that serves as the graph output.
    """
    in_shape, out_shape = tuple(in_shape), tuple(out_shape)
    x = Node.activation(0, in_shape)
    if kind == "conv2d":
        if len(in_shape) != 4 or len(out_shape) != 4:
            raise ShapeMismatch("conv2d needs 4-d input and output shapes")
        n, c, h, w = in_shape
        co = out_shape[1]
        k = hp.get("kernel", 3)
        cc_hp = dict(kernel=k, stride=hp.get("stride", 1), padding=hp.get("padding", 0),
                     dilation=hp.get("dilation", 1), reduce="none")
        got = catalog.shape_of("cross_correlation", [in_shape, (co, c, k, k)], dict(cc_hp, reduce="sum"))
        if got != out_shape:
            raise ShapeMismatch(f"conv2d with {cc_hp} maps {list(in_shape)} to {list(got)}, not {list(out_shape)}")
        nodes = [
            x,
            Node.weight(1, (co, c, k, k)),
            Node.instruction(2, "cross_correlation", **cc_hp),
            Node.instruction(3, "sum", group_size=c),
            Node.constant(4, (co, 1, 1), trainable=True, init="zeros"),
            Node.instruction(5, "add"),
            Node.instruction(6, "identity"),
        ]
        edges = [(0, 2, 0), (1, 2, 1), (2, 3, 0), (3, 5, 0), (4, 5, 1), (5, 6, 0)]
        return _finish(nodes, edges, 0, 6, out_shape)
    if kind in ("maxpool", "avgpool"):
        p_hp = {k: hp[k] for k in ("kernel", "stride", "padding") if k in hp}
        nodes = [x, Node.instruction(1, kind, **p_hp), Node.instruction(2, "identity")]
        return _finish(nodes, [(0, 1, 0), (1, 2, 0)], 0, 2, out_shape)
    if kind == "batchnorm":
        if in_shape != out_shape or len(in_shape) < 2:
            raise ShapeMismatch("batchnorm keeps its (rank >= 2) input shape")
        variant = hp.get("variant", "affine")
        if variant == "affine":
            cs = _channel_shape(in_shape)
            nodes = [
                x,
                Node.instruction(1, "standardize"),
                Node.constant(2, cs, trainable=True, init="ones"),
                Node.instruction(3, "hadamard"),
                Node.constant(4, cs, trainable=True, init="zeros"),
                Node.instruction(5, "add"),
                Node.instruction(6, "identity"),
            ]
            edges = [(0, 1, 0), (1, 3, 0), (2, 3, 1), (3, 5, 0), (4, 5, 1), (5, 6, 0)]
            return _finish(nodes, edges, 0, 6, out_shape)
        if variant == "polynomial":
            nodes = [
                x,
                Node.constant(1, (3, in_shape[1]), trainable=True, init="poly3"),
                Node.instruction(2, "poly3"),
                Node.instruction(3, "identity"),
            ]
            return _finish(nodes, [(0, 2, 0), (1, 2, 1), (2, 3, 0)], 0, 3, out_shape)
        raise BadHyperparam(f"unknown batchnorm variant {variant!r}")
    if kind == "linear":
        if len(in_shape) != 2 or len(out_shape) != 2:
            raise ShapeMismatch("linear needs [N, in] -> [N, out] shapes")
        f, o = in_shape[1], out_shape[1]
        nodes = [
            x,
            Node.weight(1, (f, o)),
            Node.instruction(2, "matmul"),
            Node.constant(3, (o,), trainable=True, init="zeros"),
            Node.instruction(4, "add"),
            Node.instruction(5, "identity"),
        ]
        edges = [(0, 2, 0), (1, 2, 1), (2, 4, 0), (3, 4, 1), (4, 5, 0)]
        return _finish(nodes, edges, 0, 5, out_shape)
    if kind == "activation":
        opcode = hp.get("opcode", "relu")
        if catalog.lookup(opcode).replacement_class != "activation":
            raise BadHyperparam(f"{opcode} is not an activation")
        a_hp = {"slope": hp["slope"]} if "slope" in hp else {}
        nodes = [x, Node.instruction(1, opcode, **a_hp), Node.instruction(2, "identity")]
        return _finish(nodes, [(0, 1, 0), (1, 2, 0)], 0, 2, out_shape)
    if kind == "reshape":
        nodes = [x, Node.instruction(1, "reshape", target=out_shape), Node.instruction(2, "identity")]
        return _finish(nodes, [(0, 1, 0), (1, 2, 0)], 0, 2, out_shape)
    raise BadHyperparam(f"unknown seed kind {kind!r}")


# ---------------------------------------------------------------------------
# operand factory shared by random generation and node insertion


@dataclass
class Growth:
    """One instruction appended after an existing node."""

    opcode: str
    hyperparams: dict
    operands: list  # operand Nodes for slots 1.. (ids assigned by the caller)
    out_shape: tuple


def _divisors(n: int, cap: int = 64) -> list:
    return [d for d in range(1, min(n, cap) + 1) if n % d == 0]


def _random_hp(opcode: str, rng: np.random.Generator) -> dict:
    spec = catalog.lookup(opcode)
    hp = {}
    for h in spec.hyperparams:
        ch = h.choices()
        if ch:
            hp[h.name] = ch[int(rng.integers(len(ch)))]
    return hp


def _sample_elems(shape: tuple, batched: bool) -> int:
    return math.prod(shape[1:]) if batched else math.prod(shape)


def propose(opcode: str, x_shape: tuple, x_batched: bool, rng: np.random.Generator) -> Growth | None:
    """Random hyperparameters and fresh operand nodes for applying ``opcode`` to x.

    Returns None when no sensible binding was found.
    """
    spec = catalog.lookup(opcode)
    r = len(x_shape)
    ops: list[Node] = []
    hp = _random_hp(opcode, rng)
    if opcode == "reshape":
        if r <= 2:
            return None
        hp = {"target": (x_shape[0], math.prod(x_shape[1:]))}
    elif opcode in ("sum", "mean", "max", "min", "weighted_mean"):
        ax = catalog.reduce_axis(r)
        divs = _divisors(x_shape[ax])
        hp["group_size"] = divs[int(rng.integers(len(divs)))]
        if opcode == "weighted_mean":
            ops = [Node.constant(-1, (hp["group_size"],), trainable=True, init="ones")]
    elif opcode in ("maxpool", "avgpool"):
        k = int(rng.integers(1, 4))
        hp.update(kernel=k, stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, k // 2 + 1)))
    elif opcode == "cross_correlation":
        if r != 4:
            return None
        c = x_shape[1]
        k = int(rng.choice([1, 3, 5]))
        options = sorted({c, max(1, c // 2), min(2 * c, 64)})
        co = options[int(rng.integers(len(options)))]
        d = int(rng.choice([1, 1, 2]))
        hp.update(kernel=k, stride=1, dilation=d, padding=min(3, d * (k // 2)))
        if hp["reduce"] == "none" and co * c > 256:
            hp["reduce"] = "sum"
        ops = [Node.weight(-1, (co, c, k, k))]
    elif opcode == "matmul":
        if r < 2:
            return None
        last = x_shape[-1]
        options = sorted({last, max(1, last // 2)} | ({2 * last} if last <= 32 else set()))
        m = options[int(rng.integers(len(options)))]
        ops = [Node.weight(-1, (last, m))]
    elif opcode in ("add", "sub"):
        cs = _channel_shape(x_shape) if r >= 2 else (1,)
        ops = [Node.constant(-1, cs, trainable=True, init="zeros")]
    elif opcode == "hadamard":
        cs = _channel_shape(x_shape) if r >= 2 else (1,)
        ops = [Node.constant(-1, cs, trainable=True, init="ones")]
    elif opcode == "dot":
        ops = [Node.weight(-1, (x_shape[-1],), init="ones")]
    elif opcode == "outer":
        if r != 1:
            return None
        ops = [Node.weight(-1, (min(x_shape[0], 16),), init="ones")]
    elif opcode == "poly3":
        if r < 2:
            return None
        ops = [Node.constant(-1, (3, x_shape[1]), trainable=True, init="poly3")]
    elif opcode == "concat":
        return None  # merges two existing tensors; never grown with a fresh operand
    if len(ops) != spec.arity - 1:
        return None
    try:
        hp = catalog.bind_hyperparams(opcode, hp)
        out, ob = catalog.infer_output(opcode, [x_shape] + [o.shape for o in ops], [x_batched] + [False] * len(ops), hp)
    except (ShapeMismatch, BadHyperparam):
        return None
    if _sample_elems(out, ob) > MAX_SAMPLE_ELEMS:
        return None
    return Growth(opcode, hp, ops, out)


def append_growth(nodes: list, edges: list, src: int, growth: Growth, next_id: int) -> tuple:
    """Add ``growth`` fed by ``src``; returns (new node id, next free id)."""
    operand_ids = []
    for op in growth.operands:
        nodes.append(replace(op, id=next_id))
        operand_ids.append(next_id)
        next_id += 1
    nid = next_id
    nodes.append(Node(nid, INSTRUCTION, opcode=growth.opcode, hyperparams=growth.hyperparams))
    edges.append(Edge(src, nid, 0))
    for slot, oid in enumerate(operand_ids, start=1):
        edges.append(Edge(oid, nid, slot))
    return nid, nid + 1


def _bridge_conv(in_shape: tuple, out_shape: tuple, rng: np.random.Generator) -> Growth | None:
    n, c, h, w = in_shape
    _, co, ho, wo = out_shape
    combos = []
    for k in range(1, 8):
        for s in range(1, 4):
            for p in range(0, 4):
                for d in range(1, 4):
                    if k == 1 and d > 1:
                        continue
                    if catalog.conv_output_size(h, k, s, p, d) == ho and catalog.conv_output_size(w, k, s, p, d) == wo:
                        combos.append((k, s, p, d))
    if not combos:
        return None
    k, s, p, d = combos[int(rng.integers(len(combos)))]
    hp = catalog.bind_hyperparams("cross_correlation", dict(kernel=k, stride=s, padding=p, dilation=d))
    return Growth("cross_correlation", hp, [Node.weight(-1, (co, c, k, k))], (n, co, ho, wo))


def random_generate(in_shape: Sequence[int], out_shape: Sequence[int], rng: np.random.Generator,
                    max_nodes: int = 20, limits: GraphLimits | None = None,
                    opcodes: Sequence[str] | None = None) -> OperatorGraph:
    """Grow a random operator from the input by uniformly chosen instructions."""
    in_shape, out_shape = tuple(in_shape), tuple(out_shape)
    limits = limits or GraphLimits(max_nodes=max_nodes, max_edges=max(DEFAULT_LIMITS.max_edges, max_nodes + 5))
    pool = [o for o in (opcodes or catalog.executable_opcodes()) if o != "concat"]
    for _ in range(MAX_RESTARTS):
        g = _attempt(in_shape, out_shape, rng, limits, pool)
        if g is not None:
            return g
    raise Unsatisfiable(f"no valid operator for {list(in_shape)} -> {list(out_shape)} after {MAX_RESTARTS} restarts")


def _attempt(in_shape, out_shape, rng, limits: GraphLimits, pool) -> OperatorGraph | None:
    nodes: list[Node] = [Node.activation(0, in_shape)]
    edges: list[Edge] = []
    cur, cur_shape, next_id = 0, in_shape, 1
    # leave room for a three-node bridge plus its operand and a final reshape
    budget = max(1, limits.max_nodes - 5)
    steps = int(rng.integers(1, budget + 1))
    for _ in range(steps):
        choices = list(pool)
        rng.shuffle(choices)
        grown = None
        for opcode in choices:
            grown = propose(opcode, cur_shape, True, rng)
            if grown is not None:
                break
        if grown is None:
            break
        if len(nodes) + 1 + len(grown.operands) > budget:
            break
        cur, next_id = append_growth(nodes, edges, cur, grown, next_id)
        cur_shape = grown.out_shape
    if math.prod(cur_shape) != math.prod(out_shape) or cur_shape[0] != out_shape[0]:
        bridge = None
        if len(cur_shape) == 4 and len(out_shape) == 4:
            bridge = _bridge_conv(cur_shape, out_shape, rng)
        if bridge is not None:
            cur, next_id = append_growth(nodes, edges, cur, bridge, next_id)
        else:
            if len(cur_shape) > 2:
                flat = Growth("reshape", {"target": (cur_shape[0], math.prod(cur_shape[1:]))}, [],
                              (cur_shape[0], math.prod(cur_shape[1:])))
                cur, next_id = append_growth(nodes, edges, cur, flat, next_id)
                cur_shape = flat.out_shape
            if len(cur_shape) < 2:
                return None
            width = math.prod(out_shape[1:])
            if cur_shape[-1] * width > 1 << 17:
                return None
            lin = Growth("matmul", {}, [Node.weight(-1, (cur_shape[-1], width))], cur_shape[:-1] + (width,))
            cur, next_id = append_growth(nodes, edges, cur, lin, next_id)
    try:
        g = OperatorGraph.build(nodes, edges, 0, cur, out_shape)
        g = prune_unused(g)
        g = conform_output(g, limits)
    except (ShapeMismatch, IncompatibleElementCount, SizeBound, BadHyperparam):
        return None
    if validate(g, limits):
        return None
    return g
