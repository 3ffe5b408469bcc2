"""Operator computation graphs: structure, validation, shape inference, pruning
and canonical hashing."""
from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping

from . import catalog
from .errors import (
    BadHyperparam,
    CycleDetected,
    IncompatibleElementCount,
    OutputUnreachable,
    ShapeMismatch,
    SizeBound,
    UnknownOpcode,
)

INSTRUCTION = "instruction"
INPUT = "input"
CONSTANT = "constant"

ACTIVATION = "activation"
WEIGHT = "weight"


@dataclass(frozen=True)
class GraphLimits:
    max_nodes: int = 20
    max_edges: int = 25


DEFAULT_LIMITS = GraphLimits()


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    opcode: str | None = None
    hyperparams: Mapping = field(default_factory=dict)
    shape: tuple | None = None
    role: str | None = None
    trainable: bool = False
    init: str = "zeros"
    value: float = 0.0
    origin_shape: tuple | None = None

    @staticmethod
    def instruction(id: int, opcode: str, **hyperparams) -> "Node":
        return Node(id, INSTRUCTION, opcode=opcode, hyperparams=catalog.bind_hyperparams(opcode, hyperparams))

    @staticmethod
    def activation(id: int, shape) -> "Node":
        return Node(id, INPUT, shape=tuple(shape), role=ACTIVATION)

    @staticmethod
    def weight(id: int, shape, init: str = "he") -> "Node":
        shape = tuple(shape)
        return Node(id, INPUT, shape=shape, role=WEIGHT, trainable=True, init=init, origin_shape=shape)

    @staticmethod
    def constant(id: int, shape, trainable: bool = False, init: str = "value", value: float = 0.0) -> "Node":
        return Node(id, CONSTANT, shape=tuple(shape), trainable=trainable, init=init, value=float(value))

    @property
    def is_instruction(self) -> bool:
        return self.kind == INSTRUCTION

    @property
    def is_leaf_operand(self) -> bool:
        """Weights and constants: operands that are not computed from the activation."""
        return self.kind == CONSTANT or (self.kind == INPUT and self.role == WEIGHT)

    @property
    def is_parameter(self) -> bool:
        return (self.kind == INPUT and self.role == WEIGHT) or (self.kind == CONSTANT and self.trainable)

    def label(self) -> tuple:
        """Structural label used by canonical forms (weight values excluded)."""
        if self.kind == INSTRUCTION:
            return ("I", self.opcode, tuple(sorted((k, _freeze(v)) for k, v in self.hyperparams.items())))
        if self.kind == INPUT:
            return ("A" if self.role == ACTIVATION else "W", self.shape)
        if self.trainable:
            return ("C", self.shape, True)
        return ("C", self.shape, False, self.init, round(self.value, 9))

    def with_hyperparams(self, **changes) -> "Node":
        hp = dict(self.hyperparams)
        hp.update(changes)
        return replace(self, hyperparams=catalog.bind_hyperparams(self.opcode, hp))


def _freeze(v):
    if isinstance(v, list):
        return tuple(v)
    return v


@dataclass(frozen=True, order=True)
class Edge:
    src: int
    dst: int
    slot: int


@dataclass(frozen=True)
class Violation:
    kind: str
    node: int | None = None
    detail: str = ""


class ShapeTable(dict):
    """node id -> output shape; ``batched`` holds ids whose dim 0 is the batch axis."""

    def __init__(self, *args, batched=(), **kw):
        super().__init__(*args, **kw)
        self.batched = set(batched)


@dataclass(frozen=True, eq=False)
class OperatorGraph:
    nodes: Mapping[int, Node]
    edges: tuple
    activation_input_id: int
    output_id: int
    required_output_shape: tuple

    @staticmethod
    def build(nodes: Iterable[Node], edges: Iterable, activation_input_id: int, output_id: int,
              required_output_shape) -> "OperatorGraph":
        node_map = {n.id: n for n in nodes}
        edge_list = tuple(sorted(Edge(*e) if not isinstance(e, Edge) else e for e in edges))
        return OperatorGraph(dict(sorted(node_map.items())), edge_list, activation_input_id, output_id,
                             tuple(required_output_shape))

    # -- adjacency -------------------------------------------------------
    @cached_property
    def _operands(self) -> dict:
        ops: dict[int, dict[int, int]] = {nid: {} for nid in self.nodes}
        for e in self.edges:
            ops.setdefault(e.dst, {})
            if e.slot in ops[e.dst]:
                ops[e.dst][e.slot] = -1  # duplicated slot marker
            else:
                ops[e.dst][e.slot] = e.src
        return ops

    @cached_property
    def _consumers(self) -> dict:
        cons: dict[int, list] = {nid: [] for nid in self.nodes}
        for e in self.edges:
            cons.setdefault(e.src, []).append((e.dst, e.slot))
        return {k: sorted(v) for k, v in cons.items()}

    def operands(self, nid: int) -> list:
        """Operand node ids of ``nid`` ordered by slot."""
        slots = self._operands.get(nid, {})
        return [slots[s] for s in sorted(slots)]

    def consumers(self, nid: int) -> list:
        """(consumer id, slot) pairs reading ``nid``."""
        return self._consumers.get(nid, [])

    @cached_property
    def topo_order(self) -> tuple:
        indeg = {nid: 0 for nid in self.nodes}
        for e in self.edges:
            if e.dst in indeg:
                indeg[e.dst] += 1
        ready = sorted(n for n, d in indeg.items() if d == 0)
        queue = deque(ready)
        order = []
        while queue:
            n = queue.popleft()
            order.append(n)
            for dst, _ in self.consumers(n):
                if dst not in indeg:
                    continue
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    queue.append(dst)
        if len(order) != len(self.nodes):
            raise CycleDetected("operator graph contains a cycle")
        return tuple(order)

    @property
    def instruction_ids(self) -> list:
        return [nid for nid, n in self.nodes.items() if n.is_instruction]

    def next_id(self) -> int:
        return max(self.nodes) + 1 if self.nodes else 0

    def with_changes(self, nodes=None, edges=None, output_id=None, required_output_shape=None) -> "OperatorGraph":
        return OperatorGraph.build(
            (nodes if nodes is not None else self.nodes).values()
            if isinstance(nodes if nodes is not None else self.nodes, Mapping)
            else nodes,
            edges if edges is not None else self.edges,
            self.activation_input_id,
            self.output_id if output_id is None else output_id,
            self.required_output_shape if required_output_shape is None else required_output_shape,
        )

    @property
    def activation_shape(self) -> tuple:
        return self.nodes[self.activation_input_id].shape

    def to_dict(self) -> dict:
        out = []
        for n in self.nodes.values():
            d = {"id": n.id, "kind": n.kind}
            if n.kind == INSTRUCTION:
                d["opcode"] = n.opcode
                d["hyperparams"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in n.hyperparams.items()}
            else:
                d["shape"] = list(n.shape)
                if n.kind == INPUT:
                    d["role"] = n.role
                else:
                    d["trainable"] = n.trainable
                    d["value"] = n.value
                d["init"] = n.init
                if n.origin_shape is not None and n.origin_shape != n.shape:
                    d["origin_shape"] = list(n.origin_shape)
            out.append(d)
        return {
            "nodes": out,
            "edges": [[e.src, e.dst, e.slot] for e in self.edges],
            "activation_input_id": self.activation_input_id,
            "output_id": self.output_id,
            "required_output_shape": list(self.required_output_shape),
        }

    @staticmethod
    def from_dict(d: Mapping) -> "OperatorGraph":
        nodes = []
        for nd in d["nodes"]:
            kind = nd["kind"]
            if kind == INSTRUCTION:
                nodes.append(Node(nd["id"], INSTRUCTION, opcode=nd["opcode"],
                                  hyperparams=catalog.bind_hyperparams(nd["opcode"], nd.get("hyperparams", {}))))
            elif kind == INPUT:
                shape = tuple(nd["shape"])
                origin = tuple(nd.get("origin_shape", shape))
                nodes.append(Node(nd["id"], INPUT, shape=shape, role=nd["role"],
                                  trainable=nd["role"] == WEIGHT, init=nd.get("init", "he"),
                                  origin_shape=origin if nd["role"] == WEIGHT else None))
            elif kind == CONSTANT:
                nodes.append(Node(nd["id"], CONSTANT, shape=tuple(nd["shape"]), trainable=nd["trainable"],
                                  init=nd.get("init", "value"), value=float(nd.get("value", 0.0))))
            else:
                raise ValueError(f"unknown node kind {kind!r}")
        return OperatorGraph.build(nodes, [tuple(e) for e in d["edges"]], d["activation_input_id"],
                                   d["output_id"], d["required_output_shape"])


# ---------------------------------------------------------------------------
# shape inference


def infer_shapes(g: OperatorGraph) -> ShapeTable:
    table = ShapeTable()
    for nid in g.topo_order:
        node = g.nodes[nid]
        if node.kind == INSTRUCTION:
            spec = catalog.lookup(node.opcode)
            ops = g.operands(nid)
            if len(ops) != spec.arity or -1 in ops:
                raise ShapeMismatch(f"{node.opcode} expects {spec.arity} operands, got {len(ops)}", node=nid)
            for o in ops:
                if o not in table:
                    raise ShapeMismatch(f"operand {o} has no shape", node=nid)
            try:
                shape, batched = catalog.infer_output(
                    node.opcode, [table[o] for o in ops], [o in table.batched for o in ops], node.hyperparams
                )
            except ShapeMismatch as exc:
                raise ShapeMismatch(exc.detail, node=nid) from None
            except BadHyperparam as exc:
                raise ShapeMismatch(str(exc), node=nid) from None
            table[nid] = shape
            if batched:
                table.batched.add(nid)
        else:
            table[nid] = catalog.check_shape(node.shape)
            if node.kind == INPUT and node.role == ACTIVATION:
                table.batched.add(nid)
    return table


# ---------------------------------------------------------------------------
# reachability


def _forward_reach(g: OperatorGraph) -> set:
    seen = {g.activation_input_id}
    stack = [g.activation_input_id]
    while stack:
        n = stack.pop()
        for dst, _ in g.consumers(n):
            if dst not in seen and dst in g.nodes:
                seen.add(dst)
                stack.append(dst)
    return seen


def _backward_reach(g: OperatorGraph) -> set:
    seen = {g.output_id}
    stack = [g.output_id]
    while stack:
        n = stack.pop()
        for src in g.operands(n):
            if src not in seen and src in g.nodes:
                seen.add(src)
                stack.append(src)
    return seen


def live_nodes(g: OperatorGraph) -> set:
    """Nodes on some activation-input -> output path, plus the operands they read."""
    fwd = _forward_reach(g)
    if g.output_id not in fwd:
        raise OutputUnreachable(f"output {g.output_id} not reachable from input {g.activation_input_id}")
    bwd = _backward_reach(g)
    keep = (fwd & bwd) | {g.activation_input_id, g.output_id}
    for nid in list(keep):
        for src in g.operands(nid):
            if src in g.nodes and g.nodes[src].is_leaf_operand:
                keep.add(src)
    return keep


def prune_unused(g: OperatorGraph) -> OperatorGraph:
    keep = live_nodes(g)
    if len(keep) == len(g.nodes):
        return g
    nodes = [n for nid, n in g.nodes.items() if nid in keep]
    edges = [e for e in g.edges if e.src in keep and e.dst in keep]
    return OperatorGraph.build(nodes, edges, g.activation_input_id, g.output_id, g.required_output_shape)


# ---------------------------------------------------------------------------
# validation


def validate(g: OperatorGraph, limits: GraphLimits = DEFAULT_LIMITS) -> list:
    """All invariant violations of ``g``; empty means valid."""
    v: list[Violation] = []
    n_nodes, n_edges = len(g.nodes), len(g.edges)
    if not 1 < n_nodes <= limits.max_nodes:
        v.append(Violation("SizeBound", None, f"nodes={n_nodes}"))
    if not 1 < n_edges <= limits.max_edges:
        v.append(Violation("SizeBound", None, f"edges={n_edges}"))

    act = g.nodes.get(g.activation_input_id)
    if act is None or act.kind != INPUT or act.role != ACTIVATION:
        v.append(Violation("Structure", g.activation_input_id, "activation input missing"))
        return v
    if g.output_id not in g.nodes:
        v.append(Violation("Structure", g.output_id, "output node missing"))
        return v
    if not g.nodes[g.output_id].is_instruction:
        v.append(Violation("Structure", g.output_id, "output must be an instruction"))
    activations = [n.id for n in g.nodes.values() if n.kind == INPUT and n.role == ACTIVATION]
    if activations != [g.activation_input_id]:
        v.append(Violation("Structure", None, f"expected one activation input, found {activations}"))

    for e in g.edges:
        if e.src not in g.nodes or e.dst not in g.nodes:
            v.append(Violation("Structure", e.dst, f"dangling edge {e}"))
    if any(x.kind == "Structure" for x in v):
        return v

    for nid, node in g.nodes.items():
        slots = g._operands.get(nid, {})
        if node.kind != INSTRUCTION:
            if slots:
                v.append(Violation("SlotArity", nid, "input/constant node has incoming edges"))
            continue
        try:
            spec = catalog.lookup(node.opcode)
        except UnknownOpcode:
            v.append(Violation("UnknownOpcode", nid, node.opcode))
            continue
        if sorted(slots) != list(range(spec.arity)) or -1 in slots.values():
            v.append(Violation("SlotArity", nid, f"{node.opcode} slots {sorted(slots)} != 0..{spec.arity - 1}"))
        try:
            catalog.bind_hyperparams(node.opcode, node.hyperparams)
        except BadHyperparam as exc:
            v.append(Violation("BadHyperparam", nid, str(exc)))

    try:
        g.topo_order
    except CycleDetected:
        v.append(Violation("Cycle", None, "graph has a cycle"))
        return v

    try:
        keep = live_nodes(g)
        for nid in g.nodes:
            if nid not in keep:
                v.append(Violation("Unreachable", nid, "node not on an input->output path"))
    except OutputUnreachable:
        v.append(Violation("Unreachable", g.output_id, "output unreachable from input"))

    if any(x.kind in ("SlotArity", "UnknownOpcode", "BadHyperparam") for x in v):
        return v
    try:
        table = infer_shapes(g)
    except ShapeMismatch as exc:
        v.append(Violation("ShapeMismatch", exc.node, exc.detail))
        return v
    if table[g.output_id] != tuple(g.required_output_shape):
        v.append(Violation("OutputShape", g.output_id,
                           f"{list(table[g.output_id])} != required {list(g.required_output_shape)}"))
    if g.output_id not in table.batched:
        v.append(Violation("OutputShape", g.output_id, "output does not depend on the batch axis"))
    return v


def is_valid(g: OperatorGraph, limits: GraphLimits = DEFAULT_LIMITS) -> bool:
    return not validate(g, limits)


# ---------------------------------------------------------------------------
# output conformance


def conform_output(g: OperatorGraph, limits: GraphLimits = DEFAULT_LIMITS) -> OperatorGraph:
    table = infer_shapes(g)
    have = table[g.output_id]
    want = tuple(g.required_output_shape)
    if have == want:
        return g
    if math.prod(have) != math.prod(want):
        raise IncompatibleElementCount(f"{list(have)} ({math.prod(have)}) vs {list(want)} ({math.prod(want)})")
    if g.output_id in table.batched and have[0] != want[0]:
        raise IncompatibleElementCount(f"batch extent differs: {list(have)} vs {list(want)}")
    if len(g.nodes) + 1 > limits.max_nodes or len(g.edges) + 1 > limits.max_edges:
        raise SizeBound("appending a reshape would exceed the graph bounds")
    rid = g.next_id()
    nodes = list(g.nodes.values()) + [Node.instruction(rid, "reshape", target=want)]
    edges = list(g.edges) + [Edge(g.output_id, rid, 0)]
    return OperatorGraph.build(nodes, edges, g.activation_input_id, rid, want)


# ---------------------------------------------------------------------------
# canonical form


def canonical_order(g: OperatorGraph) -> list:
    """Node ids in canonical order: post-order DFS from the output over operand slots."""
    order: list[int] = []
    seen: set[int] = set()
    stack = [(g.output_id, False)]
    while stack:
        nid, expanded = stack.pop()
        if expanded:
            order.append(nid)
            continue
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((nid, True))
        for src in reversed(g.operands(nid)):
            if src not in seen:
                stack.append((src, False))
    # a node can be pushed twice before expansion; keep first completion only
    out, done = [], set()
    for nid in order:
        if nid not in done:
            done.add(nid)
            out.append(nid)
    return out


def canonical_form(g: OperatorGraph) -> tuple:
    order = canonical_order(g)
    index = {nid: i for i, nid in enumerate(order)}
    records = []
    for nid in order:
        node = g.nodes[nid]
        records.append((node.label(), tuple(index[s] for s in g.operands(nid))))
    return (tuple(g.required_output_shape), index[g.activation_input_id] if g.activation_input_id in index else -1,
            tuple(records))


def canonical_hash(g: OperatorGraph) -> int:
    blob = repr(canonical_form(g)).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")


def relabel(g: OperatorGraph, mapping: Mapping[int, int]) -> OperatorGraph:
    nodes = [replace(n, id=mapping[n.id]) for n in g.nodes.values()]
    edges = [Edge(mapping[e.src], mapping[e.dst], e.slot) for e in g.edges]
    return OperatorGraph.build(nodes, edges, mapping[g.activation_input_id], mapping[g.output_id],
                               g.required_output_shape)


def relabel_canonical(g: OperatorGraph) -> tuple:
    """Relabel node ids to their canonical positions; returns (graph, old->new)."""
    order = canonical_order(g)
    rest = [nid for nid in g.nodes if nid not in set(order)]
    mapping = {nid: i for i, nid in enumerate(order + rest)}
    return relabel(g, mapping), mapping


def parameter_nodes(g: OperatorGraph) -> list:
    return [n for n in g.nodes.values() if n.is_parameter]
