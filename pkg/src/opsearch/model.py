"""Model graphs: a DAG of operators plus built-in add/concat merges."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .engine.data import _atomic_write, load_blob, save_blob
from .engine.params import ParamStore, init_operator
from .errors import ModelShapeMismatch, ParseError
from .graph import OperatorGraph, canonical_hash, relabel_canonical
from .seeds import build_seed

MODEL_FORMAT_VERSION = 1
MODEL_INPUT = -1
MERGES = ("add", "concat")


@dataclass(frozen=True)
class ModelOp:
    id: int
    kind: str  # "graph" | "add" | "concat"
    graph: OperatorGraph | None = None
    name: str = ""

    @property
    def is_graph(self) -> bool:
        return self.kind == "graph"


@dataclass(frozen=True, eq=False)
class ModelGraph:
    operators: Mapping[int, ModelOp]
    edges: tuple  # (src op id or MODEL_INPUT, dst op id, slot)
    input_shape: tuple
    num_classes: int
    output_id: int
    history: tuple = ()

    # -- structure ----------------------------------------------------------
    def operands(self, op_id: int) -> list:
        return [s for s, d, _ in sorted(self.edges, key=lambda e: e[2]) if d == op_id]

    def consumers(self, op_id: int) -> list:
        return sorted(d for s, d, _ in self.edges if s == op_id)

    @cached_property
    def order(self) -> list:
        indeg = {o: 0 for o in self.operators}
        for s, d, _ in self.edges:
            indeg[d] += 1
        ready = sorted(o for o in self.operators if all(s == MODEL_INPUT for s in self.operands(o)))
        seen_in = {o: 0 for o in self.operators}
        out = []
        while ready:
            o = ready.pop(0)
            out.append(o)
            for d in self.consumers(o):
                seen_in[d] += 1
                real = sum(1 for s in self.operands(d) if s != MODEL_INPUT)
                if seen_in[d] == real:
                    ready.append(d)
                    ready.sort()
        if len(out) != len(self.operators):
            raise ModelShapeMismatch("model graph has a cycle or disconnected operators")
        return out

    def descendants(self, op_ids: Iterable[int]) -> set:
        seen = set(op_ids)
        stack = list(seen)
        while stack:
            o = stack.pop()
            for d in self.consumers(o):
                if d not in seen:
                    seen.add(d)
                    stack.append(d)
        return seen

    def graph_ops(self) -> list:
        return [o for o in self.order if self.operators[o].is_graph]

    def digest(self, op_id: int) -> int:
        return canonical_hash(self.operators[op_id].graph)

    # -- shapes ------------------------------------------------------------
    def output_shapes(self) -> dict:
        """Declared (batch-1) output shape of every operator."""
        shapes = {MODEL_INPUT: tuple(self.input_shape)}
        for o in self.order:
            op = self.operators[o]
            ins = [shapes[s] for s in self.operands(o)]
            if op.is_graph:
                if len(ins) != 1:
                    raise ModelShapeMismatch(f"operator {o} takes one input, has {len(ins)}")
                if tuple(ins[0]) != tuple(op.graph.activation_shape):
                    raise ModelShapeMismatch(
                        f"operator {o} expects {list(op.graph.activation_shape)}, receives {list(ins[0])}")
                shapes[o] = tuple(op.graph.required_output_shape)
            elif op.kind == "add":
                if len(ins) != 2 or ins[0] != ins[1]:
                    raise ModelShapeMismatch(f"add operator {o} needs two equal shapes, got {ins}")
                shapes[o] = ins[0]
            elif op.kind == "concat":
                a, b = ins
                if len(a) != len(b) or a[0] != b[0] or a[2:] != b[2:]:
                    raise ModelShapeMismatch(f"concat operator {o} cannot join {a} and {b}")
                shapes[o] = (a[0], a[1] + b[1]) + tuple(a[2:])
            else:
                raise ModelShapeMismatch(f"unknown operator kind {op.kind!r}")
        if shapes[self.output_id] != (self.input_shape[0], self.num_classes):
            raise ModelShapeMismatch(f"model output {shapes[self.output_id]} is not [N, {self.num_classes}]")
        return shapes

    def check(self) -> "ModelGraph":
        self.output_shapes()
        return self

    # -- edits -------------------------------------------------------------
    def replace_operators(self, op_ids: Iterable[int], graph: OperatorGraph) -> "ModelGraph":
        ops = dict(self.operators)
        for o in op_ids:
            ops[o] = replace(ops[o], graph=graph)
        return replace(self, operators=ops)

    def with_history(self, entry: dict) -> "ModelGraph":
        return replace(self, history=self.history + (entry,))


def relabel_model(m: ModelGraph, params: ParamStore | None = None):
    """Canonically relabel every operator graph so equal digests share node ids.

    With ``params`` the tensors are re-keyed too and (model, params) is returned.
    """
    ops, maps = {}, {}
    for o, op in m.operators.items():
        if op.is_graph:
            g, maps[o] = relabel_canonical(op.graph)
            ops[o] = replace(op, graph=g)
        else:
            ops[o] = op
    out = replace(m, operators=ops)
    if params is None:
        return out
    store = ParamStore({(o, maps[o][nid]): v for (o, nid), v in params.items()},
                       frozenset((o, maps[o][nid]) for o, nid in params.frozen))
    return out, store


def init_params(m: ModelGraph, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    for o in m.order:
        op = m.operators[o]
        if op.is_graph:
            store.tensors.update(init_operator(o, op.graph, rng))
    return store


# ---------------------------------------------------------------------------
# builders


def chain(graphs: list, num_classes: int, names: list | None = None) -> ModelGraph:
    ops = {i: ModelOp(i, "graph", g, (names or [""] * len(graphs))[i]) for i, g in enumerate(graphs)}
    edges = [(MODEL_INPUT, 0, 0)] + [(i - 1, i, 0) for i in range(1, len(graphs))]
    m = ModelGraph(ops, tuple(edges), tuple(graphs[0].activation_shape), num_classes, len(graphs) - 1)
    return relabel_model(m).check()


def toy_cnn(in_shape=(1, 1, 16, 16), num_classes: int = 3, c1: int = 8, c2: int = 16, hidden: int = 48) -> ModelGraph:
    """conv-relu-pool-conv-relu-flatten-linear-relu-linear (~50k parameters)."""
    n, c, h, w = in_shape
    h2, w2 = h // 2, w // 2
    flat = c2 * h2 * w2
    graphs = [
        build_seed("conv2d", in_shape, (n, c1, h, w), kernel=3, padding=1),
        build_seed("activation", (n, c1, h, w), (n, c1, h, w), opcode="relu"),
        build_seed("maxpool", (n, c1, h, w), (n, c1, h2, w2), kernel=2, stride=2),
        build_seed("conv2d", (n, c1, h2, w2), (n, c2, h2, w2), kernel=3, padding=1),
        build_seed("activation", (n, c2, h2, w2), (n, c2, h2, w2), opcode="relu"),
        build_seed("reshape", (n, c2, h2, w2), (n, flat)),
        build_seed("linear", (n, flat), (n, hidden)),
        build_seed("activation", (n, hidden), (n, hidden), opcode="relu"),
        build_seed("linear", (n, hidden), (n, num_classes)),
    ]
    names = ["conv1", "relu1", "pool1", "conv2", "relu2", "flatten", "fc1", "relu3", "fc2"]
    return chain(graphs, num_classes, names)


# ---------------------------------------------------------------------------
# serialization


def model_to_dict(m: ModelGraph) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "input_shape": list(m.input_shape),
        "num_classes": m.num_classes,
        "output_id": m.output_id,
        "operators": [
            {"id": op.id, "kind": op.kind, "name": op.name,
             **({"graph": op.graph.to_dict()} if op.is_graph else {})}
            for op in m.operators.values()
        ],
        "edges": [list(e) for e in m.edges],
        "replacement_history": list(m.history),
    }


def model_from_dict(d: Mapping) -> ModelGraph:
    try:
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ParseError(f"unsupported model format version {d.get('format_version')!r}")
        ops = {}
        for od in d["operators"]:
            g = OperatorGraph.from_dict(od["graph"]) if od["kind"] == "graph" else None
            ops[od["id"]] = ModelOp(od["id"], od["kind"], g, od.get("name", ""))
        m = ModelGraph(ops, tuple(tuple(e) for e in d["edges"]), tuple(d["input_shape"]), d["num_classes"],
                       d["output_id"], tuple(d.get("replacement_history", ())))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed model document: {exc}") from None
    return m


def params_layout(m: ModelGraph, params: ParamStore) -> tuple:
    """(flat float32 vector, [{operator, node, offset, shape}])"""
    chunks, layout, off = [], [], 0
    for key in sorted(params.keys()):
        v = np.asarray(params[key], np.float32)
        layout.append({"operator": key[0], "node": key[1], "offset": off, "shape": list(v.shape)})
        chunks.append(v.reshape(-1))
        off += v.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, np.float32)
    return flat, layout


def save_model(m: ModelGraph, params: ParamStore | None, path: str) -> None:
    doc = model_to_dict(m)
    if params is not None:
        flat, layout = params_layout(m, params)
        weights = os.path.splitext(path)[0] + ".weights.gosd"
        save_blob(flat if flat.size else np.zeros(1, np.float32), weights)
        doc["weights"] = {"file": os.path.basename(weights), "tensors": layout}
    _atomic_write(path, (json.dumps(doc, indent=1) + "\n").encode())


def load_model(path: str) -> tuple:
    """Returns (model, params or None)."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read model {path}: {exc}") from None
    m = model_from_dict(doc)
    w = doc.get("weights")
    if w is None:
        return relabel_model(m).check(), None
    flat = load_blob(os.path.join(os.path.dirname(os.path.abspath(path)), w["file"]))
    store = ParamStore()
    for t in w["tensors"]:
        n = int(np.prod(t["shape"]))
        try:
            store[(t["operator"], t["node"])] = flat[t["offset"] : t["offset"] + n].reshape(t["shape"]).copy()
        except (KeyError, ValueError) as exc:
            raise ParseError(f"weights do not match the layout in {path}: {exc}") from None
    m, store = relabel_model(m, store)
    return m.check(), store
