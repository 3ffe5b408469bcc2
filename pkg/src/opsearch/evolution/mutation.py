"""The five mutation families over operator graphs."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import catalog
from ..errors import (
    BadHyperparam,
    CycleDetected,
    IncompatibleElementCount,
    OutputUnreachable,
    ShapeMismatch,
    SizeBound,
)
from ..graph import (
    DEFAULT_LIMITS,
    INSTRUCTION,
    Edge,
    GraphLimits,
    Node,
    OperatorGraph,
    conform_output,
    infer_shapes,
    prune_unused,
    validate,
)
from ..seeds import _channel_shape, propose

FAMILIES = ("ReplaceNode", "SwapAggregation", "AddNode", "DeleteNode", "MutateHyperparam")
NOOP = "noop"
MAX_RETRIES = 20
MERGE_OPCODES = ("add", "sub", "hadamard", "concat")


@dataclass(frozen=True)
class MutationResult:
    graph: OperatorGraph
    tag: str


# ---------------------------------------------------------------------------
# repair and finalisation


def _leaf_operand(g: OperatorGraph, nid: int, slot: int) -> Node | None:
    """The slot operand of ``nid`` if it is a parameter leaf used only there."""
    ops = g.operands(nid)
    if slot >= len(ops):
        return None
    node = g.nodes[ops[slot]]
    if not node.is_leaf_operand or len(g.consumers(node.id)) != 1:
        return None
    return node


def _fitted_operand(opcode: str, leaf: Node, x_shape: tuple) -> tuple | None:
    s = leaf.shape
    if opcode == "matmul" and len(s) == 2:
        return (x_shape[-1], s[1])
    if opcode == "cross_correlation" and len(s) == 4 and len(x_shape) == 4:
        return (s[0], x_shape[1], s[2], s[3])
    if opcode == "poly3" and len(x_shape) >= 2:
        return (3, x_shape[1])
    if opcode in ("add", "sub", "hadamard") and leaf.kind == "constant":
        return _channel_shape(x_shape) if len(x_shape) >= 2 else (1,)
    if opcode == "dot":
        return (x_shape[-1],)
    return None


def repair(g: OperatorGraph) -> OperatorGraph:
    """Resize parameter operands whose consumer's input shape has changed."""
    nodes = dict(g.nodes)
    for _ in range(len(g.nodes)):
        cur = OperatorGraph.build(nodes.values(), g.edges, g.activation_input_id, g.output_id,
                                  g.required_output_shape)
        try:
            infer_shapes(cur)
            return cur
        except ShapeMismatch as exc:
            nid = exc.node
            if nid is None or nid not in cur.nodes or not cur.nodes[nid].is_instruction:
                return cur
            node = cur.nodes[nid]
            leaf = _leaf_operand(cur, nid, 1)
            if leaf is None:
                return cur
            table = _partial_shapes(cur, nid)
            x_shape = table.get(cur.operands(nid)[0])
            if x_shape is None:
                return cur
            new_shape = _fitted_operand(node.opcode, leaf, x_shape)
            if new_shape is None or tuple(new_shape) == tuple(leaf.shape):
                return cur
            nodes[leaf.id] = replace(leaf, shape=tuple(new_shape))
    return OperatorGraph.build(nodes.values(), g.edges, g.activation_input_id, g.output_id, g.required_output_shape)


def _partial_shapes(g: OperatorGraph, stop: int) -> dict:
    """Shapes of every node computable before ``stop`` in topological order."""
    table, batched = {}, set()
    for nid in g.topo_order:
        if nid == stop:
            break
        node = g.nodes[nid]
        if not node.is_instruction:
            table[nid] = node.shape
            if node.role == "activation":
                batched.add(nid)
            continue
        ops = g.operands(nid)
        if any(o not in table for o in ops):
            continue
        try:
            shape, b = catalog.infer_output(node.opcode, [table[o] for o in ops], [o in batched for o in ops],
                                            node.hyperparams)
        except (ShapeMismatch, BadHyperparam):
            continue
        table[nid] = shape
        if b:
            batched.add(nid)
    return table


def finalize(g: OperatorGraph, limits: GraphLimits = DEFAULT_LIMITS) -> OperatorGraph | None:
    """repair -> prune -> conform -> validate; None when the result is invalid."""
    try:
        g = repair(g)
        g = prune_unused(g)
        g = conform_output(g, limits)
    except (ShapeMismatch, IncompatibleElementCount, SizeBound, OutputUnreachable, BadHyperparam, CycleDetected):
        return None
    return None if validate(g, limits) else g


# ---------------------------------------------------------------------------
# family helpers


def _rewire(edges, old_src: int, new_src: int, skip_dst: int | None = None) -> list:
    return [Edge(new_src, e.dst, e.slot) if e.src == old_src and e.dst != skip_dst else e for e in edges]


def _build(g: OperatorGraph, nodes, edges, output_id=None) -> OperatorGraph:
    return OperatorGraph.build(nodes.values() if isinstance(nodes, dict) else nodes, edges,
                               g.activation_input_id, g.output_id if output_id is None else output_id,
                               g.required_output_shape)


def _replaceable(g: OperatorGraph) -> list:
    return [n.id for n in g.nodes.values() if n.is_instruction
            and catalog.lookup(n.opcode).replacement_class != "aggregation"
            and catalog.replacements_for(n.opcode)]


def _aggregations(g: OperatorGraph) -> list:
    return [n.id for n in g.nodes.values() if n.is_instruction and n.opcode in catalog.AGGREGATION_REDUCERS]


def _deletable(g: OperatorGraph, table) -> list:
    out = []
    for n in g.nodes.values():
        if not n.is_instruction:
            continue
        path = [o for o in g.operands(n.id) if o in table.batched]
        if not path:
            continue
        if n.id == g.output_id and not g.nodes[path[0]].is_instruction:
            continue
        out.append(n.id)
    return out


def _hyper_slots(g: OperatorGraph) -> list:
    slots = []
    for n in g.nodes.values():
        if not n.is_instruction:
            continue
        for h in catalog.lookup(n.opcode).hyperparams:
            if len(h.choices()) >= 2:
                slots.append((n.id, h.name))
        if n.opcode == "cross_correlation":
            w = _leaf_operand(g, n.id, 1)
            if w is not None and w.kind == "input" and w.origin_shape is not None:
                slots.append((n.id, "channels"))
    return slots


def feasible_families(g: OperatorGraph, limits: GraphLimits = DEFAULT_LIMITS) -> list:
    table = infer_shapes(g)
    fams = []
    if _replaceable(g):
        fams.append("ReplaceNode")
    if _aggregations(g):
        fams.append("SwapAggregation")
    if len(g.nodes) < limits.max_nodes and len(g.edges) < limits.max_edges:
        fams.append("AddNode")
    if _deletable(g, table):
        fams.append("DeleteNode")
    if _hyper_slots(g):
        fams.append("MutateHyperparam")
    return fams


def _pick(seq, rng):
    return seq[int(rng.integers(len(seq)))]


def _rebind(opcode: str, old_hp, rng) -> dict:
    spec = catalog.lookup(opcode)
    hp = {}
    for h in spec.hyperparams:
        if h.name in old_hp and h.contains(old_hp[h.name]):
            hp[h.name] = old_hp[h.name]
        elif h.choices():
            hp[h.name] = _pick(h.choices(), rng)
    return catalog.bind_hyperparams(opcode, hp)


# ---------------------------------------------------------------------------
# families (each returns a raw graph, or None when it cannot apply)


def replace_node(g: OperatorGraph, rng) -> OperatorGraph | None:
    nid = _pick(_replaceable(g), rng)
    node = g.nodes[nid]
    new_op = _pick(catalog.replacements_for(node.opcode), rng)
    nodes = dict(g.nodes)
    nodes[nid] = Node(nid, INSTRUCTION, opcode=new_op, hyperparams=_rebind(new_op, node.hyperparams, rng))
    return _build(g, nodes, g.edges)


def swap_aggregation(g: OperatorGraph, rng) -> OperatorGraph | None:
    nid = _pick(_aggregations(g), rng)
    node = g.nodes[nid]
    new_op = _pick([o for o in catalog.AGGREGATION_REDUCERS if o != node.opcode], rng)
    nodes = dict(g.nodes)
    nodes[nid] = Node(nid, INSTRUCTION, opcode=new_op, hyperparams=_rebind(new_op, node.hyperparams, rng))
    return _build(g, nodes, g.edges)


def _descendants(g: OperatorGraph, nid: int) -> set:
    seen, stack = {nid}, [nid]
    while stack:
        for dst, _ in g.consumers(stack.pop()):
            if dst not in seen:
                seen.add(dst)
                stack.append(dst)
    return seen


def add_node(g: OperatorGraph, rng) -> OperatorGraph | None:
    table = infer_shapes(g)
    anchors = [n.id for n in g.nodes.values() if n.is_instruction or n.id == g.activation_input_id]
    u = _pick(anchors, rng)
    opcode = _pick(catalog.executable_opcodes(), rng)
    nodes = dict(g.nodes)
    edges = list(g.edges)
    vid = g.next_id()
    if opcode in MERGE_OPCODES and (opcode == "concat" or rng.random() < 0.5):
        below = _descendants(g, u)
        partners = []
        for w in table.batched:
            if w in below:
                continue
            try:
                catalog.infer_output(opcode, [table[u], table[w]], [True, True], {})
            except ShapeMismatch:
                continue
            partners.append(w)
        if not partners:
            return None
        w = _pick(sorted(partners), rng)
        nodes[vid] = Node.instruction(vid, opcode)
        edges = _rewire(edges, u, vid)
        edges += [Edge(u, vid, 0), Edge(w, vid, 1)]
    else:
        grown = propose(opcode, table[u], u in table.batched, rng)
        if grown is None:
            return None
        ids = []
        for op in grown.operands:
            nodes[vid] = replace(op, id=vid)
            ids.append(vid)
            vid += 1
        nodes[vid] = Node(vid, INSTRUCTION, opcode=grown.opcode, hyperparams=grown.hyperparams)
        edges = _rewire(edges, u, vid)
        edges.append(Edge(u, vid, 0))
        edges += [Edge(oid, vid, s) for s, oid in enumerate(ids, start=1)]
    out = vid if u == g.output_id else g.output_id
    return _build(g, nodes, edges, out)


def delete_node(g: OperatorGraph, rng) -> OperatorGraph | None:
    table = infer_shapes(g)
    nid = _pick(_deletable(g, table), rng)
    p = [o for o in g.operands(nid) if o in table.batched][0]
    nodes = {k: v for k, v in g.nodes.items() if k != nid}
    edges = [e for e in g.edges if e.dst != nid]
    edges = _rewire(edges, nid, p)
    out = p if nid == g.output_id else g.output_id
    return _build(g, nodes, edges, out)


def _repad(opcode: str, hp: dict, in_shape: tuple, want: tuple) -> dict:
    """Padding that restores the previous spatial output, if one exists."""
    k, s, d = hp["kernel"], hp["stride"], hp.get("dilation", 1)
    limit = 3 if opcode == "cross_correlation" else min(3, k // 2)
    for p in range(0, limit + 1):
        if (catalog.conv_output_size(in_shape[2], k, s, p, d) == want[2]
                and catalog.conv_output_size(in_shape[3], k, s, p, d) == want[3]):
            return dict(hp, padding=p)
    return hp


def mutate_hyperparam(g: OperatorGraph, rng) -> OperatorGraph | None:
    nid, name = _pick(_hyper_slots(g), rng)
    node = g.nodes[nid]
    nodes = dict(g.nodes)
    if name == "channels":
        w = _leaf_operand(g, nid, 1)
        base = w.origin_shape[0]
        options = sorted({max(1, int(round(m * base))) for m in catalog.CHANNEL_MULTIPLIERS} - {w.shape[0]})
        if not options:
            return None
        nodes[w.id] = replace(w, shape=(_pick(options, rng),) + tuple(w.shape[1:]))
        return _build(g, nodes, g.edges)
    spec = catalog.lookup(node.opcode).hyperparam(name)
    options = [v for v in spec.choices() if v != node.hyperparams[name]]
    hp = dict(node.hyperparams)
    hp[name] = _pick(options, rng)
    if node.opcode in ("cross_correlation", "maxpool", "avgpool") and name in ("kernel", "stride", "dilation"):
        table = infer_shapes(g)
        x_shape = table[g.operands(nid)[0]]
        hp = _repad(node.opcode, hp, x_shape, table[nid])
    if node.opcode == "cross_correlation" and name == "kernel":
        w = _leaf_operand(g, nid, 1)
        if w is None:
            return None
        nodes[w.id] = replace(w, shape=tuple(w.shape[:2]) + (hp["kernel"], hp["kernel"]))
    try:
        nodes[nid] = replace(node, hyperparams=catalog.bind_hyperparams(node.opcode, hp))
    except BadHyperparam:
        return None
    return _build(g, nodes, g.edges)


APPLY = {
    "ReplaceNode": replace_node,
    "SwapAggregation": swap_aggregation,
    "AddNode": add_node,
    "DeleteNode": delete_node,
    "MutateHyperparam": mutate_hyperparam,
}


def mutate_graph(g: OperatorGraph, rng: np.random.Generator, limits: GraphLimits = DEFAULT_LIMITS,
                 retries: int = MAX_RETRIES) -> MutationResult:
    """One mutation from a uniformly drawn feasible family; parent clone on failure."""
    fams = feasible_families(g, limits)
    for _ in range(retries):
        if not fams:
            break
        fam = _pick(fams, rng)
        raw = APPLY[fam](g, rng)
        if raw is None:
            continue
        out = finalize(raw, limits)
        if out is not None:
            return MutationResult(out, fam)
    return MutationResult(g, NOOP)
