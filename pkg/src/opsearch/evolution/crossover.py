"""Split-point crossover of two operator graphs."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..graph import DEFAULT_LIMITS, Edge, GraphLimits, OperatorGraph, infer_shapes
from .mutation import finalize


@dataclass(frozen=True)
class SplitPoint:
    a_node: int  # producer in parent A whose output is grafted
    b_node: int  # first consumer in parent B of the replaced producer
    b_producer: int  # node of B whose role A's node takes over
    shape: tuple


def preorder(g: OperatorGraph) -> list:
    """Pre-order walk from the activation input; children are consumers by id.

    Weight and constant operands are not visited: they travel with the
    instruction that reads them.
    """
    out, seen = [], set()
    stack = [g.activation_input_id]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        out.append(n)
        kids = sorted({d for d, _ in g.consumers(n)})
        stack.extend(reversed(kids))
    return out


def _reaches(g: OperatorGraph, src: int, dst: int, avoid: int) -> bool:
    seen, stack = {src}, [src]
    while stack:
        n = stack.pop()
        if n == dst:
            return True
        for d, _ in g.consumers(n):
            if d != avoid and d not in seen:
                seen.add(d)
                stack.append(d)
    return False


def cut_nodes(g: OperatorGraph) -> set:
    """Nodes every input->output path passes through."""
    cuts = {g.activation_input_id, g.output_id}
    for n in g.nodes.values():
        if n.is_instruction and n.id not in cuts and not _reaches(g, g.activation_input_id, g.output_id, n.id):
            cuts.add(n.id)
    return cuts


def depths(g: OperatorGraph) -> dict:
    """Longest instruction-path distance from the activation input."""
    d = {g.activation_input_id: 0}
    for n in g.topo_order:
        if n not in d:
            continue
        for c, _ in g.consumers(n):
            d[c] = max(d.get(c, 0), d[n] + 1)
    return d


def ancestors(g: OperatorGraph, nid: int) -> set:
    seen, stack = {nid}, [nid]
    while stack:
        for s in g.operands(stack.pop()):
            if s not in seen:
                seen.add(s)
                stack.append(s)
    return seen


def _graft(a: OperatorGraph, o1: int, b: OperatorGraph, q: int) -> tuple:
    """A's head ending at o1 followed by B's tail after q.

    Returns (raw graph, origin) where origin maps each offspring node id to
    (parent index 0|1, node id in that parent).
    """
    head = ancestors(a, o1)
    b_head = ancestors(b, q)
    tail = [n for n in b.nodes if n not in b_head]
    # leaves shared between B's head and tail are copied into the tail
    tail_set = set(tail)
    for e in b.edges:
        if e.dst in tail_set and e.src in b_head and e.src != q and b.nodes[e.src].is_leaf_operand:
            tail_set.add(e.src)
    base = max(max(a.nodes), max(b.nodes)) + 1
    mapping = {}
    for i, n in enumerate(sorted(tail_set)):
        mapping[n] = base + i
    mapping[q] = o1
    nodes = [a.nodes[n] for n in sorted(head)]
    origin = {n: (0, n) for n in head}
    for n in sorted(tail_set):
        nodes.append(replace(b.nodes[n], id=mapping[n]))
        origin[mapping[n]] = (1, n)
    edges = [e for e in a.edges if e.src in head and e.dst in head]
    for e in b.edges:
        if e.dst in tail_set and (e.src in tail_set or e.src == q):
            edges.append(Edge(mapping[e.src], mapping[e.dst], e.slot))
    out = mapping.get(b.output_id, o1 if b.output_id == q else None)
    g = OperatorGraph.build(nodes, edges, a.activation_input_id, out, a.required_output_shape)
    return g, origin


def _size(a, o1, b, q) -> tuple:
    head = ancestors(a, o1)
    b_head = ancestors(b, q)
    n = len(head) + len(b.nodes) - len(b_head)
    e = sum(1 for x in a.edges if x.dst in head) + sum(1 for x in b.edges if x.dst not in b_head)
    return n, e


def find_split_points(a: OperatorGraph, b: OperatorGraph, limits: GraphLimits = DEFAULT_LIMITS) -> list:
    ta, tb = infer_shapes(a), infer_shapes(b)
    ca, cb = cut_nodes(a), cut_nodes(b)
    da, db = depths(a), depths(b)
    order_b = preorder(b)
    points = []
    for o1 in preorder(a):
        if o1 not in ca:
            continue
        for q in order_b:
            if q not in cb or q == b.output_id or da[o1] != db[q]:
                continue
            if ta[o1] != tb[q] or (o1 in ta.batched) != (q in tb.batched):
                continue
            n1, e1 = _size(a, o1, b, q)
            n2, e2 = _size(b, q, a, o1) if o1 != a.output_id else (0, 0)
            if max(n1, n2) > limits.max_nodes or max(e1, e2) > limits.max_edges:
                continue
            o2 = min(d for d, _ in b.consumers(q))
            points.append(SplitPoint(o1, o2, q, ta[o1]))
    return points


def crossover_graphs(a: OperatorGraph, b: OperatorGraph, rng: np.random.Generator,
                     limits: GraphLimits = DEFAULT_LIMITS) -> tuple | None:
    """(offspring, origin map, split point) or None when no valid offspring exists."""
    points = find_split_points(a, b, limits)
    if not points:
        return None
    sp = points[int(rng.integers(len(points)))]
    raw, origin = _graft(a, sp.a_node, b, sp.b_producer)
    child = finalize(raw, limits)
    if child is None:
        return None
    return child, {k: v for k, v in origin.items() if k in child.nodes}, sp
