"""Forward evaluation and reverse-mode differentiation of operator graphs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .. import catalog
from ..errors import KernelMissing, NonDifferentiable, NumericalError
from ..graph import CONSTANT, INPUT, OperatorGraph, infer_shapes
from .kernels import kernel


@dataclass
class Plan:
    """Per-graph evaluation schedule, computed once and reused across calls."""

    graph: OperatorGraph
    order: tuple
    batched: frozenset
    operands: dict
    consumers_needed: frozenset = field(default_factory=frozenset)
    # sum node id -> the per-channel cross_correlation it reduces (evaluated as one contraction)
    fused: dict = field(default_factory=dict)
    skipped: frozenset = field(default_factory=frozenset)

    @staticmethod
    def of(g: OperatorGraph) -> "Plan":
        table = infer_shapes(g)
        order = tuple(n for n in g.topo_order)
        fused = _channel_sum_pairs(g, table)
        return Plan(g, order, frozenset(table.batched), {n: g.operands(n) for n in order},
                    fused=fused, skipped=frozenset(fused.values()))


def _channel_sum_pairs(g: OperatorGraph, table) -> dict:
    """Find ``cross_correlation(reduce=none) -> sum(group_size=C_in)`` pairs.

    The sum of the per-input-channel maps is exactly the ordinary contracted
    correlation, so the pair is run as one kernel call and the C_out*C_in
    intermediate is never built.
    """
    pairs = {}
    for nid, node in g.nodes.items():
        if not node.is_instruction or node.opcode != "cross_correlation" or node.hyperparams.get("reduce") != "none":
            continue
        cons = g.consumers(nid)
        if nid == g.output_id or len(cons) != 1 or cons[0][1] != 0:
            continue
        sid = cons[0][0]
        s = g.nodes[sid]
        x_shape = table[g.operands(nid)[0]]
        if s.opcode == "sum" and len(x_shape) == 4 and s.hyperparams.get("group_size") == x_shape[1]:
            pairs[sid] = nid
    return pairs


def _contracted_hp(node) -> dict:
    return {**node.hyperparams, "reduce": "sum"}


_PLANS: dict[int, Plan] = {}


def plan_for(g: OperatorGraph) -> Plan:
    key = id(g)
    p = _PLANS.get(key)
    if p is None or p.graph is not g:
        if len(_PLANS) > 4096:
            _PLANS.clear()
        p = Plan.of(g)
        _PLANS[key] = p
    return p


def _runtime_hp(node, batched: bool, x_shape) -> Mapping:
    if node.opcode == "reshape" and batched:
        t = tuple(node.hyperparams["target"])
        return {"target": (x_shape[0],) + t[1:]}
    return node.hyperparams


def constant_value(node, dtype=np.float32) -> np.ndarray:
    return np.full(node.shape, node.value, dtype=dtype)


# non-finite values are detected explicitly and raised as NumericalError
@np.errstate(all="ignore")
def forward(g: OperatorGraph, params: Mapping[int, np.ndarray], x: np.ndarray, keep: bool = False,
            check: bool = True, fuse: bool = True) -> tuple:
    """Evaluate ``g`` on activation ``x``.

    ``params`` maps parameter node ids to arrays.  Returns ``(output, values)``
    where ``values`` holds every node's output when ``keep`` is set.  With
    ``fuse`` on, the per-channel maps of a channel-summed cross_correlation are
    not materialised and that node has no entry in ``values``.
    """
    plan = plan_for(g)
    fused = plan.fused if fuse else {}
    skipped = plan.skipped if fuse else frozenset()
    vals: dict[int, np.ndarray] = {}
    for nid in plan.order:
        node = g.nodes[nid]
        if node.kind == INPUT:
            vals[nid] = x if node.role == "activation" else params[nid]
        elif node.kind == CONSTANT:
            vals[nid] = params[nid] if node.trainable else constant_value(node, x.dtype)
        else:
            spec = catalog.lookup(node.opcode)
            if not spec.executable:
                raise KernelMissing(f"{node.opcode} is catalog-only")
            if nid in skipped:
                continue
            if nid in fused:
                xc = g.nodes[fused[nid]]
                xs = [vals[o] for o in plan.operands[xc.id]]
                out = kernel("cross_correlation").forward(xs, _contracted_hp(xc))
            else:
                xs = [vals[o] for o in plan.operands[nid]]
                out = kernel(node.opcode).forward(xs, _runtime_hp(node, nid in plan.batched, xs[0].shape))
            if out.dtype != x.dtype:
                out = out.astype(x.dtype)
            vals[nid] = out
    out = vals[g.output_id]
    if check and not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite output of operator graph at node {g.output_id}")
    return out, (vals if keep else None)


def eval_operator(g: OperatorGraph, params: Mapping[int, np.ndarray], x: np.ndarray) -> np.ndarray:
    return forward(g, params, x)[0]


@np.errstate(all="ignore")
def backward(g: OperatorGraph, vals: Mapping[int, np.ndarray], g_out: np.ndarray, wanted: set,
             need_input: bool = True, fuse: bool = True) -> tuple:
    """Reverse pass given forward ``vals``.

    Returns ``(grad wrt activation input or None, {param node id: grad})`` for
    the parameter ids in ``wanted``.  ``fuse`` must match the forward pass that
    produced ``vals``.
    """
    plan = plan_for(g)
    fused = plan.fused if fuse else {}
    # only propagate through nodes that lead to something we need
    targets = set(wanted)
    if need_input:
        targets.add(g.activation_input_id)
    relevant = set(targets)
    for nid in plan.order:
        if any(o in relevant for o in plan.operands.get(nid, ())):
            relevant.add(nid)
    grads: dict[int, np.ndarray] = {g.output_id: g_out}
    for nid in reversed(plan.order):
        node = g.nodes[nid]
        if not node.is_instruction or nid not in grads:
            continue
        if nid in fused:
            xc = g.nodes[fused[nid]]
            ops = plan.operands[xc.id]
            op, hp = "cross_correlation", _contracted_hp(xc)
        else:
            ops = plan.operands[nid]
            op = node.opcode
        if not any(o in relevant for o in ops):
            continue
        spec = catalog.lookup(op)
        if not spec.differentiable:
            raise NonDifferentiable(nid, op)
        xs = [vals[o] for o in ops]
        if nid not in fused:
            hp = _runtime_hp(node, nid in plan.batched, xs[0].shape)
        cots = kernel(op).vjp(xs, vals[nid], grads.pop(nid), hp)
        for o, c in zip(ops, cots):
            if o not in relevant:
                continue
            if o in grads:
                grads[o] = grads[o] + c
            else:
                grads[o] = c
    gx = grads.get(g.activation_input_id) if need_input else None
    if need_input and gx is None:
        gx = np.zeros_like(vals[g.activation_input_id])
    out = {}
    for nid in wanted:
        gr = grads.get(nid)
        out[nid] = np.zeros_like(vals[nid]) if gr is None else gr
    return gx, out


def trainable_ids(g: OperatorGraph) -> list:
    return [n.id for n in g.nodes.values() if n.is_parameter]
