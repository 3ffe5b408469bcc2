"""The closed set of mathematical instructions operators are built from.

Every entry records its operand typing, a shape rule, a cost formula and the
replacement class used by node-replacement mutations.  Shapes are full tensor
shapes; tensors derived from an operator's activation input are *batched*,
meaning dimension 0 is the batch axis.  Shape rules reject any operation that
would mix the batch axis into per-sample dimensions, which is what lets a
graph declared with batch 1 be evaluated on a mini-batch of any size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .errors import BadHyperparam, ShapeMismatch, UnknownOpcode

CATALOG_VERSION = 1

CATEGORIES = ("LinearAlgebra", "Calculus", "Activation", "Convolution", "Pooling", "ProbStat", "Aggregation")

Shape = tuple


@dataclass(frozen=True)
class HyperparamSpec:
    name: str
    kind: str  # "integer" | "real" | "enum" | "shape"
    range: tuple = ()
    default: Any = None

    def __post_init__(self):
        if self.kind == "integer":
            lo, hi = self.range
            if lo > hi:
                raise ValueError(f"empty integer range for {self.name}")
        if self.kind != "shape" and not self.contains(self.default):
            raise ValueError(f"default of {self.name} outside its range")

    def contains(self, value) -> bool:
        if self.kind == "integer":
            return isinstance(value, int) and not isinstance(value, bool) and self.range[0] <= value <= self.range[1]
        if self.kind == "real":
            return self.range[0] <= value <= self.range[1]
        if self.kind == "enum":
            return value in self.range
        if self.kind == "shape":
            return isinstance(value, (tuple, list)) and all(isinstance(d, int) and d >= 1 for d in value)
        return False

    def choices(self) -> list:
        """Discrete values a mutation may pick (shape-kind params are never mutated)."""
        if self.kind == "integer":
            return list(range(self.range[0], self.range[1] + 1))
        if self.kind == "enum":
            return list(self.range)
        return []


@dataclass(frozen=True)
class InstructionSpec:
    opcode: str
    category: str
    arity: int
    arg_kinds: tuple
    hyperparams: tuple = ()
    shape_rule: str = ""
    replacement_class: str = ""
    flops_formula: str = ""
    differentiable: bool = True
    executable: bool = True
    weight_slots: tuple = ()
    description: str = ""

    def hyperparam(self, name: str) -> HyperparamSpec:
        for hp in self.hyperparams:
            if hp.name == name:
                return hp
        raise KeyError(name)

    def defaults(self) -> dict:
        return {hp.name: hp.default for hp in self.hyperparams if hp.kind != "shape"}


@dataclass(frozen=True)
class CostTerms:
    flops: int
    param_elems: int


# --------------------------------------------------------------------------
# shape rules
#
# Every rule takes (shapes, batched, hp) and returns (shape, batched).


def _prod(dims) -> int:
    return math.prod(dims) if dims else 1


def _need_rank(shape, ranks, what):
    if len(shape) not in ranks:
        raise ShapeMismatch(f"{what} must have rank in {sorted(ranks)}, got {list(shape)}")


def _bcast_check(a, b, ba, bb):
    """Second operand must broadcast onto the first without touching the batch axis."""
    if len(b) > len(a):
        raise ShapeMismatch(f"operand {list(b)} has higher rank than {list(a)}")
    for da, db in zip(reversed(a), reversed(b)):
        if db != da and db != 1:
            raise ShapeMismatch(f"{list(b)} does not broadcast to {list(a)}")
    if bb and not ba:
        raise ShapeMismatch("batched operand cannot broadcast onto an unbatched one")
    if ba and bb and (len(a) != len(b) or a[0] != b[0]):
        raise ShapeMismatch("batched operands must share the batch axis")
    if ba and not bb and len(b) == len(a) and b[0] != 1:
        raise ShapeMismatch("unbatched operand spans the batch axis")


def _rule_elementwise(shapes, batched, hp):
    return tuple(shapes[0]), batched[0]


def _rule_binary_broadcast(shapes, batched, hp):
    a, b = shapes
    _bcast_check(a, b, batched[0], batched[1])
    return tuple(a), batched[0]


def _rule_matmul(shapes, batched, hp):
    a, b = shapes
    ba, bb = batched
    _need_rank(a, {2, 3, 4}, "matmul left operand")
    _need_rank(b, {2, 3, 4}, "matmul right operand")
    if a[-1] != b[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {list(a)} @ {list(b)}")
    if len(b) == 2:
        if bb:
            raise ShapeMismatch("right matmul operand would contract the batch axis")
        return tuple(a[:-1]) + (b[-1],), ba
    if len(a) != len(b):
        raise ShapeMismatch("batched matmul operands must have equal rank")
    lead = []
    for da, db in zip(a[:-2], b[:-2]):
        if da != db and 1 not in (da, db):
            raise ShapeMismatch(f"leading dims differ: {list(a)} @ {list(b)}")
        lead.append(max(da, db))
    if ba != bb:
        other = b if ba else a
        if other[0] != 1:
            raise ShapeMismatch("unbatched operand spans the batch axis")
    if ba and bb and a[0] != b[0]:
        raise ShapeMismatch("batched operands must share the batch axis")
    return tuple(lead) + (a[-2], b[-1]), ba or bb


def _rule_matvec(shapes, batched, hp):
    a, b = shapes
    _need_rank(a, {2}, "matrix operand")
    _need_rank(b, {1}, "vector operand")
    if a[1] != b[0]:
        raise ShapeMismatch(f"inner dimensions differ: {list(a)} @ {list(b)}")
    if any(batched):
        raise ShapeMismatch("matrix-vector product would contract the batch axis")
    return (a[0],), False


def _rule_outer(shapes, batched, hp):
    a, b = shapes
    _need_rank(a, {1}, "outer left operand")
    _need_rank(b, {1}, "outer right operand")
    if batched[1]:
        raise ShapeMismatch("right outer operand cannot be batched")
    return (a[0], b[0]), batched[0]


def _rule_dot(shapes, batched, hp):
    a, b = shapes
    _bcast_check(a, b, batched[0], batched[1])
    if len(a) == 1 and batched[0]:
        raise ShapeMismatch("dot over a batched vector would contract the batch axis")
    return tuple(a[:-1]) + (1,), batched[0]


def _rule_last_axis_reduce(shapes, batched, hp):
    (a,) = shapes
    if len(a) == 1 and batched[0]:
        raise ShapeMismatch("reduction would contract the batch axis")
    return tuple(a[:-1]) + (1,), batched[0]


def _rule_matrix_reduce(shapes, batched, hp):
    (a,) = shapes
    _need_rank(a, {2, 3, 4}, "matrix operand")
    if len(a) == 2 and batched[0]:
        raise ShapeMismatch("matrix reduction would contract the batch axis")
    out = tuple(a[:-2]) + (1,)
    return out, batched[0]


def _rule_square_same(shapes, batched, hp):
    (a,) = shapes
    _need_rank(a, {2, 3, 4}, "matrix operand")
    if a[-1] != a[-2]:
        raise ShapeMismatch(f"matrix must be square, got {list(a)}")
    if len(a) == 2 and batched[0]:
        raise ShapeMismatch("matrix op would touch the batch axis")
    return tuple(a), batched[0]


def _rule_square_scalar(shapes, batched, hp):
    _rule_square_same(shapes, batched, hp)
    return tuple(shapes[0][:-2]) + (1,), batched[0]


def _rule_square_vector(shapes, batched, hp):
    _rule_square_same(shapes, batched, hp)
    return tuple(shapes[0][:-1]), batched[0]


def _rule_matrix_singular(shapes, batched, hp):
    (a,) = shapes
    _need_rank(a, {2, 3, 4}, "matrix operand")
    if len(a) == 2 and batched[0]:
        raise ShapeMismatch("matrix op would touch the batch axis")
    return tuple(a[:-2]) + (min(a[-1], a[-2]),), batched[0]


def _rule_qr(shapes, batched, hp):
    (a,) = shapes
    _need_rank(a, {2, 3, 4}, "matrix operand")
    if len(a) == 2 and batched[0]:
        raise ShapeMismatch("matrix op would touch the batch axis")
    return tuple(a[:-1]) + (min(a[-1], a[-2]),), batched[0]


def _rule_transpose(shapes, batched, hp):
    (a,) = shapes
    _need_rank(a, {2, 3, 4}, "transpose operand")
    if len(a) == 2 and batched[0]:
        raise ShapeMismatch("transpose would move the batch axis")
    return tuple(a[:-2]) + (a[-1], a[-2]), batched[0]


def _rule_kron(shapes, batched, hp):
    a, b = shapes
    _need_rank(a, {2}, "kron operand")
    _need_rank(b, {2}, "kron operand")
    if any(batched):
        raise ShapeMismatch("kronecker product would mix the batch axis")
    return (a[0] * b[0], a[1] * b[1]), False


def _conv_out(size, k, s, p, d):
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def conv_output_size(size, kernel, stride=1, padding=0, dilation=1):
    """Spatial output extent of a strided, padded, dilated sliding window."""
    return _conv_out(size, kernel, stride, padding, dilation)


def _rule_cross_correlation(shapes, batched, hp):
    x, w = shapes
    _need_rank(x, {4}, "cross-correlation input")
    _need_rank(w, {4}, "cross-correlation weight")
    if batched[1]:
        raise ShapeMismatch("cross-correlation weight cannot be batched")
    n, c, h, wd = x
    co, ci, kh, kw = w
    if ci != c:
        raise ShapeMismatch(f"weight expects {ci} input channels, input has {c}")
    k = hp["kernel"]
    if kh != k or kw != k:
        raise ShapeMismatch(f"weight spatial dims {kh}x{kw} disagree with kernel {k}")
    s, p, d = hp["stride"], hp["padding"], hp["dilation"]
    ho, wo = _conv_out(h, k, s, p, d), _conv_out(wd, k, s, p, d)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"window {k} (dilation {d}) larger than padded input {h}x{wd}")
    channels = co if hp["reduce"] == "sum" else co * c
    return (n, channels, ho, wo), batched[0]


def _rule_pool(shapes, batched, hp):
    (x,) = shapes
    _need_rank(x, {4}, "pooling input")
    k, s, p = hp["kernel"], hp["stride"], hp["padding"]
    if p > k // 2:
        raise BadHyperparam(f"padding {p} exceeds half the pooling window {k}")
    n, c, h, w = x
    ho, wo = _conv_out(h, k, s, p, 1), _conv_out(w, k, s, p, 1)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"pooling window {k} larger than padded input {h}x{w}")
    return (n, c, ho, wo), batched[0]


def _rule_softmax(shapes, batched, hp):
    (a,) = shapes
    if len(a) == 1 and batched[0]:
        raise ShapeMismatch("softmax over a batched vector would mix samples")
    return tuple(a), batched[0]


def norm_axes(rank: int) -> tuple:
    """Axes normalised over by standardize / poly3 (per sample, per channel)."""
    if rank >= 3:
        return tuple(range(2, rank))
    if rank == 2:
        return (1,)
    return (0,)


def _rule_standardize(shapes, batched, hp):
    (a,) = shapes
    if len(a) == 1 and batched[0]:
        raise ShapeMismatch("standardization over a batched vector would mix samples")
    return tuple(a), batched[0]


def _rule_poly3(shapes, batched, hp):
    x, coef = shapes
    _need_rank(x, {2, 3, 4}, "polynomial input")
    if batched[1]:
        raise ShapeMismatch("polynomial coefficients cannot be batched")
    if tuple(coef) != (3, x[1]):
        raise ShapeMismatch(f"coefficients must be [3, {x[1]}], got {list(coef)}")
    return tuple(x), batched[0]


def _rule_reshape(shapes, batched, hp):
    (x,) = shapes
    target = tuple(hp["target"])
    if not 1 <= len(target) <= 4 or any(d < 1 for d in target):
        raise BadHyperparam(f"invalid reshape target {list(target)}")
    if _prod(target) != _prod(x):
        raise ShapeMismatch(f"cannot reshape {list(x)} to {list(target)}")
    if batched[0] and target[0] != x[0]:
        raise ShapeMismatch("reshape must keep the batch axis")
    return target, batched[0]


def reduce_axis(rank: int) -> int:
    return 1 if rank >= 2 else 0


def _rule_group_reduce(shapes, batched, hp):
    (x,) = shapes
    if len(x) == 1 and batched[0]:
        raise ShapeMismatch("reduction would contract the batch axis")
    ax = reduce_axis(len(x))
    g = hp["group_size"]
    if x[ax] % g:
        raise ShapeMismatch(f"group size {g} does not divide axis of extent {x[ax]}")
    out = list(x)
    out[ax] = x[ax] // g
    return tuple(out), batched[0]


def _rule_weighted_mean(shapes, batched, hp):
    x, w = shapes
    if batched[1]:
        raise ShapeMismatch("weights cannot be batched")
    if len(w) != 1 or w[0] != hp["group_size"]:
        raise ShapeMismatch(f"weights must be [{hp['group_size']}], got {list(w)}")
    return _rule_group_reduce([x], batched[:1], hp)


def _rule_concat(shapes, batched, hp):
    a, b = shapes
    if len(a) != len(b) or len(a) < 2:
        raise ShapeMismatch(f"cannot concatenate {list(a)} and {list(b)}")
    if batched[0] != batched[1]:
        raise ShapeMismatch("cannot concatenate batched with unbatched operand")
    if a[0] != b[0] or tuple(a[2:]) != tuple(b[2:]):
        raise ShapeMismatch(f"cannot concatenate {list(a)} and {list(b)} along axis 1")
    return (a[0], a[1] + b[1]) + tuple(a[2:]), batched[0]


def _rule_binary_same(shapes, batched, hp):
    return _rule_binary_broadcast(shapes, batched, hp)


SHAPE_RULES: dict[str, Callable] = {
    "elementwise": _rule_elementwise,
    "broadcast_binary": _rule_binary_broadcast,
    "matmul": _rule_matmul,
    "matvec": _rule_matvec,
    "outer": _rule_outer,
    "dot": _rule_dot,
    "last_axis_reduce": _rule_last_axis_reduce,
    "matrix_reduce": _rule_matrix_reduce,
    "square_same": _rule_square_same,
    "square_scalar": _rule_square_scalar,
    "square_vector": _rule_square_vector,
    "matrix_singular": _rule_matrix_singular,
    "qr": _rule_qr,
    "transpose": _rule_transpose,
    "kron": _rule_kron,
    "cross_correlation": _rule_cross_correlation,
    "pool": _rule_pool,
    "softmax": _rule_softmax,
    "standardize": _rule_standardize,
    "poly3": _rule_poly3,
    "reshape": _rule_reshape,
    "group_reduce": _rule_group_reduce,
    "weighted_mean": _rule_weighted_mean,
    "concat": _rule_concat,
    "binary_same": _rule_binary_same,
}


# --------------------------------------------------------------------------
# flops formulas: (input_shapes, output_shape, hp) -> count


def _f_zero(ins, out, hp):
    return 0


def _per_out(k):
    return lambda ins, out, hp: k * _prod(out)


def _per_in(k):
    return lambda ins, out, hp: k * _prod(ins[0])


def _f_matmul(ins, out, hp):
    return 2 * _prod(out) * ins[0][-1]


def _f_matvec(ins, out, hp):
    return 2 * _prod(ins[0])


def _f_cross_correlation(ins, out, hp):
    n, c, _, _ = ins[0]
    co = ins[1][0]
    ho, wo = out[2], out[3]
    return 2 * n * co * c * ho * wo * hp["kernel"] ** 2


def _f_pool_max(ins, out, hp):
    return _prod(out) * hp["kernel"] ** 2


def _f_pool_avg(ins, out, hp):
    return _prod(out) * (hp["kernel"] ** 2 + 1)


def _cubic(k):
    def f(ins, out, hp):
        a = ins[0]
        n = max(a[-1], a[-2]) if len(a) >= 2 else a[0]
        lead = _prod(a[:-2]) if len(a) > 2 else 1
        return int(k * lead * n ** 3)
    return f


def _f_kron(ins, out, hp):
    return _prod(out)


def _f_mean(ins, out, hp):
    return _prod(ins[0]) + _prod(out)


def _f_weighted_mean(ins, out, hp):
    return 2 * _prod(ins[0]) + 2 * _prod(out)


FLOPS: dict[str, Callable] = {
    "zero": _f_zero,
    "out1": _per_out(1),
    "out2": _per_out(2),
    "out3": _per_out(3),
    "out4": _per_out(4),
    "out5": _per_out(5),
    "out6": _per_out(6),
    "in1": _per_in(1),
    "in2": _per_in(2),
    "matmul": _f_matmul,
    "matvec": _f_matvec,
    "cross_correlation": _f_cross_correlation,
    "pool_max": _f_pool_max,
    "pool_avg": _f_pool_avg,
    "cubic_1": _cubic(1),
    "cubic_2": _cubic(2),
    "cubic_10": _cubic(10),
    "cubic_third": _cubic(1 / 3),
    "kron": _f_kron,
    "mean": _f_mean,
    "weighted_mean": _f_weighted_mean,
}


# --------------------------------------------------------------------------
# catalog


def _int(name, lo, hi, default):
    return HyperparamSpec(name, "integer", (lo, hi), default)


def _enum(name, values, default):
    return HyperparamSpec(name, "enum", tuple(values), default)


_CONV_HP = (
    _int("stride", 1, 3, 1),
    _int("padding", 0, 3, 0),
    _int("dilation", 1, 3, 1),
    _int("kernel", 1, 7, 3),
    _enum("reduce", ("sum", "none"), "sum"),
)
_POOL_HP = (_int("kernel", 1, 7, 2), _int("stride", 1, 3, 2), _int("padding", 0, 3, 0))
_ANNOTATIONS = (_enum("tile", (False, True), False), _enum("unroll", (False, True), False))
_GROUP = (_int("group_size", 1, 64, 1),)

LEAKY_SLOPES = (0.01, 0.03, 0.1)
CHANNEL_MULTIPLIERS = (0.5, 0.75, 1.0, 1.25)

_M, _V, _T4, _S, _A = "matrix", "vector", "tensor4d", "scalar", "any"


def _entries():
    S = InstructionSpec
    yield from [
        # linear algebra
        S("matmul", "LinearAlgebra", 2, (_M, _M), (), "matmul", "matmul", "matmul", weight_slots=(1,),
          description="C = A B"),
        S("add", "LinearAlgebra", 2, (_A, _A), (), "broadcast_binary", "elementwise_binary", "out1",
          description="C = A + B"),
        S("sub", "LinearAlgebra", 2, (_A, _A), (), "broadcast_binary", "elementwise_binary", "out1",
          description="C = A - B"),
        S("hadamard", "LinearAlgebra", 2, (_A, _A), (), "broadcast_binary", "elementwise_binary", "out1",
          description="C = A (.) B"),
        S("matvec", "LinearAlgebra", 2, (_M, _V), (), "matvec", "matvec", "matvec", executable=False,
          description="c = A b"),
        S("inverse", "LinearAlgebra", 1, (_M,), (), "square_same", "matrix_to_matrix", "cubic_2", executable=False,
          description="A^-1"),
        S("dot", "LinearAlgebra", 2, (_V, _V), (), "dot", "dot", "in2", description="a^T b"),
        S("det", "LinearAlgebra", 1, (_M,), (), "square_scalar", "matrix_to_scalar", "cubic_third",
          executable=False, description="det(A)"),
        S("trace", "LinearAlgebra", 1, (_M,), (), "square_scalar", "matrix_to_scalar", "in1", executable=False,
          description="tr(A)"),
        S("eig", "LinearAlgebra", 1, (_M,), (), "square_vector", "matrix_decomposition", "cubic_10",
          executable=False, description="A v = lambda v (eigenvalues)"),
        S("svd", "LinearAlgebra", 1, (_M,), (), "matrix_singular", "matrix_decomposition", "cubic_10",
          executable=False, description="A = U S V^T (singular values)"),
        S("qr", "LinearAlgebra", 1, (_M,), (), "qr", "matrix_factor", "cubic_2", executable=False,
          description="A = Q R (Q factor)"),
        S("cholesky", "LinearAlgebra", 1, (_M,), (), "square_same", "matrix_to_matrix", "cubic_third",
          executable=False, description="A = L L^T"),
        S("pinv", "LinearAlgebra", 1, (_M,), (), "transpose", "matrix_pinv", "cubic_10", executable=False,
          description="A^+"),
        S("rank", "LinearAlgebra", 1, (_M,), (), "matrix_reduce", "matrix_to_scalar", "cubic_10",
          differentiable=False, executable=False, description="rank(A)"),
        S("kron", "LinearAlgebra", 2, (_M, _M), (), "kron", "kron", "kron", executable=False,
          description="A (x) B"),
        S("outer", "LinearAlgebra", 2, (_V, _V), (), "outer", "outer", "out1", description="C = a b^T"),
        S("vector_norm", "LinearAlgebra", 1, (_V,), (), "last_axis_reduce", "vector_to_scalar", "in2",
          description="||x||_2 along the last axis"),
        S("matrix_norm", "LinearAlgebra", 1, (_M,), (), "matrix_reduce", "matrix_to_scalar", "in2",
          description="induced 1-norm (max absolute column sum)"),
        S("frobenius_norm", "LinearAlgebra", 1, (_M,), (), "matrix_reduce", "matrix_to_scalar", "in2",
          description="||A||_F"),
        S("identity", "LinearAlgebra", 1, (_A,), (), "elementwise", "constant_like", "zero",
          description="I x"),
        S("zeros", "LinearAlgebra", 1, (_A,), (), "elementwise", "constant_like", "zero",
          description="0 x"),
        S("transpose", "LinearAlgebra", 1, (_M,), (), "transpose", "transpose", "zero",
          description="A^T over the last two axes"),
        # calculus: catalogued, never executed
        S("gradient", "Calculus", 1, (_A,), (), "elementwise", "calculus_unary", "out2", executable=False,
          description="grad_theta L(theta)"),
        S("partial_derivative", "Calculus", 1, (_A,), (), "elementwise", "calculus_unary", "out2",
          executable=False, description="df/dx"),
        S("chain_rule", "Calculus", 2, (_A, _A), (), "binary_same", "calculus_binary", "out1", executable=False,
          description="df/dx = df/dg dg/dx"),
        # activations
        S("sigmoid", "Activation", 1, (_A,), (), "elementwise", "activation", "out4",
          description="1 / (1 + e^-x)"),
        S("relu", "Activation", 1, (_A,), (), "elementwise", "activation", "out1", description="max(0, x)"),
        S("leaky_relu", "Activation", 1, (_A,), (_enum("slope", LEAKY_SLOPES, 0.01),), "elementwise",
          "activation", "out2", description="max(slope x, x)"),
        S("tanh", "Activation", 1, (_A,), (), "elementwise", "activation", "out5", description="tanh(x)"),
        S("softmax", "Activation", 1, (_A,), (), "softmax", "activation", "out3",
          description="softmax over the last axis"),
        # convolution / pooling
        S("cross_correlation", "Convolution", 2, (_T4, _T4), _CONV_HP, "cross_correlation", "convolution",
          "cross_correlation", weight_slots=(1,),
          description="sliding-window multiply-accumulate; reduce=none keeps per-input-channel maps"),
        S("maxpool", "Pooling", 1, (_T4,), _POOL_HP, "pool", "pooling", "pool_max", description="windowed max"),
        S("avgpool", "Pooling", 1, (_T4,), _POOL_HP, "pool", "pooling", "pool_avg", description="windowed mean"),
        # probability and statistics
        S("standardize", "ProbStat", 1, (_A,), (), "standardize", "normalization", "out5",
          description="(x - mu) / (sigma + eps) per sample and channel"),
        S("poly3", "ProbStat", 2, (_A, _M), (), "poly3", "polynomial", "out6", weight_slots=(1,),
          description="a (x - mu)^3 + b (x - mu) + c per channel"),
        S("prob_distribution", "ProbStat", 1, (_A,), (), "elementwise", "probability", "out4", executable=False,
          description="p(x)"),
        S("bayesian_inference", "ProbStat", 2, (_A, _A), (), "binary_same", "bayes", "out3", executable=False,
          description="p(theta|x) = p(x|theta) p(theta) / p(x)"),
        # aggregation
        S("sum", "Aggregation", 1, (_A,), _GROUP + _ANNOTATIONS, "group_reduce", "aggregation", "in1",
          description="sum over consecutive groups along axis 1"),
        S("mean", "Aggregation", 1, (_A,), _GROUP + _ANNOTATIONS, "group_reduce", "aggregation", "mean",
          description="mean over consecutive groups along axis 1"),
        S("max", "Aggregation", 1, (_A,), _GROUP + _ANNOTATIONS, "group_reduce", "aggregation", "in1",
          description="max over consecutive groups along axis 1"),
        S("min", "Aggregation", 1, (_A,), _GROUP + _ANNOTATIONS, "group_reduce", "aggregation", "in1",
          description="min over consecutive groups along axis 1"),
        S("sqrt", "Aggregation", 1, (_A,), _ANNOTATIONS, "elementwise", "aggregation_elementwise", "out1",
          description="elementwise square root"),
        S("concat", "Aggregation", 2, (_A, _A), _ANNOTATIONS, "concat", "aggregation_merge", "zero",
          description="[A B] along axis 1"),
        S("weighted_mean", "Aggregation", 2, (_A, _V), _GROUP + _ANNOTATIONS, "weighted_mean",
          "aggregation_weighted", "weighted_mean", weight_slots=(1,),
          description="sum(w x) / sum(w) over consecutive groups along axis 1"),
        S("reshape", "LinearAlgebra", 1, (_A,), (HyperparamSpec("target", "shape", (), ()),), "reshape",
          "reshape", "zero", description="reinterpret the element layout"),
    ]


CATALOG: Mapping[str, InstructionSpec] = {e.opcode: e for e in _entries()}

AGGREGATION_REDUCERS = ("sum", "mean", "max", "min")


def _check_catalog():
    classes: dict[str, InstructionSpec] = {}
    for spec in CATALOG.values():
        assert spec.category in CATEGORIES, spec.opcode
        assert spec.shape_rule in SHAPE_RULES, spec.opcode
        assert spec.flops_formula in FLOPS, spec.opcode
        first = classes.setdefault(spec.replacement_class, spec)
        assert (first.arity, first.arg_kinds) == (spec.arity, spec.arg_kinds), spec.opcode


_check_catalog()


def lookup(opcode: str) -> InstructionSpec:
    try:
        return CATALOG[opcode]
    except KeyError:
        raise UnknownOpcode(opcode) from None


def replacements_for(opcode: str, include_catalog_only: bool = False) -> list[str]:
    """Other opcodes sharing ``opcode``'s replacement class.

    Catalog-only entries are excluded unless ``include_catalog_only``.
    """
    spec = lookup(opcode)
    return [
        o.opcode
        for o in CATALOG.values()
        if o.replacement_class == spec.replacement_class
        and o.opcode != opcode
        and (include_catalog_only or o.executable)
    ]


def executable_opcodes() -> list[str]:
    return [o.opcode for o in CATALOG.values() if o.executable]


def bind_hyperparams(opcode: str, hyperparams: Mapping | None = None) -> dict:
    """Fill defaults and range-check a hyperparameter binding."""
    spec = lookup(opcode)
    bound = spec.defaults()
    given = dict(hyperparams or {})
    for name, value in given.items():
        try:
            hp = spec.hyperparam(name)
        except KeyError:
            raise BadHyperparam(f"{opcode} has no hyperparameter {name!r}") from None
        if hp.kind == "shape":
            value = tuple(value)
        if not hp.contains(value):
            raise BadHyperparam(f"{opcode}.{name}={value!r} outside {hp.range}")
        bound[name] = value
    for hp in spec.hyperparams:
        if hp.kind == "shape" and hp.name not in bound:
            raise BadHyperparam(f"{opcode} requires hyperparameter {hp.name!r}")
    return bound


def check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeMismatch(f"tensor rank must be 1..4, got {list(shape)}")
    if any(d < 1 for d in shape):
        raise ShapeMismatch(f"extents must be positive, got {list(shape)}")
    if _prod(shape) >= 2 ** 31:
        raise ShapeMismatch(f"tensor {list(shape)} too large")
    return shape


def infer_output(opcode: str, input_shapes: Sequence, batched: Sequence[bool], hyperparams: Mapping) -> tuple:
    """Internal shape rule entry point returning ``(shape, batched)``."""
    spec = lookup(opcode)
    if len(input_shapes) != spec.arity:
        raise ShapeMismatch(f"{opcode} takes {spec.arity} operands, got {len(input_shapes)}")
    shapes = [check_shape(s) for s in input_shapes]
    out, b = SHAPE_RULES[spec.shape_rule](shapes, list(batched), hyperparams)
    return check_shape(out), b


def shape_of(opcode: str, input_shapes: Sequence, hyperparams: Mapping | None = None,
             batched: Sequence[bool] | None = None) -> tuple:
    hp = bind_hyperparams(opcode, hyperparams)
    if batched is None:
        batched = [False] * len(input_shapes)
    return infer_output(opcode, input_shapes, batched, hp)[0]


def cost_of(opcode: str, input_shapes: Sequence, hyperparams: Mapping | None = None) -> CostTerms:
    spec = lookup(opcode)
    hp = bind_hyperparams(opcode, hyperparams)
    out = shape_of(opcode, input_shapes, hp)
    shapes = [tuple(s) for s in input_shapes]
    flops = int(FLOPS[spec.flops_formula](shapes, out, hp))
    params = sum(_prod(shapes[i]) for i in spec.weight_slots)
    return CostTerms(flops=flops, param_elems=params)


def node_flops(opcode: str, input_shapes: Sequence, output_shape: Sequence, hyperparams: Mapping) -> int:
    spec = lookup(opcode)
    return int(FLOPS[spec.flops_formula]([tuple(s) for s in input_shapes], tuple(output_shape), hyperparams))


def catalog_document() -> dict:
    return {
        "catalog_version": CATALOG_VERSION,
        "instructions": [
            {
                "opcode": s.opcode,
                "category": s.category,
                "arity": s.arity,
                "arg_kinds": list(s.arg_kinds),
                "replacement_class": s.replacement_class,
                "executable": s.executable,
                "differentiable": s.differentiable,
                "hyperparams": [
                    {"name": h.name, "kind": h.kind, "range": list(h.range), "default": h.default}
                    for h in s.hyperparams
                ],
                "description": s.description,
            }
            for s in CATALOG.values()
        ],
    }
