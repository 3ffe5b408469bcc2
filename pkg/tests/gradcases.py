"""Float64 input generators for gradient checks, one entry per differentiable kernel."""
from __future__ import annotations

import numpy as np

from opsearch import catalog
from opsearch.engine.kernels import KERNELS

from oracles import fd_probe


def _n(rng, *shape):
    return rng.standard_normal(shape)


def _pos(rng, *shape):
    return rng.uniform(0.5, 2.0, shape)


# opcode -> list of (inputs factory, hyperparams)
CASES = {
    "matmul": [(lambda r: [_n(r, 2, 4, 3), _n(r, 3, 5)], {})],
    "add": [(lambda r: [_n(r, 2, 3, 4, 4), _n(r, 3, 1, 1)], {})],
    "sub": [(lambda r: [_n(r, 2, 3, 4, 4), _n(r, 3, 1, 1)], {})],
    "hadamard": [(lambda r: [_n(r, 2, 3, 4, 4), _n(r, 3, 1, 1)], {})],
    "dot": [(lambda r: [_n(r, 2, 5), _n(r, 5)], {})],
    "outer": [(lambda r: [_n(r, 4), _n(r, 5)], {})],
    "vector_norm": [(lambda r: [_n(r, 2, 6)], {})],
    "matrix_norm": [(lambda r: [_n(r, 2, 4, 5)], {})],
    "frobenius_norm": [(lambda r: [_n(r, 2, 4, 5)], {})],
    "identity": [(lambda r: [_n(r, 2, 3, 4)], {})],
    "zeros": [(lambda r: [_n(r, 2, 3, 4)], {})],
    "transpose": [(lambda r: [_n(r, 2, 3, 4)], {})],
    "reshape": [(lambda r: [_n(r, 2, 3, 4)], {"target": (2, 12)})],
    "sigmoid": [(lambda r: [_n(r, 2, 3, 5)], {})],
    "relu": [(lambda r: [_n(r, 2, 3, 5)], {})],
    "leaky_relu": [(lambda r: [_n(r, 2, 3, 5)], {"slope": 0.1})],
    "tanh": [(lambda r: [_n(r, 2, 3, 5)], {})],
    "softmax": [(lambda r: [_n(r, 2, 3, 5)], {})],
    "cross_correlation": [
        (lambda r: [_n(r, 2, 3, 7, 7), _n(r, 4, 3, 3, 3)],
         {"kernel": 3, "stride": 2, "padding": 1, "dilation": 2, "reduce": "sum"}),
        (lambda r: [_n(r, 2, 3, 6, 6), _n(r, 2, 3, 3, 3)],
         {"kernel": 3, "stride": 1, "padding": 1, "dilation": 1, "reduce": "none"}),
    ],
    "maxpool": [(lambda r: [_n(r, 2, 3, 6, 6)], {"kernel": 3, "stride": 2, "padding": 1})],
    "avgpool": [(lambda r: [_n(r, 2, 3, 6, 6)], {"kernel": 3, "stride": 2, "padding": 1})],
    "standardize": [(lambda r: [_n(r, 2, 3, 4, 4)], {}), (lambda r: [_n(r, 3, 6)], {})],
    "poly3": [(lambda r: [_n(r, 2, 3, 4, 4), _n(r, 3, 3)], {})],
    "sum": [(lambda r: [_n(r, 2, 6, 3, 3)], {"group_size": 3})],
    "mean": [(lambda r: [_n(r, 2, 6, 3, 3)], {"group_size": 3})],
    "max": [(lambda r: [_n(r, 2, 6, 3, 3)], {"group_size": 3})],
    "min": [(lambda r: [_n(r, 2, 6, 3, 3)], {"group_size": 3})],
    "sqrt": [(lambda r: [_pos(r, 2, 3, 4)], {})],
    "concat": [(lambda r: [_n(r, 2, 3, 4), _n(r, 2, 2, 4)], {})],
    "weighted_mean": [(lambda r: [_n(r, 2, 6, 3), _pos(r, 3)], {"group_size": 3})],
}


def differentiable_kernels() -> list:
    return sorted(op for op in KERNELS if catalog.lookup(op).differentiable)


def gradcheck(opcode: str, probes: int = 100, seed: int = 0, h: float = 1e-6) -> dict:
    """Compare the kernel VJP with central differences at ``probes`` random entries.

    A probe whose second difference exceeds ``1e3 * h**2`` sits next to a kink
    (relu at 0, an argmax tie, ...) and is not scored.
    """
    rng = np.random.default_rng(seed)
    k = KERNELS[opcode]
    worst, scored, skipped = 0.0, 0, 0
    cases = CASES[opcode]
    for p in range(probes):
        make, hp = cases[p % len(cases)]
        hp = catalog.bind_hyperparams(opcode, dict(hp))
        xs = make(rng)
        out = k.forward(xs, hp)
        proj = rng.standard_normal(out.shape)

        def loss(ys):
            return float(np.sum(k.forward(ys, hp) * proj))

        grads = k.vjp(xs, out, proj, hp)
        which = int(rng.integers(len(xs)))
        index = tuple(int(rng.integers(d)) for d in xs[which].shape)
        num, curv = fd_probe(loss, xs, which, index, h)
        if curv > 1e3 * h * h:
            skipped += 1
            continue
        ana = float(np.asarray(grads[which])[index])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-4)
        worst = max(worst, rel)
        scored += 1
    return {"worst": worst, "scored": scored, "skipped": skipped}
