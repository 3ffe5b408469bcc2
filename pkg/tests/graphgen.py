"""Random valid operator graphs for property tests."""
from __future__ import annotations

import numpy as np

from opsearch.evolution.mutation import NOOP, mutate_graph
from opsearch.seeds import build_seed, random_generate

SHAPE_PAIRS = [
    ((1, 3, 8, 8), (1, 4, 8, 8)),
    ((1, 2, 6, 6), (1, 2, 3, 3)),
    ((1, 4, 5, 5), (1, 4, 5, 5)),
    ((1, 16), (1, 8)),
    ((1, 6, 4), (1, 6, 4)),
    ((1, 3, 8, 8), (1, 10)),
]


def random_graphs(n: int, rng: np.random.Generator) -> list:
    """``n`` valid graphs: random generations, standard seeds and mutation chains of both."""
    pool = [
        build_seed("conv2d", (1, 3, 8, 8), (1, 4, 8, 8), kernel=3, padding=1),
        build_seed("linear", (1, 16), (1, 8)),
        build_seed("batchnorm", (1, 4, 5, 5), (1, 4, 5, 5)),
        build_seed("maxpool", (1, 2, 6, 6), (1, 2, 3, 3), kernel=2, stride=2),
    ]
    out = []
    while len(out) < n:
        r = rng.random()
        if r < 0.4:
            a, b = SHAPE_PAIRS[int(rng.integers(len(SHAPE_PAIRS)))]
            g = random_generate(a, b, rng)
        else:
            g = pool[int(rng.integers(len(pool)))]
            for _ in range(int(rng.integers(1, 5))):
                res = mutate_graph(g, rng)
                if res.tag != NOOP:
                    g = res.graph
        pool.append(g)
        out.append(g)
    return out
