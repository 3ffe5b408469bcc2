"""Independent reference implementations the tests compare against.

Nothing here imports the code under test except for plain data types.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# -- convolution ---------------------------------------------------------------


def conv2d_loops(x, w, b, stride, padding, dilation):
    """Direct nested-loop 2-D cross-correlation with bias."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for bn in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for a in range(k):
                            for e in range(k):
                                y = i * stride + a * dilation - padding
                                z = j * stride + e * dilation - padding
                                if 0 <= y < h and 0 <= z < wd:
                                    acc += x[bn, ci, y, z] * w[o, ci, a, e]
                    out[bn, o, i, j] = acc
    return out


# -- finite differences ----------------------------------------------------------


def fd_probe(f, xs, which, index, h=1e-6):
    """Central difference of scalar f(xs) w.r.t. xs[which][index]; also the
    second difference used to detect kinks."""
    def at(delta):
        ys = [x.copy() for x in xs]
        ys[which][index] += delta
        return f(ys)

    fp, fm, f0 = at(h), at(-h), f(xs)
    return (fp - fm) / (2 * h), abs(fp + fm - 2 * f0)


# -- operator selection ------------------------------------------------------------


def select_bruteforce(ops, deployable, n_o=4, tol=0.05):
    """ops: list of dicts {id, lat, params, digest, excluded}.

    Returns (branch, chosen ids) following the rule stated in words:
    when not deployable take the operator with the most parameters and add the
    others sharing its digest by parameter count (latency plays no part);
    otherwise among operators whose latency is within ``tol`` of the slowest
    take the one with the most parameters, then add the other operators
    sharing its digest from slowest to fastest.
    """
    live = [o for o in ops if not o["excluded"]]
    if not live:
        return None
    if not deployable:
        best = None
        for o in live:
            if best is None or o["params"] > best["params"] or (o["params"] == best["params"] and o["id"] < best["id"]):
                best = o
        branch = "NonDeployable"
    else:
        lmax = max(o["lat"] for o in live)
        close = [o for o in live if lmax == 0 or (lmax - o["lat"]) / lmax <= tol]
        best = None
        for o in close:
            better = best is None
            if not better:
                if o["params"] != best["params"]:
                    better = o["params"] > best["params"]
                elif o["lat"] != best["lat"]:
                    better = o["lat"] > best["lat"]
                else:
                    better = o["id"] < best["id"]
            if better:
                best = o
        branch = "Ranked"

    def rank(o):
        # position in the descending order, lower id first on ties
        if branch == "NonDeployable":
            return sum(1 for p in live if (p["params"], -p["id"]) > (o["params"], -o["id"]))
        return sum(1 for p in live if (p["lat"], p["params"], -p["id"]) > (o["lat"], o["params"], -o["id"]))

    same = sorted((o for o in live if o["digest"] == best["digest"] and o is not best), key=rank)
    return branch, tuple([best["id"]] + [o["id"] for o in same])[:n_o]


# -- NSGA ------------------------------------------------------------------------------


def dominates(x, y):
    """x, y: (latency, params, feasible)."""
    if x[2] != y[2]:
        return x[2]
    return x[0] <= y[0] and x[1] <= y[1] and (x[0] < y[0] or x[1] < y[1])


def fronts_bruteforce(pop):
    """Peel off non-dominated sets one at a time."""
    left = set(range(len(pop)))
    fronts = []
    while left:
        f = sorted(i for i in left if not any(dominates(pop[j], pop[i]) for j in left if j != i))
        fronts.append(f)
        left -= set(f)
    return fronts


def crowding_hand(points):
    """points: list of (latency, params). Textbook formula with inf boundaries."""
    n = len(points)
    d = [0.0] * n
    for m in range(2):
        idx = sorted(range(n), key=lambda i: (points[i][m], i))
        lo, hi = points[idx[0]][m], points[idx[-1]][m]
        d[idx[0]] = math.inf
        d[idx[-1]] = math.inf
        for r in range(1, n - 1):
            if d[idx[r]] == math.inf or hi == lo:
                continue
            d[idx[r]] += (points[idx[r + 1]][m] - points[idx[r - 1]][m]) / (hi - lo)
    return d


# -- graphs ---------------------------------------------------------------------------


def all_topological_orders(nodes, edges, limit=5000):
    """Every topological order of a small DAG (capped)."""
    preds = {n: {s for s, d in edges if d == n} for n in nodes}
    out = []

    def rec(order, placed):
        if len(out) >= limit:
            return
        if len(order) == len(nodes):
            out.append(list(order))
            return
        for n in sorted(nodes):
            if n not in placed and preds[n] <= placed:
                order.append(n)
                placed.add(n)
                rec(order, placed)
                order.pop()
                placed.discard(n)

    rec([], set())
    return out


def split_pairs_bruteforce(shapes_a, shapes_b):
    """All (i, j) with equal shapes: the all-pairs comparison used for chains."""
    return [(i, j) for i, j in itertools.product(range(len(shapes_a)), range(len(shapes_b)))
            if shapes_a[i] == shapes_b[j]]
