"""Random instance generators shared by the tests."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from robuststop.measures import family
from robuststop.stopping import PayoffProcess
from robuststop.tree import from_partitions


def random_partitions(rng, depth: int, max_children: int = 3, max_paths: int = 16):
    """Nested partitions (lists of path-id lists) of a random tree."""
    fans = []  # fans[k][n]: number of children of node n at level k
    width = 1
    for _ in range(depth):
        fan = []
        for node in range(width):
            room = max_paths - sum(fan) - (width - node - 1)
            fan.append(max(1, min(int(rng.integers(1, max_children + 1)), room)))
        fans.append(fan)
        width = sum(fan)
    owner = np.arange(width)
    parts = [[[f"w{i}"] for i in range(width)]]
    for fan in reversed(fans):
        owner = np.repeat(np.arange(len(fan)), fan)[owner]
        parts.append([[f"w{i}" for i in np.flatnonzero(owner == b)] for b in range(len(fan))])
    return parts[::-1]


def random_weights(rng, n: int, exact: bool):
    w = rng.integers(1, 6, size=n)
    if exact:
        total = int(w.sum())
        return [Fraction(int(v), total) for v in w]
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return list(w)


def random_tree(rng, depth: int, exact: bool = False, max_children: int = 3, max_paths: int = 16):
    parts = random_partitions(rng, depth, max_children, max_paths)
    n = sum(len(b) for b in parts[-1])
    paths = [f"w{i}" for i in range(n)]
    p = random_weights(rng, n, exact)
    return from_partitions(parts, p, paths=paths, exact=exact), parts, p


def random_densities(rng, tree, m: int, exact: bool):
    out = []
    for _ in range(m):
        q = random_weights(rng, tree.n_paths, exact)
        out.append([qi / pi for qi, pi in zip(q, tree.p)])
    return out


def random_payoff(rng, tree, exact: bool = False, high: int = 10):
    per_level = []
    for k in range(tree.depth + 1):
        vals = rng.integers(0, high, size=tree.n_nodes(k))
        per_level.append([Fraction(int(v)) if exact else float(v) for v in vals])
    return PayoffProcess.from_nodes(tree, per_level)


def random_instance(rng, depth: int, m: int, exact: bool = False, max_paths: int = 16):
    tree, parts, p = random_tree(rng, depth, exact, max_paths=max_paths)
    dens = random_densities(rng, tree, m, exact)
    return tree, parts, p, family(tree, dens), dens, random_payoff(rng, tree, exact)


def oracle_inputs(tree, parts, dens, y):
    """Plain-list views for the oracles (integer path indices, Fractions)."""
    index = {pid: i for i, pid in enumerate(tree.paths)}
    oparts = [[[index[pid] for pid in block] for block in part] for part in parts]
    q = [[Fraction(d) * Fraction(pi) for d, pi in zip(dv, tree.p)] for dv in dens]
    ylist = [[Fraction(v) for v in row] for row in y.y]
    return oparts, q, ylist
