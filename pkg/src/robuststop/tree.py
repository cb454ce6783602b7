"""Finite filtered probability spaces as scenario trees.

A tree is a finite path space with one partition of the paths per time
index.  Partition ``k`` holds the atoms of the sigma-algebra at ``t_k``;
partition ``0`` is the trivial one and partition ``K`` separates every path.
Nodes at each level are numbered in order of their first path, so node ids
are canonical for a given path ordering.
"""

from __future__ import annotations

import math

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from ._numeric import group_sum, is_exact, to_array


class TreeError(ValueError):
    """Invalid tree description."""


class NullNodeError(ValueError):
    """Conditioning on a node that carries zero mass under the measure."""

    def __init__(self, level: int, node: int):
        super().__init__(f"conditioning on null node (level {level}, node {node})")
        self.level = level
        self.node = node


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    times: tuple[float, ...]
    paths: tuple[str, ...]
    node_of: np.ndarray  # (K+1, N) node id of each path at each level
    p: np.ndarray
    atomless: bool = field(default=False, init=False)

    def __post_init__(self):
        self.node_of.setflags(write=False)
        self.p.setflags(write=False)

    @property
    def depth(self) -> int:
        return len(self.times) - 1

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def exact(self) -> bool:
        return is_exact(self.p)

    def n_nodes(self, k: int) -> int:
        return int(self.node_of[k].max()) + 1

    @cached_property
    def first_paths(self) -> tuple[np.ndarray, ...]:
        """Index of the first path of every node, per level."""
        return tuple(np.unique(row, return_index=True)[1] for row in self.node_of)

    def members(self, k: int, node: int) -> np.ndarray:
        """Path indices in ``node`` at level ``k``."""
        return np.flatnonzero(self.node_of[k] == node)

    def partition(self, k: int) -> list[list[str]]:
        return [[self.paths[i] for i in self.members(k, n)] for n in range(self.n_nodes(k))]

    def children(self, k: int, node: int) -> list[int]:
        """Child node ids at level ``k + 1``, ordered by their first path."""
        kids = self.node_of[k + 1][self.node_of[k] == node]
        _, first = np.unique(kids, return_index=True)
        return [int(c) for c in kids[np.sort(first)]]

    def parent_map(self, k: int) -> np.ndarray:
        """Parent id at level ``k - 1`` for every node at level ``k``."""
        out = np.empty(self.n_nodes(k), dtype=int)
        out[self.node_of[k]] = self.node_of[k - 1]
        return out

    def lift(self, k: int, node_values: np.ndarray) -> np.ndarray:
        """Turn per-node values at level ``k`` into a path vector."""
        return np.asarray(node_values)[self.node_of[k]]

    def convert(self, x, exact: bool | None = None) -> np.ndarray:
        """Coerce a path vector to this tree's arithmetic."""
        return to_array(x, self.exact if exact is None else exact)

    def as_exact(self) -> "ScenarioTree":
        if self.exact:
            return self
        return ScenarioTree(self.times, self.paths, self.node_of.copy(), to_array(self.p, True))

    def as_float(self) -> "ScenarioTree":
        if not self.exact:
            return self
        return ScenarioTree(
            self.times, self.paths, self.node_of.copy(), np.array([float(v) for v in self.p])
        )

    def to_config(self) -> dict[str, Any]:
        return {
            "times": list(self.times),
            "paths": list(self.paths),
            "partitions": [self.partition(k) for k in range(self.depth + 1)],
            "p_weights": [float(v) for v in self.p],
        }


@dataclass(frozen=True)
class NodeFunction:
    """Values of an adapted quantity on the nodes of one level."""

    level: int
    values: np.ndarray
    null_nodes: tuple[int, ...] = ()

    def on_paths(self, tree: ScenarioTree) -> np.ndarray:
        return tree.lift(self.level, self.values)


def _canonical(labels: Sequence[Any]) -> np.ndarray:
    seen: dict[Any, int] = {}
    return np.array([seen.setdefault(lab, len(seen)) for lab in labels], dtype=int)


def _validate(node_of: np.ndarray, p: np.ndarray, exact: bool) -> None:
    if node_of[0].max() != 0:
        raise TreeError("partition at index 0 must have exactly one node")
    n = node_of.shape[1]
    if len(np.unique(node_of[-1])) != n:
        raise TreeError("terminal partition must separate all paths")
    for k in range(1, node_of.shape[0]):
        pairs = np.unique(node_of[k - 1 : k + 1].T, axis=0)
        if len(pairs) != len(np.unique(node_of[k])):
            raise TreeError(f"partition {k} does not refine partition {k - 1}")
    if any(w <= 0 for w in p):
        raise TreeError("weights must be strictly positive")
    total = sum(p) if exact else math.fsum(p)
    if (exact and total != 1) or (not exact and abs(float(total) - 1.0) > 1e-12):
        raise TreeError(f"weights not summing to 1 (sum = {float(total)})")


def from_partitions(
    partitions: Sequence[Sequence[Sequence[str]]],
    p_weights: Sequence,
    paths: Sequence[str] | None = None,
    times: Sequence[float] | None = None,
    exact: bool = False,
) -> ScenarioTree:
    """Build a tree from explicit partitions given as lists of path-id lists."""
    if paths is None:
        paths = [pid for block in partitions[-1] for pid in block]
    paths = [str(pid) for pid in paths]
    index = {pid: i for i, pid in enumerate(paths)}
    if len(index) != len(paths):
        raise TreeError("duplicate path ids")
    if len(p_weights) != len(paths):
        raise TreeError("one weight per path required")
    rows = []
    for k, part in enumerate(partitions):
        lab = np.full(len(paths), -1)
        for b, block in enumerate(part):
            for pid in block:
                if str(pid) not in index:
                    raise TreeError(f"unknown path id {pid!r} in partition {k}")
                lab[index[str(pid)]] = b
        if (lab < 0).any():
            raise TreeError(f"partition {k} does not cover all paths")
        rows.append(_canonical(lab))
    node_of = np.vstack(rows)
    times = tuple(float(t) for t in (times if times is not None else range(len(partitions))))
    if len(times) != len(partitions):
        raise TreeError("one time point per partition required")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise TreeError("times must be strictly increasing")
    p = to_array(list(p_weights), exact)
    _validate(node_of, p, exact)
    return ScenarioTree(times, tuple(paths), node_of, p)


def from_labels(labels, p_weights, paths=None, times=None, exact: bool = False) -> ScenarioTree:
    """Build a tree from a (K+1, N) array of per-level node labels."""
    labels = np.asarray(labels)
    n = labels.shape[1]
    paths = tuple(str(x) for x in (paths if paths is not None else range(n)))
    if len(paths) != n or len(p_weights) != n:
        raise TreeError("one path id and one weight per column required")
    node_of = np.vstack([_canonical(row.tolist()) for row in labels])
    times = tuple(float(t) for t in (times if times is not None else range(labels.shape[0])))
    if len(times) != labels.shape[0]:
        raise TreeError("one time point per level required")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise TreeError("times must be strictly increasing")
    p = to_array(list(p_weights), exact)
    _validate(node_of, p, exact)
    return ScenarioTree(times, paths, node_of, p)


def binary_lattice(depth: int, branch_prob=0.5, times=None, exact: bool = False) -> ScenarioTree:
    """Non-recombining binary tree; ``branch_prob`` is the up-probability.

    ``branch_prob`` may be a scalar or, per level, a list of up-probabilities
    for the nodes of that level (nodes ordered as in the returned tree).
    """
    if depth < 1:
        raise TreeError("lattice depth must be >= 1")
    histories = list(itertools.product("ud", repeat=depth))
    paths = ["".join(h) for h in histories]
    node_of = np.vstack([_canonical(["".join(h[:k]) for h in histories]) for k in range(depth + 1)])
    p = to_array([1] * len(paths), exact)
    for k in range(depth):
        if np.ndim(branch_prob) == 0:
            probs = [branch_prob] * int(node_of[k].max() + 1)
        else:
            probs = branch_prob[k]
        probs = to_array(probs, exact)
        if any(q <= 0 or q >= 1 for q in probs):
            raise TreeError("branch probabilities must lie in (0, 1)")
        for i, h in enumerate(histories):
            q = probs[node_of[k, i]]
            p[i] = p[i] * (q if h[k] == "u" else 1 - q)
    times = tuple(float(t) for t in (times if times is not None else range(depth + 1)))
    _validate(node_of, p, exact)
    return ScenarioTree(times, tuple(paths), node_of, p)


def build_tree(config: dict, exact: bool = False) -> ScenarioTree:
    """Build a validated tree from a JSON-style description.

    Either ``{"lattice": {"depth": D, "branch_prob": p}}`` or explicit
    ``partitions`` + ``p_weights`` (optionally ``paths`` and ``times``).
    """
    if "lattice" in config:
        lat = config["lattice"]
        return binary_lattice(
            int(lat["depth"]), lat.get("branch_prob", 0.5), config.get("times"), exact=exact
        )
    try:
        return from_partitions(
            config["partitions"],
            config["p_weights"],
            config.get("paths"),
            config.get("times"),
            exact=exact,
        )
    except KeyError as exc:
        raise TreeError(f"tree description missing key {exc}") from None


def conditional_expectation(
    tree: ScenarioTree, density, x, k: int, null: str = "raise"
) -> NodeFunction:
    """E_Q[x | F_k] per node, where ``density`` is dQ/dP over paths.

    With ``null="zero"`` nodes of zero Q-mass get value 0 and are listed in
    ``null_nodes``; with ``null="raise"`` a :class:`NullNodeError` is raised.
    """
    density = tree.convert(density)
    x = tree.convert(x)
    q = density * tree.p
    n = tree.n_nodes(k)
    mass = group_sum(q, tree.node_of[k], n)
    num = group_sum(x * q, tree.node_of[k], n)
    null_nodes = tuple(int(i) for i in np.flatnonzero(mass == 0))
    if null_nodes and null == "raise":
        raise NullNodeError(k, null_nodes[0])
    if tree.exact:
        values = np.array([num[i] / mass[i] if mass[i] != 0 else mass[i] for i in range(n)], dtype=object)
    else:
        safe = np.where(mass == 0, 1.0, mass)
        values = np.where(mass == 0, 0.0, num / safe)
    return NodeFunction(k, values, null_nodes)


def expectation(tree: ScenarioTree, density, x):
    q = tree.convert(density) * tree.p
    return (tree.convert(x) * q).sum()
