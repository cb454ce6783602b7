"""Payoff processes and stopping policies on a scenario tree."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tree import ScenarioTree


class PolicyError(ValueError):
    pass


class EnumerationCapExceeded(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"{count} pure policies exceed the enumeration cap {cap}")
        self.count = count
        self.cap = cap


@dataclass(frozen=True, eq=False)
class PayoffProcess:
    """Adapted payoff Y stored pathwise as a (K+1, N) array."""

    tree: ScenarioTree
    y: np.ndarray

    def __post_init__(self):
        tree = self.tree
        if self.y.shape != (tree.depth + 1, tree.n_paths):
            raise PolicyError(f"payoff shape {self.y.shape} does not match tree")
        for k in range(tree.depth + 1):
            ref = self.y[k, tree.first_paths[k]][tree.node_of[k]]
            if (self.y[k] != ref).any():
                raise PolicyError(f"payoff not adapted at level {k}")
        object.__setattr__(self, "y_star", np.abs(self.y).max(axis=0))

    @classmethod
    def from_nodes(cls, tree: ScenarioTree, per_level: Sequence[Sequence]) -> "PayoffProcess":
        """Payoff given as one list of node values per level."""
        if len(per_level) != tree.depth + 1:
            raise PolicyError("one list of node values per level required")
        rows = []
        for k, vals in enumerate(per_level):
            if len(vals) != tree.n_nodes(k):
                raise PolicyError(f"level {k} needs {tree.n_nodes(k)} node values, got {len(vals)}")
            rows.append(tree.lift(k, tree.convert(list(vals))))
        return cls(tree, np.vstack(rows))

    @classmethod
    def from_paths(cls, tree: ScenarioTree, matrix) -> "PayoffProcess":
        return cls(tree, tree.convert(matrix).reshape(tree.depth + 1, tree.n_paths))

    def affine(self, a, b) -> "PayoffProcess":
        return PayoffProcess(self.tree, self.y * a + b)

    def node_values(self, k: int) -> np.ndarray:
        return self.y[k, self.tree.first_paths[k]]

    def at(self, stop_times: np.ndarray) -> np.ndarray:
        """Pathwise stopped payoff Y_tau."""
        return self.y[stop_times, np.arange(self.tree.n_paths)]


@dataclass(frozen=True, eq=False)
class StoppingPolicy:
    """Pure stopping time (``stop_times`` per path) or randomized stopping time.

    A randomized policy carries ``mass[k][node]``: the probability of stopping
    at that node, identical for every path through it; masses along each path
    sum to one.
    """

    tree: ScenarioTree
    kind: str
    stop_times: np.ndarray | None = None
    mass: tuple[np.ndarray, ...] | None = None

    @property
    def is_pure(self) -> bool:
        return self.kind == "pure"

    def indicators(self) -> list[np.ndarray]:
        """Stop indicator per (level, node) with first-hit semantics."""
        if not self.is_pure:
            raise PolicyError("indicators are defined for pure policies only")
        tree = self.tree
        out = []
        for k in range(tree.depth + 1):
            ind = np.zeros(tree.n_nodes(k), dtype=int)
            hit = self.stop_times == k
            ind[tree.node_of[k][hit]] = 1
            out.append(ind)
        return out

    def stop_mass(self) -> list[np.ndarray]:
        if self.is_pure:
            return [ind.astype(float) for ind in self.indicators()]
        return list(self.mass)

    def value(self, payoff: PayoffProcess, density):
        """E_Q[Y_tau] for the measure with the given density."""
        tree = self.tree
        q = tree.convert(density) * tree.p
        if self.is_pure:
            return (payoff.at(self.stop_times) * q).sum()
        total = 0
        for k in range(tree.depth + 1):
            total = total + (tree.lift(k, self.mass[k]) * payoff.y[k] * q).sum()
        return total

    def to_dict(self) -> dict:
        if self.is_pure:
            return {"kind": "pure", "stop_times": [int(t) for t in self.stop_times]}
        return {"kind": "randomized", "mass": [[float(v) for v in m] for m in self.mass]}


def pure_policy(tree: ScenarioTree, stop_times: Sequence[int]) -> StoppingPolicy:
    """Validate and wrap a vector of stopping levels per path."""
    tau = np.asarray(stop_times, dtype=int)
    if tau.shape != (tree.n_paths,) or tau.min() < 0 or tau.max() > tree.depth:
        raise PolicyError("stop times must be levels 0..K, one per path")
    for k in range(tree.depth + 1):
        stopped = tau <= k
        if (stopped != stopped[tree.first_paths[k]][tree.node_of[k]]).any():
            raise PolicyError(f"not a stopping time: {{tau <= {k}}} splits a level-{k} node")
    return StoppingPolicy(tree, "pure", stop_times=tau)


def constant_policy(tree: ScenarioTree, k: int) -> StoppingPolicy:
    return pure_policy(tree, [k] * tree.n_paths)


def policy_from_indicators(tree: ScenarioTree, indicators: Sequence[Sequence[int]]) -> StoppingPolicy:
    """First-hit stopping time from per-(level, node) indicators; level K always stops."""
    tau = np.full(tree.n_paths, tree.depth)
    for k in range(tree.depth - 1, -1, -1):
        ind = np.asarray(indicators[k], dtype=int)
        tau = np.where(ind[tree.node_of[k]] == 1, k, tau)
    return pure_policy(tree, tau)


def randomized_policy(tree: ScenarioTree, mass: Sequence[Sequence]) -> StoppingPolicy:
    mass = tuple(np.asarray(m, dtype=float) for m in mass)
    if len(mass) != tree.depth + 1:
        raise PolicyError("one mass vector per level required")
    total = sum(tree.lift(k, m) for k, m in enumerate(mass))
    if any((m < -1e-12).any() for m in mass) or not np.allclose(total, 1.0, atol=1e-9):
        raise PolicyError("stop masses must be nonnegative and sum to 1 along every path")
    return StoppingPolicy(tree, "randomized", mass=mass)


def mixture_policy(tree: ScenarioTree, stop_times: np.ndarray, weights) -> StoppingPolicy:
    """Randomized stopping time obtained by drawing pure policy j with weight w_j."""
    weights = np.asarray(weights, dtype=float)
    mass = []
    for k in range(tree.depth + 1):
        m = np.zeros(tree.n_nodes(k))
        hits = stop_times[:, tree.first_paths[k]] == k
        m += weights @ hits
        mass.append(m)
    return randomized_policy(tree, mass)


def count_pure_policies(tree: ScenarioTree) -> int:
    """Number of distinct pure stopping times in first-hit canonical form."""
    counts = [1] * tree.n_nodes(tree.depth)
    for k in range(tree.depth - 1, -1, -1):
        counts = [
            1 + int(np.prod([counts[c] for c in tree.children(k, n)], dtype=object))
            for n in range(tree.n_nodes(k))
        ]
    return counts[0]


def enumerate_pure_policies(tree: ScenarioTree, cap: int = 200_000) -> np.ndarray:
    """All pure stopping times as rows of a (J, N) array of stop levels.

    Rows are ordered so that earlier stopping comes first at every node,
    which makes "first maximizer" the stop-early tie-break.
    """
    count = count_pure_policies(tree)
    if count > cap:
        raise EnumerationCapExceeded(count, cap)
    K = tree.depth
    members = {}

    def rec(k: int, node: int) -> list[np.ndarray]:
        idx = tree.members(k, node)
        members[(k, node)] = idx
        out = [np.full(len(idx), k)]
        if k == K:
            return out
        kids = tree.children(k, node)
        subs = [rec(k + 1, c) for c in kids]
        pos = [np.searchsorted(idx, members[(k + 1, c)]) for c in kids]
        for combo in itertools.product(*subs):
            row = np.empty(len(idx), dtype=int)
            for where, part in zip(pos, combo):
                row[where] = part
            out.append(row)
        return out

    return np.vstack(rec(0, 0))
