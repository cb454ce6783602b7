"""Measure families given by densities over the paths of a scenario tree.

Families are stored through their extreme members; the convex hull is only
ever touched through weight vectors on the simplex.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from ._numeric import group_sum, to_array
from .stopping import PolicyError, StoppingPolicy
from .tree import NullNodeError, ScenarioTree


class MeasureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Measure:
    tree: ScenarioTree
    density: np.ndarray

    def __post_init__(self):
        d = self.density
        if (d < 0).any():
            raise MeasureError("density must be nonnegative")
        total = (d * self.tree.p).sum()
        if (self.tree.exact and total != 1) or abs(float(total) - 1) > 1e-10:
            raise MeasureError(f"density does not integrate to 1 (got {float(total)!r})")
        self.density.setflags(write=False)

    @property
    def equivalent(self) -> bool:
        return bool((self.density > 0).all())

    @property
    def q(self) -> np.ndarray:
        """Path probabilities Q(omega)."""
        return self.density * self.tree.p

    def prob(self, event) -> Any:
        return self.q[event_mask(self.tree, event)].sum()

    def expect(self, x):
        return (self.tree.convert(x) * self.q).sum()


@dataclass(frozen=True, eq=False)
class MeasureFamily:
    tree: ScenarioTree
    members: tuple[Measure, ...]
    labels: tuple | None = None
    pasting_closed_by_construction: bool = False
    node_vertices: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.members:
            raise MeasureError("measure family must be nonvoid")
        if any(m.tree is not self.tree for m in self.members):
            raise MeasureError("all members must live on the same tree")
        if self.labels is not None and len(self.labels) != len(self.members):
            raise MeasureError("one label per member required")

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i: int) -> Measure:
        return self.members[i]

    @property
    def densities(self) -> np.ndarray:
        """(n_members, N) array of densities."""
        return np.vstack([m.density for m in self.members])

    @property
    def equivalent(self) -> bool:
        return all(m.equivalent for m in self.members)


def float_family(fam: MeasureFamily) -> MeasureFamily:
    """The same family on the floating-point version of its tree."""
    if not fam.tree.exact:
        return fam
    tree = fam.tree.as_float()
    members = tuple(Measure(tree, m.density.astype(float)) for m in fam)
    return MeasureFamily(tree, members, fam.labels, fam.pasting_closed_by_construction, fam.node_vertices)


def measure(tree: ScenarioTree, density) -> Measure:
    return Measure(tree, tree.convert(density))


def reference_measure(tree: ScenarioTree) -> Measure:
    return measure(tree, [1] * tree.n_paths)


def family(tree: ScenarioTree, densities: Sequence, labels: Sequence | None = None) -> MeasureFamily:
    members = tuple(measure(tree, d) for d in densities)
    return MeasureFamily(tree, members, tuple(labels) if labels is not None else None)


def event_mask(tree: ScenarioTree, event) -> np.ndarray:
    """Boolean path mask from a mask, an index list or a collection of path ids."""
    arr = np.asarray(list(event) if not isinstance(event, np.ndarray) else event)
    if arr.dtype == bool and arr.shape == (tree.n_paths,):
        return arr
    mask = np.zeros(tree.n_paths, dtype=bool)
    if arr.size == 0:
        return mask
    if arr.dtype.kind in "iu":
        mask[arr] = True
        return mask
    index = {pid: i for i, pid in enumerate(tree.paths)}
    for pid in arr:
        mask[index[str(pid)]] = True
    return mask


def stopped_atoms(tree: ScenarioTree, stop_times: np.ndarray) -> np.ndarray:
    """Label of the F_tau-atom containing each path (canonical numbering)."""
    keys = stop_times * (tree.n_paths + 1) + tree.node_of[stop_times, np.arange(tree.n_paths)]
    _, labels = np.unique(keys, return_inverse=True)
    return labels.reshape(-1)


def _check_same_tree(*ms: Measure) -> ScenarioTree:
    tree = ms[0].tree
    if any(m.tree is not tree for m in ms):
        raise MeasureError("measures live on different trees")
    return tree


def paste(q1: Measure, q2: Measure, tau: StoppingPolicy) -> Measure:
    """Pasting of q1 and q2 in tau: Q3(A) = E_{Q1}[Q2[A | F_tau]]."""
    tree = _check_same_tree(q1, q2)
    if not tau.is_pure:
        raise PolicyError("pasting is defined for pure stopping times only")
    atoms = stopped_atoms(tree, tau.stop_times)
    n = int(atoms.max()) + 1
    m1 = group_sum(q1.q, atoms, n)
    m2 = group_sum(q2.q, atoms, n)
    for a in range(n):
        if m2[a] == 0 and m1[a] != 0:
            raise NullNodeError(-1, a)
    ratio = np.array([m1[a] / m2[a] if m2[a] != 0 else m2[a] for a in range(n)], dtype=m1.dtype)
    return Measure(tree, ratio[atoms] * q2.density)


def tv_distance(q1: Measure, q2: Measure):
    """Total variation distance, as half the P-weighted L1 distance of densities."""
    tree = _check_same_tree(q1, q2)
    return (abs(q1.density - q2.density) * tree.p).sum() / 2


def vector_measure_eval(fam: MeasureFamily, event) -> np.ndarray:
    mask = event_mask(fam.tree, event)
    return np.array([m.q[mask].sum() for m in fam.members], dtype=fam.tree.p.dtype)


def tv_matrix(fam: MeasureFamily) -> np.ndarray:
    d = fam.densities.astype(float)
    p = fam.tree.p.astype(float)
    return 0.5 * (np.abs(d[:, None, :] - d[None, :, :]) * p).sum(axis=2)


def range_compactness_diag(fam: MeasureFamily, eps: float | Sequence[float]) -> dict:
    """Greedy eps-net of the family under total variation.

    Members are scanned in order and become centres unless they lie in a
    closed eps-ball of an existing centre.  A sequence of ``eps`` values
    returns one entry per value.
    """
    if np.ndim(eps) > 0:
        return {"nets": [range_compactness_diag(fam, e) for e in eps]}
    if eps <= 0:
        raise MeasureError("eps must be positive")
    dist = tv_matrix(fam)
    centres: list[int] = []
    for i in range(len(fam)):
        if not any(dist[i, c] <= eps for c in centres):
            centres.append(i)
    return {"eps": float(eps), "net_size": len(centres), "centres": centres, "covered": True}


def label_distance_matrix(fam: MeasureFamily, d) -> np.ndarray:
    if fam.labels is None:
        raise MeasureError("family carries no labels")
    n = len(fam)
    if callable(d):
        return np.array([[float(d(fam.labels[i], fam.labels[j])) for j in range(n)] for i in range(n)])
    mat = np.asarray(d, dtype=float)
    if mat.shape != (n, n):
        raise MeasureError("label distance matrix has the wrong shape")
    return mat


def density_path_diagnostics(
    fam: MeasureFamily,
    d: Callable | np.ndarray,
    deltas: Sequence[float] | None = None,
) -> dict:
    """Empirical d-modulus of the density paths and their pathwise envelope.

    ``modulus[delta]`` is the largest sup-over-paths density difference among
    label pairs at d-distance <= delta.
    """
    dist = label_distance_matrix(fam, d)
    dens = fam.densities.astype(float)
    gaps = np.abs(dens[:, None, :] - dens[None, :, :]).max(axis=2)
    if deltas is None:
        deltas = np.unique(np.concatenate([[0.0], dist.ravel()]))
    modulus = [float(gaps[dist <= delta].max(initial=0.0)) for delta in deltas]
    envelope = dens.max(axis=0)
    return {
        "deltas": [float(x) for x in deltas],
        "modulus": modulus,
        "dominated_by": envelope,
        "dominating_integral": float(envelope @ fam.tree.p.astype(float)),
    }


def convex_combination(fam: MeasureFamily, weights) -> Measure:
    w = fam.tree.convert(weights)
    if len(w) != len(fam) or (w < 0).any():
        raise MeasureError("weights off simplex")
    total = w.sum()
    if (fam.tree.exact and total != 1) or abs(float(total) - 1) > 1e-12:
        raise MeasureError("weights off simplex")
    return Measure(fam.tree, w @ fam.densities)


def box_vertices(box: Sequence[Sequence], exact: bool = False) -> list[np.ndarray]:
    """Vertices of {p : lo_c <= p_c <= hi_c, sum p = 1} in a stable order."""
    lo = to_array([b[0] for b in box], exact)
    hi = to_array([b[1] for b in box], exact)
    m = len(box)
    if (lo <= 0).any() or (hi >= 1).any() or (lo > hi).any():
        raise MeasureError("boxes must be nonempty intervals inside (0, 1)")
    tol = 0 if exact else 1e-12
    out: list[np.ndarray] = []
    for free in range(m - 1, -1, -1):
        others = [c for c in range(m) if c != free]
        for choice in itertools.product((0, 1), repeat=m - 1):
            p = lo.copy()
            for c, side in zip(others, choice):
                p[c] = hi[c] if side else lo[c]
            p[free] = 1 - sum(p[c] for c in others)
            if p[free] < lo[free] - tol or p[free] > hi[free] + tol:
                continue
            if not any(all(abs(a - b) <= tol for a, b in zip(p, v)) for v in out):
                out.append(p)
    if not out:
        raise MeasureError("empty box: no conditional probability vector fits")
    return out


def uniform_boxes(tree: ScenarioTree, lo, hi) -> list[list[list]]:
    """Binary-tree boxes with the first child's probability in [lo, hi] at every node."""
    boxes = []
    for k in range(tree.depth):
        level = []
        for n in range(tree.n_nodes(k)):
            if len(tree.children(k, n)) != 2:
                raise MeasureError("uniform_boxes needs a binary tree")
            level.append([[lo, hi], [1 - hi, 1 - lo]])
        boxes.append(level)
    return boxes


def child_positions(tree: ScenarioTree, k: int) -> np.ndarray:
    """Position of every level-(k+1) node among its parent's children."""
    pos = np.empty(tree.n_nodes(k + 1), dtype=int)
    for n in range(tree.n_nodes(k)):
        for i, c in enumerate(tree.children(k, n)):
            pos[c] = i
    return pos


def rectangular_family(tree: ScenarioTree, boxes) -> MeasureFamily:
    """Extreme members of the nodewise-rectangular family defined by ``boxes``.

    ``boxes[k][n]`` lists one ``[lo, hi]`` interval per child of node ``n`` at
    level ``k``.  Members enumerate every combination of nodewise vertices.
    """
    if len(boxes) != tree.depth:
        raise MeasureError("one list of node boxes per non-terminal level required")
    vertices = []
    for k in range(tree.depth):
        if len(boxes[k]) != tree.n_nodes(k):
            raise MeasureError(f"level {k} needs {tree.n_nodes(k)} boxes")
        level = []
        for n, box in enumerate(boxes[k]):
            if len(box) != len(tree.children(k, n)):
                raise MeasureError(f"box at level {k}, node {n} has the wrong number of children")
            level.append(box_vertices(box, tree.exact))
        vertices.append(level)
    slots = [(k, n) for k in range(tree.depth) for n in range(tree.n_nodes(k))]
    positions = [child_positions(tree, k) for k in range(tree.depth)]
    members = []
    for combo in itertools.product(*(range(len(vertices[k][n])) for k, n in slots)):
        choice = dict(zip(slots, combo))
        q = tree.convert([1] * tree.n_paths)
        for k in range(tree.depth):
            cond = np.array(
                [vertices[k][n][choice[(k, n)]] for n in range(tree.n_nodes(k))], dtype=object
            )
            parent = tree.node_of[k]
            child = positions[k][tree.node_of[k + 1]]
            q = q * np.array([cond[parent[i]][child[i]] for i in range(tree.n_paths)], dtype=q.dtype)
        members.append(Measure(tree, q / tree.p))
    return MeasureFamily(
        tree,
        tuple(members),
        pasting_closed_by_construction=True,
        node_vertices=tuple(tuple(level) for level in vertices),
    )
