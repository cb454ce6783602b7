"""Finite-scale checks of pasting stability, recursiveness and time-consistency.

Refutations are absolute and carry a witness that can be replayed; a
confirmation only covers the test universe it was computed on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .measures import MeasureFamily, convex_combination, float_family, paste, stopped_atoms
from .stopping import (
    EnumerationCapExceeded,
    PolicyError,
    StoppingPolicy,
    constant_policy,
    enumerate_pure_policies,
)
from .tree import ScenarioTree


@dataclass
class Check:
    holds: bool
    witness: dict | None = None
    details: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.holds


def worst_conditional(fam: MeasureFamily, x, k: int) -> np.ndarray:
    """ess inf over members of E_Q[x | F_k], as a path vector (nodewise min).

    Members with zero mass on a node are skipped there; a node null for
    every member gets 0.
    """
    tree = fam.tree
    x = tree.convert(x)
    Q = fam.densities * tree.p
    B = np.zeros((tree.n_paths, tree.n_nodes(k)), dtype=int)
    B[np.arange(tree.n_paths), tree.node_of[k]] = 1
    if tree.exact:
        B = B.astype(object)
    mass = Q @ B
    num = (Q * x) @ B
    if tree.exact:
        mins = []
        for n in range(mass.shape[1]):
            vals = [num[i, n] / mass[i, n] for i in range(len(fam)) if mass[i, n] != 0]
            mins.append(min(vals) if vals else Fraction(0))
        mins = np.array(mins, dtype=object)
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(mass > 0, num / np.where(mass > 0, mass, 1.0), np.inf)
        mins = ratio.min(axis=0)
        mins[np.isinf(mins)] = 0.0
    return tree.lift(k, mins)


def _worst_conditional_batch(fam: MeasureFamily, X: np.ndarray, k: int, chunk_elems: int = 20_000_000) -> np.ndarray:
    """Float ``worst_conditional`` for every row of ``X`` at once."""
    tree = fam.tree
    Q = np.asarray(fam.densities, dtype=float) * np.asarray(tree.p, dtype=float)
    n, m = tree.n_paths, len(fam)
    lab = tree.node_of[k]
    # node sums as segment sums over paths sorted by node label
    order = np.argsort(lab, kind="stable")
    starts = np.flatnonzero(np.r_[True, np.diff(lab[order]) != 0])
    Qs = Q[:, order]
    mass = np.add.reduceat(Qs, starts, axis=1)
    ok = mass > 0
    out = np.empty_like(X, dtype=float)
    step = max(1, chunk_elems // max(1, m * n))
    for a in range(0, len(X), step):
        xb = np.asarray(X[a : a + step], dtype=float)[:, order]
        num = np.add.reduceat(xb[:, None, :] * Qs[None], starts, axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(ok[None], num / np.where(ok, mass, 1.0)[None], np.inf)
        mins = ratio.min(axis=1)
        mins[np.isinf(mins)] = 0.0
        out[a : a + step] = mins[:, lab]
    return out


def default_taus(tree: ScenarioTree, cap: int = 5_000) -> list[StoppingPolicy]:
    """All pure stopping times when few enough, else the deterministic ones."""
    try:
        rows = enumerate_pure_policies(tree, cap)
    except EnumerationCapExceeded:
        return [constant_policy(tree, k) for k in range(tree.depth + 1)]
    return [StoppingPolicy(tree, "pure", stop_times=r) for r in rows]


def pasted_densities(fam: MeasureFamily, tau: StoppingPolicy) -> np.ndarray:
    """Densities of paste(Q_i, Q_j, tau) for all ordered pairs, shape (n, n, N)."""
    tree = fam.tree
    atoms = stopped_atoms(tree, tau.stop_times)
    D = fam.densities.astype(float)
    Q = D * tree.p.astype(float)
    B = np.zeros((tree.n_paths, int(atoms.max()) + 1))
    B[np.arange(tree.n_paths), atoms] = 1.0
    M = Q @ B  # (n, atoms)
    ratio = M[:, None, :] / M[None, :, :]
    return ratio[:, :, atoms] * D[None, :, :]


def is_stable_under_pasting(
    fam: MeasureFamily, taus: Sequence[StoppingPolicy] | None = None, tol: float = 1e-9
) -> Check:
    """Every pasting of two members in a supplied tau is within tv ``tol`` of a member.

    The scan runs in floating point; the first failing (Q1, Q2, tau) triple in
    lexicographic order is reported and can be replayed exactly with ``paste``.
    """
    tree = fam.tree
    if taus is None:
        taus = default_taus(tree)
    if not fam.equivalent:
        return Check(False, {"reason": "members not equivalent to P"})
    D = fam.densities.astype(float)
    p = tree.p.astype(float)
    n = len(fam)
    for t, tau in enumerate(taus):
        if not tau.is_pure:
            raise PolicyError("pasting stability is checked for pure stopping times only")
        pasted = pasted_densities(fam, tau).reshape(n * n, -1)
        dist = np.empty((n * n, n))
        for m in range(n):
            dist[:, m] = 0.5 * np.abs(pasted - D[m]) @ p
        nearest = dist.min(axis=1)
        bad = np.flatnonzero(nearest > tol)
        if bad.size:
            i, j = divmod(int(bad[0]), n)
            q3 = paste(fam[i], fam[j], tau)
            m = int(np.argmin(dist[bad[0]]))
            event = [tree.paths[w] for w in np.flatnonzero(q3.density.astype(float) - D[m] > 0)]
            return Check(
                False,
                {
                    "q1": i,
                    "q2": j,
                    "tau": tau.to_dict(),
                    "tau_index": t,
                    "event": event,
                    "pasted_density": [float(v) for v in q3.density],
                    "distance_to_family": float(nearest[bad[0]]),
                },
            )
    return Check(True, details={"n_taus": len(taus), "over_test_universe": True})


def recursiveness_check(fam: MeasureFamily, x, tau_idx: int, sigma_idx: int, tol: float = 1e-9) -> Check:
    """Compare min_Q E_Q[min_Q E_Q[x|F_sigma] | F_tau] with min_Q E_Q[x|F_tau] nodewise."""
    if sigma_idx < tau_idx:
        raise ValueError("sigma_idx must be >= tau_idx")
    tree = fam.tree
    x = tree.convert(x)
    inner = worst_conditional(fam, x, sigma_idx)
    lhs = worst_conditional(fam, inner, tau_idx)
    rhs = worst_conditional(fam, x, tau_idx)
    gap = [float(abs(a - b)) for a, b in zip(lhs, rhs)]
    bad = [i for i, g in enumerate(gap) if g > tol]
    first = tree.first_paths[tau_idx]
    details = {"lhs": [float(v) for v in lhs[first]], "rhs": [float(v) for v in rhs[first]]}
    if bad:
        node = int(tree.node_of[tau_idx][bad[0]])
        return Check(
            False,
            {"x": [float(v) for v in x], "tau_idx": tau_idx, "sigma_idx": sigma_idx, "node": node,
             "lhs": float(lhs[bad[0]]), "rhs": float(rhs[bad[0]])},
            details,
        )
    return Check(True, details=details)


def indicator_basis(tree: ScenarioTree, max_paths: int = 10) -> list[np.ndarray]:
    """Indicators of every event when the tree is small, else of every node."""
    n = tree.n_paths
    if n <= max_paths:
        vecs = []
        for mask in range(1, 1 << n):
            vecs.append(np.array([(mask >> i) & 1 for i in range(n)]))
        return vecs
    vecs = []
    for k in range(1, tree.depth + 1):
        for node in range(tree.n_nodes(k)):
            vecs.append((tree.node_of[k] == node).astype(int))
    return vecs


def _index_pairs(tree: ScenarioTree):
    return [(t, s) for t in range(tree.depth + 1) for s in range(t, tree.depth + 1)]


def recursiveness_on_basis(fam: MeasureFamily, basis=None, tol: float = 1e-9) -> Check:
    tree = fam.tree
    basis = indicator_basis(tree) if basis is None else basis
    if not tree.exact and basis:
        X = np.vstack(basis).astype(float)
        cond = [_worst_conditional_batch(fam, X, k) for k in range(tree.depth + 1)]
        for t, s in _index_pairs(tree):
            lhs = _worst_conditional_batch(fam, cond[s], t)
            bad = np.flatnonzero((np.abs(lhs - cond[t]) > tol).any(axis=1))
            if bad.size:
                return recursiveness_check(fam, basis[bad[0]], t, s, tol)
        return Check(True, details={"n_vectors": len(basis), "over_test_universe": True})
    for x in basis:
        for t, s in _index_pairs(tree):
            chk = recursiveness_check(fam, x, t, s, tol)
            if not chk:
                return chk
    return Check(True, details={"n_vectors": len(basis), "over_test_universe": True})


def time_consistency_witness(fam: MeasureFamily, x, tau_idx: int, sigma_idx: int) -> dict:
    """Turn a recursiveness failure into an (X, Z, sigma, tau) violation.

    With Z = min_Q E_Q[X | F_sigma] both sides agree at sigma, while at tau
    the X side is strictly larger on the failing node.
    """
    z = worst_conditional(fam, fam.tree.convert(x), sigma_idx)
    return {"x": [float(v) for v in x], "z": [float(v) for v in z], "sigma_idx": sigma_idx, "tau_idx": tau_idx}


def implication_holds(fam: MeasureFamily, x, z, tau_idx: int, sigma_idx: int, tol: float = 1e-9) -> bool:
    """Time-consistency implication for one (X, Z) pair and tau <= sigma."""
    a = worst_conditional(fam, x, sigma_idx)
    b = worst_conditional(fam, z, sigma_idx)
    if any(float(u) > float(v) + tol for u, v in zip(a, b)):
        return True  # premise fails
    a = worst_conditional(fam, x, tau_idx)
    b = worst_conditional(fam, z, tau_idx)
    return all(float(u) <= float(v) + tol for u, v in zip(a, b))


def is_time_consistent(
    fam: MeasureFamily,
    test_pairs: Sequence[tuple[Any, Any]] | None = None,
    stop_pairs: Sequence[tuple[int, int]] | None = None,
    tol: float = 1e-9,
) -> Check:
    """Check the time-consistency implication over a finite test universe.

    Without ``test_pairs`` the check runs recursiveness over the indicator
    basis and converts a failure into an explicit (X, Z, sigma, tau) witness.
    """
    tree = fam.tree
    stop_pairs = _index_pairs(tree) if stop_pairs is None else stop_pairs
    for t, s in stop_pairs:
        if not 0 <= t <= s <= tree.depth:
            raise ValueError(f"malformed stop pair ({t}, {s})")
    if test_pairs is None:
        rec = recursiveness_on_basis(fam, tol=tol)
        if rec:
            return Check(True, details={"route": "recursiveness", "over_test_universe": True, **rec.details})
        w = rec.witness
        return Check(False, time_consistency_witness(fam, w["x"], w["tau_idx"], w["sigma_idx"]))
    for x, z in test_pairs:
        if len(x) != tree.n_paths or len(z) != tree.n_paths:
            raise ValueError("test vectors must have one entry per path")
        for t, s in stop_pairs:
            if not implication_holds(fam, x, z, t, s, tol):
                return Check(False, {"x": list(map(float, x)), "z": list(map(float, z)), "sigma_idx": s, "tau_idx": t})
    return Check(True, details={"route": "test_pairs", "over_test_universe": True, "n_pairs": len(test_pairs)})


def statement2_check(fam: MeasureFamily, x, tau_idx: int, tol: float = 1e-9) -> Check:
    """inf_Q E_Q[x] <= inf_Q E_Q[ess inf_Q E_Q[x | F_tau]]."""
    tree = fam.tree
    x = tree.convert(x)
    lhs = min(m.expect(x) for m in fam)
    inner = worst_conditional(fam, x, tau_idx)
    rhs = min(m.expect(inner) for m in fam)
    if float(lhs) > float(rhs) + tol:
        return Check(False, {"x": [float(v) for v in x], "tau_idx": tau_idx, "lhs": float(lhs), "rhs": float(rhs)})
    return Check(True, details={"lhs": float(lhs), "rhs": float(rhs)})


def statement2_on_basis(fam: MeasureFamily, basis=None, tol: float = 1e-9) -> Check:
    basis = indicator_basis(fam.tree) if basis is None else basis
    if not fam.tree.exact and basis:
        X = np.vstack(basis).astype(float)
        Q = np.asarray(fam.densities, dtype=float) * np.asarray(fam.tree.p, dtype=float)
        lhs = (X @ Q.T).min(axis=1)
        for t in range(fam.tree.depth + 1):
            rhs = (_worst_conditional_batch(fam, X, t) @ Q.T).min(axis=1)
            bad = np.flatnonzero(lhs > rhs + tol)
            if bad.size:
                return statement2_check(fam, basis[bad[0]], t, tol)
        return Check(True, details={"n_vectors": len(basis), "over_test_universe": True})
    for x in basis:
        for t in range(fam.tree.depth + 1):
            chk = statement2_check(fam, x, t, tol)
            if not chk:
                return chk
    return Check(True, details={"n_vectors": len(basis), "over_test_universe": True})


def statement2_random_search(fam: MeasureFamily, n_samples: int = 200, seed: int = 0, tol: float = 1e-9) -> Check:
    rng = np.random.default_rng(seed)
    for _ in range(n_samples):
        x = rng.normal(size=fam.tree.n_paths)
        for t in range(fam.tree.depth + 1):
            chk = statement2_check(fam, x, t, tol)
            if not chk:
                return chk
    return Check(True, details={"n_samples": n_samples, "seed": seed, "over_test_universe": True})


def in_convex_hull(fam: MeasureFamily, density, tol: float = 1e-9) -> bool:
    """Is ``density`` a convex combination of member densities (LP feasibility)?"""
    D = fam.densities.astype(float)
    n = len(fam)
    A_eq = sparse.vstack([sparse.csr_matrix(D.T), sparse.csr_matrix(np.ones((1, n)))])
    b_eq = np.concatenate([np.asarray(density, dtype=float), [1.0]])
    # minimise the L1 residual so the answer comes with a tolerance
    m = A_eq.shape[0]
    c = np.concatenate([np.zeros(n), np.ones(2 * m)])
    eye = sparse.identity(m, format="csr")
    A = sparse.hstack([A_eq, eye, -eye], format="csr")
    res = linprog(c, A_eq=A, b_eq=b_eq, bounds=[(0, None)] * (n + 2 * m), method="highs")
    return res.status == 0 and res.fun <= tol


def hull_pasting_check(
    fam: MeasureFamily,
    taus: Sequence[StoppingPolicy] | None = None,
    n_interior: int = 4,
    seed: int = 0,
    tol: float = 1e-7,
    max_vertices: int = 6,
    max_taus: int = 12,
) -> Check:
    """Pasting stability of the strictly positive mixtures, tested on samples.

    Mixtures are up to ``max_vertices`` simplex vertices (a seeded subset for
    large families) plus ``n_interior`` seeded interior points; each pasting
    must land back in the convex hull of the members.
    """
    taus = list(default_taus(fam.tree, cap=200) if taus is None else taus)
    rng = np.random.default_rng(seed)
    n = len(fam)
    if len(taus) > max_taus:
        taus = [taus[i] for i in sorted(rng.choice(len(taus), max_taus, replace=False))]
    picks = range(n) if n <= max_vertices else sorted(rng.choice(n, max_vertices, replace=False))
    weights = [np.eye(n)[i] for i in picks] + [rng.dirichlet(np.ones(n)) for _ in range(n_interior)]
    ffam = float_family(fam)
    D = ffam.densities
    mixes = [convex_combination(ffam, w) for w in weights]
    keep = [i for i, m in enumerate(mixes) if m.equivalent]
    for tau in taus:
        tau_f = StoppingPolicy(ffam.tree, "pure", stop_times=tau.stop_times)
        for a, b in itertools.product(keep, repeat=2):
            if a == b:
                continue
            q3 = paste(mixes[a], mixes[b], tau_f)
            if np.abs(D - q3.density).max(axis=1).min() <= tol:
                continue
            if not in_convex_hull(fam, q3.density, tol):
                return Check(False, {"mix1": [float(v) for v in weights[a]], "mix2": [float(v) for v in weights[b]],
                                     "tau": tau.to_dict(), "pasted_density": [float(v) for v in q3.density]})
    return Check(True, details={"n_mixtures": len(keep), "n_taus": len(taus), "over_test_universe": True})


@dataclass
class ConsistencyReport:
    pasting_stable: Check
    time_consistent: Check
    recursive: Check
    statement2: Check
    statement3: Check | None
    tested_universe: dict

    def to_dict(self) -> dict:
        def conv(c: Check | None):
            if c is None:
                return None
            return {"holds": c.holds, "witness": c.witness, "details": _jsonable(c.details)}

        return {
            "pasting_stable": conv(self.pasting_stable),
            "time_consistent": conv(self.time_consistent),
            "recursive": conv(self.recursive),
            "statement2": conv(self.statement2),
            "statement3": conv(self.statement3),
            "tested_universe": self.tested_universe,
            "statement4": "not finitely checkable; only its consequences (1) and (2) are tested",
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)) or hasattr(obj, "denominator"):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def consistency_report(
    fam: MeasureFamily,
    taus: Sequence[StoppingPolicy] | None = None,
    tol: float = 1e-9,
    hull_samples: int = 4,
    seed: int = 0,
) -> ConsistencyReport:
    tree = fam.tree
    taus = default_taus(tree) if taus is None else taus
    basis = indicator_basis(tree)
    rec = recursiveness_on_basis(fam, basis, tol)
    tc = Check(True, details={"route": "recursiveness", "over_test_universe": True}) if rec else Check(
        False, time_consistency_witness(fam, rec.witness["x"], rec.witness["tau_idx"], rec.witness["sigma_idx"])
    )
    st3 = hull_pasting_check(fam, taus, hull_samples, seed)
    return ConsistencyReport(
        pasting_stable=is_stable_under_pasting(fam, taus, tol),
        time_consistent=tc,
        recursive=rec,
        statement2=statement2_on_basis(fam, basis, tol),
        statement3=st3,
        tested_universe={
            "n_taus": len(taus),
            "n_basis_vectors": len(basis),
            "basis": "all event indicators" if tree.n_paths <= 10 else "node indicators",
            "index_pairs": len(_index_pairs(tree)),
        },
    )
