from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fixture_paths
from helpers import random_instance
from robuststop.consistency import (
    consistency_report,
    implication_holds,
    in_convex_hull,
    indicator_basis,
    is_stable_under_pasting,
    is_time_consistent,
    recursiveness_check,
    recursiveness_on_basis,
    statement2_check,
    statement2_on_basis,
    statement2_random_search,
    worst_conditional,
)
from robuststop.io import read_family, read_tree
from robuststop.measures import family, paste, rectangular_family, uniform_boxes
from robuststop.stopping import StoppingPolicy
from robuststop.tree import binary_lattice

F = Fraction


def load(name, exact=False):
    p = fixture_paths(name)
    tree = read_tree(p["tree"], exact)
    return read_family(p["family"], tree, exact)


def worst_conditional_loops(tree, dens, x, k):
    """Nodewise min over members of the conditional mean, plain loops."""
    out = [None] * tree.n_paths
    for node in set(tree.node_of[k]):
        members = [i for i in range(tree.n_paths) if tree.node_of[k][i] == node]
        vals = []
        for d in dens:
            mass = sum(tree.p[i] * d[i] for i in members)
            if mass:
                vals.append(sum(tree.p[i] * d[i] * x[i] for i in members) / mass)
        for i in members:
            out[i] = min(vals)
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_worst_conditional_matches_loops(seed, depth, m):
    rng = np.random.default_rng(seed)
    tree, _, _, fam, dens, y = random_instance(rng, depth, m, exact=True, max_paths=10)
    x = y.y[-1]
    for k in range(depth + 1):
        assert list(worst_conditional(fam, x, k)) == worst_conditional_loops(tree, dens, list(x), k)


def test_singleton_family_is_consistent():
    tree, fam = load("singleton")
    rep = consistency_report(fam)
    assert rep.pasting_stable and rep.recursive and rep.time_consistent and rep.statement2 and rep.statement3


def test_rectangular_depth2_is_consistent():
    tree, fam = load("rectangular")
    rep = consistency_report(fam)
    assert rep.pasting_stable and rep.recursive and rep.time_consistent and rep.statement2 and rep.statement3


@pytest.mark.parametrize("lo,hi", [(0.3, 0.7), (0.45, 0.5), (0.1, 0.9)])
def test_rectangular_depth3_is_consistent(lo, hi):
    t = binary_lattice(3)
    fam = rectangular_family(t, uniform_boxes(t, lo, hi))
    assert is_stable_under_pasting(fam)
    assert recursiveness_on_basis(fam)
    assert statement2_on_basis(fam)
    assert statement2_random_search(fam, n_samples=50)


def test_gap_family_refuted_with_replayable_witnesses():
    tree, fam = load("gap", exact=True)
    rep = consistency_report(fam)
    assert not rep.pasting_stable and not rep.recursive and not rep.time_consistent

    w = rep.pasting_stable.witness
    tau = StoppingPolicy(tree, "pure", stop_times=np.array(w["tau"]["stop_times"]))
    q3 = paste(fam[w["q1"]], fam[w["q2"]], tau)
    assert all(any(q3.density[i] != m.density[i] for i in range(tree.n_paths)) for m in fam)
    assert [float(v) for v in q3.density] == w["pasted_density"]

    w = rep.recursive.witness
    x = [F(v).limit_denominator(10**6) for v in w["x"]]
    dens = [list(m.density) for m in fam]
    inner = worst_conditional_loops(tree, dens, x, w["sigma_idx"])
    lhs = worst_conditional_loops(tree, dens, inner, w["tau_idx"])
    rhs = worst_conditional_loops(tree, dens, x, w["tau_idx"])
    assert lhs != rhs

    w = rep.time_consistent.witness
    assert not implication_holds(fam, w["x"], w["z"], w["tau_idx"], w["sigma_idx"])


def test_recursion_trivial_when_tau_equals_sigma():
    tree, fam = load("gap", exact=True)
    for x in indicator_basis(tree):
        for k in range(tree.depth + 1):
            assert recursiveness_check(fam, x, k, k)


def test_recursion_rejects_bad_order():
    tree, fam = load("gap")
    with pytest.raises(ValueError):
        recursiveness_check(fam, np.ones(4), 2, 1)


def test_statement2_at_time_zero_is_equality():
    tree, fam = load("gap", exact=True)
    for x in indicator_basis(tree):
        chk = statement2_check(fam, x, 0)
        assert chk and chk.details["lhs"] == chk.details["rhs"]


def test_statement2_random_search_refutes_gap_family():
    tree, fam = load("gap")
    chk = statement2_random_search(fam, n_samples=300, seed=1)
    assert not chk
    w = chk.witness
    dens = [list(m.density) for m in fam]
    x = w["x"]
    lhs = min(sum(tree.p[i] * d[i] * x[i] for i in range(4)) for d in dens)
    inner = worst_conditional_loops(tree, dens, x, w["tau_idx"])
    rhs = min(sum(tree.p[i] * d[i] * inner[i] for i in range(4)) for d in dens)
    assert lhs == pytest.approx(w["lhs"]) and rhs == pytest.approx(w["rhs"])
    assert lhs > rhs


def test_statement2_random_search_passes_rectangular():
    tree, fam = load("rectangular")
    assert statement2_random_search(fam, n_samples=100, seed=1)


def test_time_consistency_with_explicit_pairs():
    tree, fam = load("singleton")
    rng = np.random.default_rng(0)
    pairs = [(rng.normal(size=4), rng.normal(size=4)) for _ in range(20)]
    assert is_time_consistent(fam, pairs)
    with pytest.raises(ValueError):
        is_time_consistent(fam, pairs, stop_pairs=[(2, 1)])


def test_convex_hull_membership():
    tree, fam = load("gap")
    mid = 0.5 * (fam[0].density + fam[1].density)
    assert in_convex_hull(fam, mid)
    assert not in_convex_hull(fam, np.array([1.0, 1.0, 1.0, 1.0]))


def test_pasting_closure_of_pasting_hull():
    # adding every pasting of the gap pair gives a stable family on one-step taus
    tree, fam = load("gap", exact=True)
    taus = [StoppingPolicy(tree, "pure", stop_times=np.array(r)) for r in ([1, 1, 1, 1], [2, 2, 2, 2], [1, 1, 2, 2], [2, 2, 1, 1])]
    dens = {tuple(m.density) for m in fam}
    for _ in range(5):
        members = family(tree, [list(d) for d in sorted(dens)])
        new = {tuple(paste(a, b, tau).density) for tau in taus for a in members for b in members}
        if new <= dens:
            break
        dens |= new
    closed = family(tree, [list(d) for d in sorted(dens)])
    assert is_stable_under_pasting(closed, taus)
