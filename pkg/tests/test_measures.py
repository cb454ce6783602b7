import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from helpers import random_tree
from oracles import paste_by_events, tv_by_events
from robuststop.measures import (
    MeasureError,
    box_vertices,
    convex_combination,
    density_path_diagnostics,
    family,
    measure,
    paste,
    range_compactness_diag,
    rectangular_family,
    reference_measure,
    tv_distance,
    tv_matrix,
    uniform_boxes,
    vector_measure_eval,
)
from robuststop.stopping import constant_policy, enumerate_pure_policies, pure_policy, randomized_policy
from robuststop.tree import NullNodeError, binary_lattice

F = Fraction


def test_measure_validation():
    t = binary_lattice(1)
    with pytest.raises(MeasureError):
        measure(t, [1.5, 0.6])
    with pytest.raises(MeasureError):
        measure(t, [2.5, -0.5])
    assert not measure(t, [2.0, 0.0]).equivalent
    assert measure(t, [1.2, 0.8]).equivalent


def test_paste_at_zero_and_terminal():
    t = binary_lattice(2, exact=True)
    q1 = measure(t, [F(1, 2), F(1), F(1, 2), F(2)])
    q2 = measure(t, [F(1), F(1, 2), F(2), F(1, 2)])
    assert list(paste(q1, q2, constant_policy(t, 0)).density) == list(q2.density)
    assert list(paste(q1, q2, constant_policy(t, 2)).density) == list(q1.density)


def test_paste_matches_event_oracle():
    t = binary_lattice(2, exact=True)
    q1 = reference_measure(t)
    q2 = measure(t, [F(2), F(0), F(1), F(1)])
    tau = pure_policy(t, [1, 1, 2, 2])  # stop at 1 iff up
    q3 = paste(q1, q2, tau)
    parts = [[[0, 1, 2, 3]], [[0, 1], [2, 3]], [[0], [1], [2], [3]]]
    oracle = paste_by_events(parts, list(q1.q), list(q2.q), [1, 1, 2, 2])
    for bits, prob in oracle.items():
        assert sum(q * b for q, b in zip(q3.q, bits)) == prob
    # Q2 puts all of the up-mass on "uu"; P splits it evenly, so pasting moves mass
    assert list(q3.density) == [F(2), F(0), F(1), F(1)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_paste_oracle_random(seed, depth):
    rng = np.random.default_rng(seed)
    t, parts, _ = random_tree(rng, depth, exact=True, max_paths=8)
    index = {pid: i for i, pid in enumerate(t.paths)}
    oparts = [[[index[p] for p in b] for b in part] for part in parts]
    qs = []
    for _ in range(2):
        w = [F(int(v)) for v in rng.integers(1, 5, size=t.n_paths)]
        s = sum(w)
        qs.append(measure(t, [wi / s / pi for wi, pi in zip(w, t.p)]))
    rows = enumerate_pure_policies(t)
    tau = rows[int(rng.integers(len(rows)))]
    q3 = paste(qs[0], qs[1], pure_policy(t, tau))
    oracle = paste_by_events(oparts, list(qs[0].q), list(qs[1].q), [int(v) for v in tau])
    for bits, prob in oracle.items():
        assert sum(q * b for q, b in zip(q3.q, bits)) == prob


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_paste_idempotent(seed):
    rng = np.random.default_rng(seed)
    t, _, _ = random_tree(rng, 3, exact=True, max_paths=10)
    w = [F(int(v)) for v in rng.integers(1, 5, size=t.n_paths)]
    q = measure(t, [wi / sum(w) / pi for wi, pi in zip(w, t.p)])
    for tau in enumerate_pure_policies(t)[:20]:
        assert list(paste(q, q, pure_policy(t, tau)).density) == list(q.density)


def test_paste_rejects_randomized_and_null_atoms():
    t = binary_lattice(1)
    q1 = reference_measure(t)
    q2 = measure(t, [2.0, 0.0])
    with pytest.raises(NullNodeError):
        paste(q1, q2, constant_policy(t, 1))
    rand = randomized_policy(t, [[0.5], [0.5, 0.5]])
    with pytest.raises(Exception, match="pure"):
        paste(q1, q1, rand)


@pytest.mark.parametrize(
    "d1,d2,expected",
    [((2, 0), (0, 2), F(1)), ((F(3, 2), F(1, 2)), (1, 1), F(1, 4)), ((1, 1), (1, 1), F(0))],
)
def test_tv_examples(d1, d2, expected):
    t = binary_lattice(1, exact=True)
    q1, q2 = measure(t, [F(v) for v in d1]), measure(t, [F(v) for v in d2])
    assert tv_distance(q1, q2) == expected
    assert tv_by_events(list(t.p), list(q1.density), list(q2.density)) == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_tv_is_metric(seed):
    rng = np.random.default_rng(seed)
    t, _, _ = random_tree(rng, 2, max_paths=8)
    assume(t.n_paths > 1)
    dens = rng.uniform(0.1, 2.0, size=(3, t.n_paths))
    dens /= (dens @ t.p)[:, None]
    fam = family(t, dens)
    m = tv_matrix(fam)
    assert np.allclose(m, m.T)
    assert np.allclose(np.diag(m), 0)
    for a, b, c in itertools.permutations(range(3)):
        assert m[a, c] <= m[a, b] + m[b, c] + 1e-12
    for a, b in itertools.combinations(range(3), 2):
        assert m[a, b] > 0
        assert m[a, b] == pytest.approx(float(tv_distance(fam[a], fam[b])), abs=1e-14)
    # sup over events agrees with the closed form
    assert float(tv_by_events([F(x) for x in t.p], [F(x) for x in dens[0]], [F(x) for x in dens[1]])) == pytest.approx(
        m[0, 1], abs=1e-12
    )


def test_vector_measure():
    t = binary_lattice(2, exact=True)
    fam = family(t, [[F(1, 2), F(1), F(1, 2), F(2)], [1, 1, 1, 1]])
    assert list(vector_measure_eval(fam, t.paths)) == [1, 1]
    assert list(vector_measure_eval(fam, [])) == [0, 0]
    a, b = ["uu"], ["du", "dd"]
    joint = vector_measure_eval(fam, a + b)
    assert list(joint) == list(vector_measure_eval(fam, a) + vector_measure_eval(fam, b))
    single = family(t, [[1, 1, 1, 1]])
    assert list(vector_measure_eval(single, ["ud"])) == [F(1, 4)]


def test_range_compactness():
    t = binary_lattice(1)
    assert range_compactness_diag(family(t, [[1, 1]]), 0.1)["net_size"] == 1
    fam = family(t, [[1, 1], [1.6, 0.4]])  # tv 0.3
    assert tv_matrix(fam)[0, 1] == pytest.approx(0.3)
    assert range_compactness_diag(fam, 0.5)["net_size"] == 1
    assert range_compactness_diag(fam, 0.2)["net_size"] == 2
    nets = range_compactness_diag(fam, [0.5, 0.2])["nets"]
    assert [n["net_size"] for n in nets] == [1, 2]


def test_density_path_diagnostics():
    t = binary_lattice(1)
    single = family(t, [[1.2, 0.8]], labels=[0.0])
    out = density_path_diagnostics(single, lambda a, b: abs(a - b))
    assert out["modulus"] == [0.0]
    assert list(out["dominated_by"]) == [1.2, 0.8]
    twins = family(t, [[1.2, 0.8], [1.2, 0.8]], labels=[0.0, 1.0])
    out = density_path_diagnostics(twins, lambda a, b: abs(a - b), deltas=[1.0])
    assert out["modulus"] == [0.0]


def test_convex_combination():
    t = binary_lattice(2)
    rng = np.random.default_rng(3)
    dens = rng.uniform(0.2, 2, size=(3, 4))
    dens /= (dens @ t.p)[:, None]
    fam = family(t, dens)
    assert np.allclose(convex_combination(fam, [0, 1, 0]).density, dens[1])
    assert np.allclose(convex_combination(family(t, dens[:2]), [0.5, 0.5]).density, dens[:2].mean(axis=0))
    w = np.array([0.2, 0.3, 0.5])
    x = rng.normal(size=4)
    mix = convex_combination(fam, w)
    assert mix.expect(x) == pytest.approx(sum(wi * m.expect(x) for wi, m in zip(w, fam)), abs=1e-12)
    with pytest.raises(MeasureError):
        convex_combination(fam, [0.5, 0.6, -0.1])


def test_rectangular_examples():
    t1 = binary_lattice(1, exact=True)
    fam = rectangular_family(t1, uniform_boxes(t1, F(2, 5), F(3, 5)))
    assert sorted(tuple(m.density) for m in fam) == [(F(4, 5), F(6, 5)), (F(6, 5), F(4, 5))]
    t2 = binary_lattice(2, exact=True)
    assert len(rectangular_family(t2, uniform_boxes(t2, F(2, 5), F(3, 5)))) == 8
    degenerate = rectangular_family(t2, uniform_boxes(t2, F(1, 2), F(1, 2)))
    assert len(degenerate) == 1 and list(degenerate[0].density) == [1, 1, 1, 1]


def test_rectangular_closed_under_pasting_depth3():
    t = binary_lattice(3)
    fam = rectangular_family(t, uniform_boxes(t, 0.3, 0.7))
    dens = fam.densities
    for tau in enumerate_pure_policies(t):
        pol = pure_policy(t, tau)
        for i in range(0, len(fam), 17):
            for j in range(0, len(fam), 13):
                q3 = paste(fam[i], fam[j], pol).density
                assert np.abs(dens - q3).max(axis=1).min() <= 1e-12


def test_box_vertices_validation():
    assert len(box_vertices([[0.2, 0.5], [0.5, 0.8]])) == 2
    with pytest.raises(MeasureError):
        box_vertices([[0.0, 0.5], [0.5, 1.0]])
    with pytest.raises(MeasureError):
        box_vertices([[0.6, 0.7], [0.6, 0.7]])
