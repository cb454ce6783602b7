import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_tree
from oracles import all_stopping_times
from robuststop.stopping import (
    EnumerationCapExceeded,
    PayoffProcess,
    PolicyError,
    constant_policy,
    count_pure_policies,
    enumerate_pure_policies,
    mixture_policy,
    policy_from_indicators,
    pure_policy,
)
from robuststop.tree import binary_lattice


@pytest.mark.parametrize("depth,count", [(1, 2), (2, 5), (3, 26), (4, 677)])
def test_binary_policy_counts(depth, count):
    t = binary_lattice(depth)
    assert count_pure_policies(t) == count
    rows = enumerate_pure_policies(t)
    assert len(rows) == count
    assert len({tuple(r) for r in rows}) == count


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_enumeration_matches_brute_force(seed, depth):
    rng = np.random.default_rng(seed)
    t, parts, _ = random_tree(rng, depth, max_paths=6)
    index = {pid: i for i, pid in enumerate(t.paths)}
    oparts = [[[index[p] for p in b] for b in part] for part in parts]
    brute = set(all_stopping_times(oparts))
    mine = {tuple(int(v) for v in r) for r in enumerate_pure_policies(t)}
    assert mine == brute


def test_enumeration_order_stops_early_first():
    rows = enumerate_pure_policies(binary_lattice(2))
    assert (rows[0] == 0).all()


def test_cap():
    with pytest.raises(EnumerationCapExceeded):
        enumerate_pure_policies(binary_lattice(4), cap=100)


def test_pure_policy_must_be_adapted():
    t = binary_lattice(2)
    # stopping at 1 on "uu" but not on "ud" is not decided by F_1
    with pytest.raises(PolicyError, match="not a stopping time"):
        pure_policy(t, [1, 2, 2, 2])
    with pytest.raises(PolicyError):
        pure_policy(t, [0, 0, 0, 3])


def test_indicators_roundtrip():
    t = binary_lattice(2)
    tau = pure_policy(t, [1, 1, 2, 2])
    assert policy_from_indicators(t, tau.indicators()).stop_times.tolist() == [1, 1, 2, 2]


def test_payoff_adaptedness_and_ystar():
    t = binary_lattice(1)
    with pytest.raises(PolicyError, match="adapted"):
        PayoffProcess(t, np.array([[1.0, 2.0], [0.0, 0.0]]))
    y = PayoffProcess.from_nodes(t, [[-3], [2, -1]])
    assert y.y_star.tolist() == [3, 3]
    assert y.at(np.array([1, 0])).tolist() == [2, -3]


def test_policy_value_and_mixture():
    t = binary_lattice(1)
    y = PayoffProcess.from_nodes(t, [[1.0], [2.0, 0.0]])
    assert constant_policy(t, 0).value(y, [1, 1]) == pytest.approx(1.0)
    assert constant_policy(t, 1).value(y, [1.2, 0.8]) == pytest.approx(1.2)
    mix = mixture_policy(t, np.array([[0, 0], [1, 1]]), [0.25, 0.75])
    assert not mix.is_pure
    assert mix.value(y, [1, 1]) == pytest.approx(0.25 * 1 + 0.75 * 1)
    assert mix.to_dict()["kind"] == "randomized"
