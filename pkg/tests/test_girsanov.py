import json
import math

import numpy as np
import pytest

from robuststop.girsanov import (
    BLOCK_SIZE,
    GirsanovError,
    PsiFunction,
    d_psi,
    density_process,
    drift_check,
    family_from_psis,
    parse_psi,
    psi_matrix,
    quadratic_variation,
    quantized_tree,
    simulate_drivers,
    stochastic_integral,
)


@pytest.fixture(scope="module")
def drivers():
    return simulate_drivers(steps=50, paths=20_000, seed=11)


def test_d_psi_examples():
    t = np.linspace(0, 1, 10_001)
    zero, lin, half = parse_psi("const:0"), parse_psi("linear:0,1"), parse_psi("const:0.5")
    assert d_psi(zero, lin, [1.0], t) == pytest.approx(math.sqrt(1 / 3), abs=1e-6)
    assert d_psi(zero, half, [1.0], t) == pytest.approx(0.5, abs=1e-12)
    assert d_psi(lin, lin, [1.0], t) == 0.0
    # the left rule on K steps is the Riemann sum of t^2
    K = 50
    tk = np.linspace(0, 1, K + 1)
    assert d_psi(zero, lin, [1.0], tk, rule="left") ** 2 == pytest.approx(sum((k / K) ** 2 for k in range(K)) / K)
    # sup over the x grid for state-dependent psi
    th = parse_psi("tanh:1,1")
    assert d_psi(zero, th, [0.5, 2.0], t) == pytest.approx(math.tanh(2.0), abs=1e-9)
    with pytest.raises(ValueError):
        d_psi(zero, lin, [1.0], t, rule="simpson")


def test_psi_matrix_is_semimetric():
    psis = [parse_psi(p) for p in ("const:0", "const:0.5", "linear:0,1", "tanh:1,1")]
    d = psi_matrix(psis, np.linspace(0.5, 2, 7), np.linspace(0, 1, 201))
    assert (d == d.T).all() and (np.diag(d) == 0).all()
    n = len(psis)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                assert d[i, k] <= d[i, j] + d[j, k] + 1e-12


def test_integral_of_constants(drivers):
    zero = stochastic_integral(parse_psi("const:0"), drivers)
    one = stochastic_integral(parse_psi("const:1"), drivers)
    assert (zero == 0).all()
    np.testing.assert_allclose(one, drivers.z(), rtol=0, atol=1e-12)


def test_ito_isometry(drivers):
    x = stochastic_integral(parse_psi("linear:0,1"), drivers)[:, -1]
    K = drivers.n_steps
    expected = sum((k / K) ** 2 for k in range(K)) / K
    se = expected * math.sqrt(2 / drivers.n_paths)
    assert abs(x.var() - expected) <= 5 * se
    assert abs(x.mean()) <= 5 * math.sqrt(expected / drivers.n_paths)


def test_quadratic_variation_constant(drivers):
    qv = quadratic_variation(parse_psi("const:0.7"), drivers)
    np.testing.assert_allclose(qv, np.broadcast_to(0.49 * drivers.times, qv.shape), rtol=0, atol=1e-12)


def test_density_positive_and_telescoping(drivers):
    psi = parse_psi("linear:0.2,0.5")
    dp = density_process(psi, drivers)
    assert (dp.m > 0).all()
    t = drivers.times[:-1]
    vals = 0.2 + 0.5 * t
    step = np.exp(vals * drivers.dz - vals**2 * drivers.dt / 2)
    np.testing.assert_allclose(dp.m[:, 1:] / dp.m[:, :-1], step, rtol=1e-10)
    assert abs(dp.raw_mean - 1) <= 3 * dp.raw_stderr
    assert dp.terminal.mean() == pytest.approx(1.0, abs=1e-12)


def test_equal_psis_give_equal_densities(drivers):
    a = density_process(parse_psi("const:0.5"), drivers)
    b = density_process(parse_psi("linear:0.5,0"), drivers)
    assert np.array_equal(a.m, b.m)
    assert d_psi(parse_psi("const:0.5"), parse_psi("linear:0.5,0"), [1.0], drivers.times) == 0.0


def test_girsanov_drift(drivers):
    dp = density_process(parse_psi("const:0.5"), drivers)
    chk = drift_check(dp.terminal, drivers.z()[:, -1], 0.5)
    assert chk["ok"]
    wrong = drift_check(dp.terminal, drivers.z()[:, -1], 0.0)
    assert not wrong["ok"]


def test_threads_do_not_change_output():
    a = simulate_drivers(steps=8, paths=3 * BLOCK_SIZE + 17, seed=5, threads=1, vol={"kind": "ar", "v0": 1.0})
    b = simulate_drivers(steps=8, paths=3 * BLOCK_SIZE + 17, seed=5, threads=4, vol={"kind": "ar", "v0": 1.0})
    assert np.array_equal(a.dz, b.dz) and np.array_equal(a.v, b.v)
    c = simulate_drivers(steps=8, paths=3 * BLOCK_SIZE + 17, seed=6)
    assert not np.array_equal(a.dz, c.dz)


def test_ar_volatility_recursion():
    d = simulate_drivers(steps=6, paths=500, seed=1, vol={"kind": "ar", "v0": 2.0, "phi": 0.8, "eta": 0.3})
    logv = np.log(d.v)
    assert logv[:, 0] == pytest.approx(math.log(2.0))
    np.testing.assert_allclose(logv[:, 1:], 0.8 * logv[:, :-1] + 0.3 * d.dz[:, :-1], atol=1e-12)


def test_simulation_errors():
    with pytest.raises(GirsanovError):
        simulate_drivers(steps=0, paths=10)
    with pytest.raises(GirsanovError):
        simulate_drivers(steps=4, paths=10, vol={"kind": "heston"})
    with pytest.raises(GirsanovError):
        simulate_drivers(steps=4, paths=10, v_table=np.ones((3, 3)))


def test_parse_errors(tmp_path):
    for bad in ("const:", "const:1,2", "linear:1", "poly:1", "tanh:a,b", "table:" + str(tmp_path / "missing.json")):
        with pytest.raises(GirsanovError):
            parse_psi(bad)
    bad_table = tmp_path / "bad.json"
    bad_table.write_text(json.dumps({"t": [0, 1], "x": [0, 1], "values": [[1, 2]]}))
    with pytest.raises(GirsanovError):
        parse_psi("table:bad.json", base_dir=tmp_path)


def test_table_psi(tmp_path):
    (tmp_path / "tab.json").write_text(json.dumps({"t": [0, 1], "x": [0, 2], "values": [[0, 2], [1, 3]]}))
    psi = parse_psi("table:tab.json", base_dir=tmp_path)
    assert psi(0.5, np.array([1.0]))[0] == pytest.approx(1.5)
    # clamped outside the table
    assert psi(2.0, np.array([5.0]))[0] == pytest.approx(3.0)
    assert psi.x_dependent and psi.spot_check(1.0, np.linspace(0, 2, 5))


def test_non_finite_psi_rejected():
    psi = PsiFunction("bad", lambda t, x: np.full(np.shape(x), np.nan), lambda T: 0.0)
    with pytest.raises(GirsanovError, match="non-finite"):
        psi(0.0, np.ones(3))


def test_quantized_tree_levels():
    drivers = simulate_drivers(steps=12, paths=3000, seed=2)
    tree = quantized_tree(drivers, bins=2)
    assert tree.depth == drivers.n_steps
    for k in range(1, 6):
        assert tree.n_nodes(k) <= 2**k
    assert tree.n_nodes(tree.depth) == drivers.n_paths
    with pytest.raises(GirsanovError):
        quantized_tree(drivers, bins=0)


def test_family_from_psis():
    d = simulate_drivers(steps=10, paths=4000, seed=3, vol={"kind": "ar", "v0": 1.0})
    psis = [parse_psi(p) for p in ("const:0", "const:0.5", "linear:0,1", "tanh:1,1")]
    g = family_from_psis(psis, d)
    assert g.family.equivalent and len(g.family) == 4
    assert g.diagnostics["qv_cauchy_schwarz"]
    assert all(g.diagnostics["declared_bounds_hold"])
    assert g.fields.values.shape == (4, 4000)
    for dp in g.densities:
        assert abs(dp.raw_mean - 1) <= 5 * dp.raw_stderr
    assert g.space.dist[0, 1] == pytest.approx(0.5)
    with pytest.warns(UserWarning, match="singleton"):
        family_from_psis(psis[:1], d)
    with pytest.raises(GirsanovError):
        family_from_psis([], d)
