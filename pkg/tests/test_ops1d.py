import json

import mpmath as mp
import numpy as np
import pytest

from sliceops import ops2d
from sliceops.domains import DomainSpec
from sliceops.errors import CorruptCacheError, TableError
from sliceops.ops1d import (WeightSpec, bootstrap_recurrence, eval_all, eval_all_with_derivative,
                            eval_poly, gauss_rule, jacobi_table, lift_both, lift_endpoint,
                            load_tables, save_tables)

import oracles


def test_legendre_closed_form():
    t = jacobi_table(0, 0, 10)
    n = np.arange(11)
    np.testing.assert_allclose(t.alpha, 0, atol=1e-15)
    np.testing.assert_allclose(t.beta, (n + 1) / np.sqrt(4 * (n + 1) ** 2 - 1), rtol=1e-14)
    assert t.omega == pytest.approx(2.0)


@pytest.mark.parametrize("A,B", [(1, 1), (2, 0), (0.5, 2), (1.5, 1)])
def test_jacobi_table_against_oracle(A, B):
    t = jacobi_table(A, B, 25, lo=-1.0, hi=1.0)
    w = lambda x: (1 - x) ** A * (1 + x) ** B
    # half-integer exponent at +1 needs the square-root substitution
    a, b, m = oracles.stieltjes(w, -1, 1, 25, sqrt_hi=not float(A).is_integer(), level=8)
    np.testing.assert_allclose(t.alpha, a, atol=1e-13)
    np.testing.assert_allclose(t.beta, b, atol=1e-13)
    assert t.omega == pytest.approx(m, rel=1e-13)


@pytest.mark.parametrize("kind,dom,params", [
    ("disk", DomainSpec.disk_slice(0.25, 0.75), (1, 1, 1)),
    ("disk", DomainSpec.disk_slice(0.1, 0.9), (0, 2, 0)),
    ("halfdisk", DomainSpec.end_disk_slice(0.2), (1, 1)),
    ("trapezium", DomainSpec.trapezium(0.5), (1, 0, 2, 1)),
])
def test_bootstrap_against_oracle(kind, dom, params):
    for level in (0, 3):
        w, lo, hi, sq = oracles.level_weight(kind, dom.alpha, dom.beta, dom.xi, params, level)
        a, b, m = oracles.stieltjes(w, lo, hi, 30, sq)
        t = bootstrap_recurrence(ops2d.x_weight(dom, params, level), 30)
        assert np.abs(t.alpha - a).max() < 1e-13
        assert np.abs(t.beta - b).max() < 1e-13
        assert t.omega == pytest.approx(m, rel=1e-13)


def test_lift_matches_bootstrap():
    w = WeightSpec(0.25, 0.75, 1, 1, 1.5, 1.5)
    base = bootstrap_recurrence(w, 50)
    up = lift_endpoint(base, 1)
    direct = bootstrap_recurrence(w.lifted(1), 48)
    assert up.N == base.N - 1
    assert np.abs(up.alpha[:49] - direct.alpha).max() < 1e-12
    assert np.abs(up.beta[:49] - direct.beta).max() < 1e-12
    assert up.omega == pytest.approx(direct.omega, rel=1e-13)
    both = lift_both(base, 2)
    direct2 = bootstrap_recurrence(WeightSpec(0.25, 0.75, 1, 1, 3.5, 3.5), 46)
    assert np.abs(both.alpha - direct2.alpha).max() < 1e-11
    assert np.abs(both.beta - direct2.beta).max() < 1e-11


def test_lift_errors():
    t = jacobi_table(0, 0, 0)
    with pytest.raises(TableError):
        lift_endpoint(t, 1)
    with pytest.raises(ValueError):
        lift_endpoint(jacobi_table(0, 0, 5), 0)


def test_gauss_rule_exactness():
    w = WeightSpec(0.25, 0.75, 1, 2, 1.5, 1.5)
    t = bootstrap_recurrence(w, 30)
    rule = gauss_rule(t, 12)
    with mp.workdps(30):
        for p in (0, 5, 23):
            exact = mp.quad(lambda x: x ** p * (0.75 - x) * (x - 0.25) ** 2 * (1 - x * x) ** 1.5,
                            [0.25, 0.75])
            assert rule.integrate(rule.nodes ** p) == pytest.approx(float(exact), rel=1e-13)
    with pytest.raises(TableError):
        gauss_rule(t, 40)


def test_orthonormality_and_derivative():
    t = bootstrap_recurrence(WeightSpec(0.2, 1.0, 0, 1, 2.5, 2.5), 30)
    rule = gauss_rule(t, 25)
    P = eval_all(t, 20, rule.nodes)
    G = (P * rule.weights) @ P.T / t.omega
    assert np.abs(G - np.eye(21)).max() < 1e-12
    x = np.linspace(0.3, 0.9, 7)
    h = 1e-6
    _, dP = eval_all_with_derivative(t, 10, x)
    fd = (eval_all(t, 10, x + h) - eval_all(t, 10, x - h)) / (2 * h)
    assert np.abs(dP - fd).max() < 1e-6 * np.abs(dP).max()
    assert eval_poly(t, 3, 0.5) == pytest.approx(eval_all(t, 3, 0.5)[3])


def test_save_load_roundtrip(tmp_path):
    tabs = [jacobi_table(1, 1, 12), bootstrap_recurrence(WeightSpec(0.25, 0.75, 1, 1, 1.5, 1.5), 12)]
    path = tmp_path / "t.json"
    save_tables(str(path), tabs, {"tag": 1})
    back, desc = load_tables(str(path))
    assert desc == {"tag": 1}
    for a, b in zip(tabs, back):
        assert np.array_equal(a.alpha, b.alpha) and np.array_equal(a.beta, b.beta)
        assert a.omega == b.omega
    doc = json.loads(path.read_text())
    doc["records"][1]["beta"][2] = float.hex(1.0)
    path.write_text(json.dumps(doc))
    with pytest.raises(CorruptCacheError):
        load_tables(str(path))


def test_weightspec_validation():
    with pytest.raises(ValueError):
        WeightSpec(1.0, 0.0)
    with pytest.raises(ValueError):
        WeightSpec(0.0, 1.0, a=-1.0)
