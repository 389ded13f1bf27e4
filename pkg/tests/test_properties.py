"""Property-based invariants (hypothesis)."""

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from sliceops import cli, operators as ops
from sliceops.bbbmatrix import BBBMatrix, total_size
from sliceops.domains import DomainSpec, t_exponents, weight_2d, x_exponents
from sliceops.transform import analyze, synthesize

from conftest import DOMAINS

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


@st.composite
def bbb(draw, nrows=None, ncols=None):
    nr = draw(st.integers(1, 6)) if nrows is None else nrows
    nc = draw(st.integers(1, 6)) if ncols is None else ncols
    L, U = draw(st.integers(0, 2)), draw(st.integers(0, 2))
    lam, mu = draw(st.integers(0, 2)), draw(st.integers(0, 2))
    A = BBBMatrix(nr, nc, (L, U), (lam, mu))
    seed = draw(st.integers(0, 2 ** 31))
    rng = np.random.default_rng(seed)
    for i in range(nr):
        for j in A.block_range(i):
            blk = A.get_block(i, j, create=True)
            blk[:] = rng.standard_normal(blk.shape)
    return A


@given(st.data())
def test_compose_associative(data):
    n1, n2, n3, n4 = (data.draw(st.integers(1, 5)) for _ in range(4))
    A, B, C = data.draw(bbb(n1, n2)), data.draw(bbb(n2, n3)), data.draw(bbb(n3, n4))
    left = A.compose(B).compose(C).to_dense()
    right = A.compose(B.compose(C)).to_dense()
    assert np.allclose(left, right, atol=1e-10 * max(1.0, np.abs(left).max()))


@given(bbb())
def test_transpose_involution(A):
    assert np.array_equal(A.transpose().transpose().to_dense(), A.to_dense())
    assert np.array_equal(A.transpose().to_dense(), A.to_dense().T)


@given(bbb(), st.integers(0, 2 ** 31))
def test_matvec_matches_dense(A, seed):
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    assert np.allclose(A.matvec(v), A.to_dense() @ v, atol=1e-12)


@st.composite
def polynomial(draw, max_degree=6):
    terms = draw(st.lists(st.tuples(st.integers(0, max_degree), st.integers(0, max_degree), finite),
                          min_size=1, max_size=5))
    return [(p, min(q, max_degree - p), c) for p, q, c in terms]


def _poly(terms):
    return lambda x, y: sum(c * x ** p * y ** q for p, q, c in terms) + 0 * x


@given(st.sampled_from(list(DOMAINS)), polynomial())
def test_analyze_synthesize_exact_for_polynomials(name, terms):
    dom = DOMAINS[name]
    f = _poly(terms)
    c = analyze(f, dom, ops.ones(dom, 1), 6)
    x = np.linspace(dom.alpha + 0.05, dom.beta - 0.05, 7)
    y = 0.3 * dom.rho(x) + dom.gamma * 0.5 * dom.rho(x)
    scale = max(1.0, max(abs(t[2]) for t in terms))
    assert np.allclose(synthesize(c, x, y), f(x, y), atol=1e-12 * scale)


@given(st.sampled_from(list(DOMAINS)), polynomial(5))
def test_dx_of_polynomials(name, terms):
    dom = DOMAINS[name]
    zero = ops.ones(dom, 0)
    f = _poly(terms)
    fx = lambda x, y: sum(c * p * x ** max(p - 1, 0) * y ** q for p, q, c in terms if p) + 0 * x
    c = analyze(f, dom, zero, 5)
    D = ops.build_Dx(dom, zero, 5)
    tgt = ops.operator_params(dom, "Dx", zero)[1]
    x = np.linspace(dom.alpha + 0.05, dom.beta - 0.05, 7)
    y = 0.4 * dom.rho(x) + dom.gamma * 0.3 * dom.rho(x)
    scale = max(1.0, max(abs(t[2]) * max(t[0], 1) for t in terms))
    assert np.allclose(synthesize(D.matvec(c.data), x, y, dom, tgt), fx(x, y), atol=1e-11 * scale)


@given(finite, finite, st.integers(0, 3), st.sampled_from(["+", "-", "*"]))
def test_parser_matches_numpy(a, b, p, op):
    text = f"({a!r}) {op} x^{p} * exp(({b!r}) * y)"
    f = cli.parse_expression(text)
    x, y = np.array([0.3, 0.6]), np.array([-0.2, 0.4])
    rhs = x ** p * np.exp(b * y)
    expected = {"+": a + rhs, "-": a - rhs, "*": a * rhs}[op]
    assert np.allclose(f(x, y), expected, rtol=1e-14, atol=1e-14)


@given(st.sampled_from(list(DOMAINS)),
       st.lists(st.integers(0, 3), min_size=4, max_size=4),
       st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_weight_factorizes(name, exps, s, t):
    dom = DOMAINS[name]
    params = tuple(exps[:dom.arity])
    x = dom.alpha + s * (dom.beta - dom.alpha)
    r = dom.rho(x)
    tt = dom.gamma + t * (dom.delta - dom.gamma)
    ea, eb, er = x_exponents(dom, params)
    A, B = t_exponents(dom, params)
    fact = ((dom.beta - x) ** ea * (x - dom.alpha) ** eb * r ** er
            * (dom.delta - tt) ** A * (tt - dom.gamma) ** B)
    assert np.isclose(weight_2d(dom, params, x, r * tt), fact, rtol=1e-12, atol=0)


@given(st.floats(0.05, 0.6), st.floats(0.1, 0.35))
def test_disk_slice_rule_mass(alpha, width):
    dom = DomainSpec.disk_slice(alpha, alpha + width)
    from sliceops.transform import integrate
    m1 = integrate(lambda x, y: np.ones_like(x), dom, (0, 0, 0), 2)
    # area of the slice between two vertical lines
    F = lambda x: x * np.sqrt(1 - x * x) + np.arcsin(x)
    assert np.isclose(m1, F(alpha + width) - F(alpha), rtol=1e-13)


@given(st.integers(0, 30))
def test_total_size_roundtrip(N):
    from sliceops.bbbmatrix import degree_of_size
    assert degree_of_size(total_size(N)) == N
    assert total_size(N) == (N + 1) * (N + 2) // 2
