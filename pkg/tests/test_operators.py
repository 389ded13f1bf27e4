import numpy as np
import pytest

from sliceops import operators as ops
from sliceops import ops2d
from sliceops.bbbmatrix import total_size
from sliceops.domains import as_params, weight_2d
from sliceops.errors import DomainError
from sliceops.solve import v_coefficients

from conftest import interior_points
from quad_oracle import oracle_matrix


CASES = [(kind, dom) for kind in ops.OPERATOR_KINDS for dom in ("disk", "halfdisk", "trapezium")]


@pytest.mark.parametrize("kind,dname", CASES)
def test_operator_against_quadrature(kind, dname, request):
    from conftest import DOMAINS
    domain = DOMAINS[dname]
    src = ops.ones(domain, 1)
    N = 6
    A = ops.build_operator(domain, kind, src, N)
    N_out = A.nrows - 1
    ref = oracle_matrix(domain, kind, src, N, N_out)
    D = A.to_dense()
    assert D.shape == ref.shape
    assert np.abs(D - ref).max() < 1e-10 * np.abs(ref).max()
    # the natural output height loses nothing: the oracle has no rows beyond it
    if N_out + 1 <= 14:
        big = oracle_matrix(domain, kind, src, N, N_out + 1)
        assert np.abs(big[total_size(N_out):]).max() < 1e-10 * np.abs(ref).max()


@pytest.mark.parametrize("kind", ["Dx", "Dy", "T_abc"])
def test_operator_from_zero_params(domain, kind):
    src = ops.ones(domain, 0)
    A = ops.build_operator(domain, kind, src, 5)
    ref = oracle_matrix(domain, kind, src, 5, A.nrows - 1)
    assert np.abs(A.to_dense() - ref).max() < 1e-10 * np.abs(ref).max()


def test_disk_mixed_params():
    from conftest import DOMAINS
    domain = DOMAINS["disk"]
    for kind, src in (("Wx", (2, 1, 1)), ("Dy", (0, 1, 2)), ("TW_c", (1, 2, 1))):
        A = ops.build_operator(domain, kind, src, 5)
        ref = oracle_matrix(domain, kind, src, 5, A.nrows - 1)
        assert np.abs(A.to_dense() - ref).max() < 1e-10 * np.abs(ref).max()


def test_disk_bandwidth_table():
    from conftest import DOMAINS
    domain = DOMAINS["disk"]
    for kind, bands in ops.DISK_BANDWIDTHS.items():
        A = ops.build_operator(domain, kind, (1, 1, 1), 10)
        (L, U), (lam, mu) = A.measured_bandwidths(1e-12 * np.abs(A.to_dense()).max())
        (Lt, Ut), (lt, mt) = bands
        assert L <= Lt and U <= Ut and lam <= lt and mu <= mt


def test_invalid_parameters(domain):
    with pytest.raises(DomainError):
        ops.build_Wx(domain, ops.ones(domain, 0), 4)
    with pytest.raises(DomainError):
        ops.build_conversion(domain, "TW_abc", ops.ones(domain, 0), 4)
    with pytest.raises(ValueError):
        ops.build_conversion(domain, "Dx", ops.ones(domain, 0), 4)
    with pytest.raises(ValueError):
        ops.build_operator(domain, "Dz", ops.ones(domain, 0), 4)


# ----------------------------------------------------------------------------
# compositions vs a finite-difference Laplacian


def fd_laplacian(f, x, y, h=1e-4):
    return (f(x + h, y) + f(x - h, y) + f(x, y + h) + f(x, y - h) - 4 * f(x, y)) / (h * h)


def _eval(domain, params, weighted, c):
    p = as_params(domain, params, weighted=weighted)
    return lambda x, y: ops2d.clenshaw_eval(c, x, y, domain, p)


def _shrunk_points(domain, rng, n=30):
    x, y = interior_points(domain, n, rng)
    c = 0.5 * (domain.alpha + domain.beta)
    return c + 0.7 * (x - c), 0.7 * y


@pytest.mark.parametrize("which", ["W111", "W222_to_000", "000_to_222"])
def test_laplacians_vs_fd(domain, rng, which):
    N, pad = 5, 6
    src_val, w_in, tgt_val = {"W111": (1, True, 1), "W222_to_000": (2, True, 0),
                              "000_to_222": (0, False, 2)}[which]
    build = {"W111": ops.build_laplacian_W111, "W222_to_000": ops.build_laplacian_W222_to_000,
             "000_to_222": ops.build_laplacian_000_to_222}[which]
    c = np.zeros(total_size(N + pad))
    c[:total_size(N)] = rng.standard_normal(total_size(N))
    A = build(domain, N + pad)
    out = A.matvec(c)
    x, y = _shrunk_points(domain, rng)
    u = _eval(domain, ops.ones(domain, src_val), w_in, c)
    ref = fd_laplacian(u, x, y)
    got = ops2d.clenshaw_eval(out, x, y, domain, ops.ones(domain, tgt_val))
    assert np.abs(got - ref).max() < 1e-5 * np.abs(ref).max()


def test_biharmonic_is_product(domain):
    N = 6
    B = ops.build_biharmonic(domain, N).to_dense()
    inner = ops.build_laplacian_W222_to_000(domain, N, square=False)
    outer = ops.build_laplacian_000_to_222(domain, inner.nrows - 1, square=False)
    ref = (outer.to_dense() @ inner.to_dense())[:total_size(N), :total_size(N)]
    np.testing.assert_allclose(B, ref, atol=1e-9 * np.abs(ref).max())


def test_variable_coefficient(domain, rng):
    v = lambda x, y: 1 - (3 * (x - 1) ** 2 + 5 * y ** 2)
    vc = v_coefficients(domain, v, 4)
    N = 5
    V = ops.build_variable_coeff(domain, vc, N)
    c = rng.standard_normal(total_size(N))
    x, y = interior_points(domain, 30, rng)
    zero = ops.ones(domain, 0)
    u = ops2d.clenshaw_eval(c, x, y, domain, zero)
    got = ops2d.clenshaw_eval(V.matvec(c), x, y, domain, zero)
    np.testing.assert_allclose(got, v(x, y) * u, atol=1e-11 * np.abs(u).max())
    one = v_coefficients(domain, None, 3)
    I = ops.build_variable_coeff(domain, one, N).to_dense()[:total_size(N)]
    np.testing.assert_allclose(I, np.eye(total_size(N)), atol=1e-13)


def test_helmholtz_operator(domain, rng):
    v = lambda x, y: 1 - (3 * (x - 1) ** 2 + 5 * y ** 2)
    k = 3.0
    N, pad = 4, 8
    A = ops.build_helmholtz(domain, N + pad, k, v_coefficients(domain, v, 4))
    c = np.zeros(total_size(N + pad))
    c[:total_size(N)] = rng.standard_normal(total_size(N))
    x, y = _shrunk_points(domain, rng)
    u = _eval(domain, ops.ones(domain, 1), True, c)
    ref = fd_laplacian(u, x, y) + k * k * v(x, y) * u(x, y)
    got = ops2d.clenshaw_eval(A.matvec(c), x, y, domain, ops.ones(domain, 1))
    assert np.abs(got - ref).max() < 1e-5 * np.abs(ref).max()
