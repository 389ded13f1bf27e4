"""Dense operator oracle from an independent tensor Gauss-Legendre rule."""

import numpy as np
from numpy.polynomial.legendre import leggauss

from sliceops import operators as ops
from sliceops import ops2d
from sliceops.domains import as_params, weight_2d


def legendre_rule(domain, n=48):
    """Tensor Gauss-Legendre rule for dx dy over the domain.

    The half-disk edge x = 1 has a square-root Jacobian; x = 1 - u^2 removes it.
    """
    g, w = leggauss(n)
    if domain.kind == "EndDiskSlice":
        umax = np.sqrt(1 - domain.alpha)
        u = umax * (g + 1) / 2
        x, wx = 1 - u * u, w * umax / 2 * 2 * u
    else:
        x = domain.alpha + (domain.beta - domain.alpha) * (g + 1) / 2
        wx = w * (domain.beta - domain.alpha) / 2
    t = domain.gamma + (domain.delta - domain.gamma) * (g + 1) / 2
    wt = w * (domain.delta - domain.gamma) / 2
    r = domain.rho(x)
    X = np.repeat(x, n)
    Y = (r[:, None] * t[None, :]).ravel()
    Wq = (wx[:, None] * r[:, None] * wt[None, :]).ravel()
    return X, Y, Wq


def apply_kind(domain, kind, src, x, y, N):
    """op(H_j) (or op(W H_j)) for every source basis function, shape (size, P)."""
    weighted = kind.startswith("W") or kind.startswith("TW")
    p = as_params(domain, src, weighted=weighted)
    vals, gx, gy = ops2d.eval_basis_product(domain, p, x, y, N, with_grad=True)
    if kind in ("Dx", "Wx"):
        return gx
    if kind in ("Dy", "Wy"):
        return gy
    return vals


def oracle_matrix(domain, kind, src, N, N_out):
    _, tgt, _, w_out = ops.operator_params(domain, kind, src)
    x, y, w = legendre_rule(domain)
    F = apply_kind(domain, kind, src, x, y, N)
    Ht = ops2d.eval_basis_product(domain, tgt, x, y, N_out)
    Wt = weight_2d(domain, tgt, x, y)
    norms = (Ht * Wt * w) @ Ht.T
    norms = np.diag(norms)
    # weighted targets: op(u) = W_t sum c H, so <op(u), H> (unit weight) = c ||H||^2_W
    test = Ht * w if w_out else Ht * Wt * w
    return (test @ F.T) / norms[:, None]
