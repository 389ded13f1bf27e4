"""Bivariate orthogonal polynomials on the supported domains.

The basis is

    H_{n,k}(x, y) = R^{(k)}_{n-k}(x) rho(x)^k P_k(y / rho(x)),   0 <= k <= n,

where R^{(k)} is orthonormal for the level-k x-weight
(beta - x)^ea (x - alpha)^eb rho(x)^(er + 2k + 1) and P_k for the t-weight
(delta - t)^A (t - gamma)^B.  Coefficients are ordered degree-major with k
ascending inside each degree block.

Operator entries are inner products of separable terms
c(x) (beta-x)^ea (x-alpha)^eb R(x) rho(x)^p  e(t) (delta-t)^A (t-gamma)^B P(t);
:func:`project_terms` evaluates them with 1D Gauss rules, which is how the
Jacobi matrices here and the differential operators in
:mod:`sliceops.operators` are assembled.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import settings
from .bbbmatrix import BBBMatrix, BlockCoeffVector, block_offsets, total_size
from .domains import (DISK_SLICE, END_DISK_SLICE, TRAPEZIUM, as_params, check_points,
                      drho_split, rho_squared, t_exponents, weight_2d, x_exponents,
                      _rho_unchecked)
from .errors import DomainError, NumericalFailure, TableError
from .ops1d import (WeightSpec, bootstrap_recurrence, eval_all, eval_all_with_derivative,
                    gauss_rule, jacobi_table, lift_both)

# ----------------------------------------------------------------------------
# recurrence families


def x_weight(domain, params, level):
    """WeightSpec of the level-``level`` x-weight of the basis."""
    ea, eb, er = x_exponents(domain, params)
    e = er + 2 * level + 1
    if domain.kind == TRAPEZIUM:
        return WeightSpec(0.0, 1.0, ea, eb, e, 0.0, domain.xi)
    return WeightSpec(domain.alpha, domain.beta, ea, eb, e / 2, e / 2)


def t_table(domain, params, length):
    A, B = t_exponents(domain, params)
    return jacobi_table(A, B, length - 1, domain.gamma, domain.delta)


class OPFamily:
    """Recurrence tables for every level k of one parameter tuple.

    Parameters
    ----------
    domain : DomainSpec
    params : ParamSet or tuple
    nlevels : int
        Number of levels k = 0..nlevels-1.
    length : int
        Coefficients held per level table.
    tables : list of RecurrenceTable, optional
        Precomputed level tables (e.g. from the cache); skips construction.
    """

    def __init__(self, domain, params, nlevels, length, tables=None):
        self.domain = domain
        self.params = as_params(domain, params, weighted=False)
        self.nlevels = int(nlevels)
        self.length = int(length)
        if tables is None:
            tables = build_level_tables(domain, self.params, self.nlevels, self.length)
        if len(tables) < self.nlevels or any(t.alpha.size < self.length for t in tables):
            raise TableError("supplied level tables are too short")
        self.x_tables = [t.truncated(self.length) for t in tables[:self.nlevels]]
        self.t = t_table(domain, self.params, self.nlevels + self.length + 4)
        self.x_omega = np.array([t.omega for t in self.x_tables])
        self._rules = {}
        self._lock = threading.Lock()

    def covers(self, nlevels, length):
        return self.nlevels >= nlevels and self.length >= length

    def norms(self, N):
        """||H_{n,k}||^2 for n <= N as a flat coefficient-length array."""
        if N + 1 > self.nlevels:
            raise TableError(f"family has {self.nlevels} levels, degree {N} requested")
        out = np.empty(total_size(N))
        off = block_offsets(N + 1)
        for n in range(N + 1):
            out[off[n]:off[n + 1]] = self.x_omega[:n + 1] * self.t.omega
        return out

    def x_rule(self, level, M):
        key = ("x", level, M)
        with self._lock:
            if key not in self._rules:
                if level >= self.nlevels:
                    raise TableError(f"level {level} beyond {self.nlevels} levels")
                self._rules[key] = gauss_rule(self.x_tables[level], M)
            return self._rules[key]

    def t_rule(self, M):
        key = ("t", M)
        with self._lock:
            if key not in self._rules:
                self._rules[key] = gauss_rule(self.t, M)
            return self._rules[key]

    def clear_rules(self):
        """Drop cached Gauss rules (the recurrence tables are kept)."""
        with self._lock:
            self._rules.clear()


def build_level_tables(domain, params, nlevels, length):
    """Level tables 0..nlevels-1, each with ``length`` coefficients.

    Circular domains bootstrap the half-integer base weight once and reach
    level k by k rounds of lift(+1), lift(-1); the trapezium bootstraps each
    level directly.
    """
    if domain.kind == TRAPEZIUM:
        return [bootstrap_recurrence(x_weight(domain, params, k), length - 1)
                for k in range(nlevels)]
    base_len = length + 2 * (nlevels - 1) + 2
    table = bootstrap_recurrence(x_weight(domain, params, 0), base_len - 1)
    out = [table.truncated(length)]
    for _ in range(1, nlevels):
        table = lift_both(table)
        out.append(table.truncated(length))
    return out


_FAMILIES = {}
_FAMILY_LOCK = threading.Lock()

# optional hook used by the CLI cache: callable(domain, params, nlevels, length) -> tables or None
table_provider = None


def get_family(domain, params, nlevels, length):
    """Shared OPFamily covering at least ``nlevels`` levels of ``length``."""
    params = as_params(domain, params, weighted=False)
    key = (domain, params.values)
    with _FAMILY_LOCK:
        fam = _FAMILIES.get(key)
        if fam is not None and fam.covers(nlevels, length):
            return fam
        if fam is not None:
            nlevels = max(nlevels, int(1.25 * fam.nlevels))
            length = max(length, int(1.25 * fam.length))
        tables = None
        if table_provider is not None:
            tables = table_provider(domain, params, nlevels, length)
        fam = OPFamily(domain, params, nlevels, length, tables)
        _FAMILIES[key] = fam
        return fam


def family_for_degree(domain, params, N, extra=0):
    """Family large enough for degree-N bases and operator assembly."""
    return get_family(domain, params, N + 3, N + 12 + extra)


def clear_family_cache(rules_only=False):
    """Forget cached families, or only their Gauss rules."""
    with _FAMILY_LOCK:
        if rules_only:
            for fam in _FAMILIES.values():
                fam.clear_rules()
        else:
            _FAMILIES.clear()


def basis_tag(domain, params, weighted=None):
    """Hashable basis identifier; W^{0} and H^{0} are the same basis."""
    p = as_params(domain, params, weighted)
    if p.weighted and not any(p.values):
        p = p.as_weighted(False)
    return (domain, p)


def norms_2d(domain, params, N):
    """Norm table ||H_{n,k}||^2_W, n <= N."""
    return family_for_degree(domain, params, N).norms(N)


# ----------------------------------------------------------------------------
# direct evaluation from the product formula


def _rho_t_all(domain, table, K, x, y, with_grad=False):
    """q_k = rho^k P_k(y / rho) for k <= K via a recurrence free of 1/rho."""
    a, b = table.alpha, table.beta
    r = _rho_unchecked(domain, x)
    r2 = rho_squared(domain, x)
    q = np.empty((K + 1,) + np.shape(x))
    q[0] = 1.0
    if with_grad:
        qx = np.zeros_like(q)
        qy = np.zeros_like(q)
        if domain.circular:
            dr2 = -2.0 * x
            dr = None
        else:
            dr = -domain.xi * np.ones_like(x)
            dr2 = 2.0 * r * dr
    for k in range(K):
        nxt = y * q[k]
        if a[k] != 0.0:
            nxt = nxt - a[k] * r * q[k]
        if k:
            nxt = nxt - b[k - 1] * r2 * q[k - 1]
        q[k + 1] = nxt / b[k]
        if with_grad:
            gy = q[k] + y * qy[k]
            gx = y * qx[k]
            if a[k] != 0.0:
                # only reachable for the trapezium, where rho is smooth
                gy = gy - a[k] * r * qy[k]
                gx = gx - a[k] * (dr * q[k] + r * qx[k])
            if k:
                gy = gy - b[k - 1] * r2 * qy[k - 1]
                gx = gx - b[k - 1] * (dr2 * q[k - 1] + r2 * qx[k - 1])
            qy[k + 1] = gy / b[k]
            qx[k + 1] = gx / b[k]
    if with_grad:
        return q, qx, qy
    return q


def eval_basis_direct(domain, params, n, k, x, y):
    """H_{n,k}(x, y) (times W if ``params`` is weighted) from the product formula.

    At rho(x) = 0 the factor rho^k P_k(y / rho) is evaluated through its
    homogeneous recurrence, which is the polynomial limit.

    Raises
    ------
    DomainError
        For points outside the closed domain.
    """
    params = as_params(domain, params)
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    xa, ya = check_points(domain, x, y)
    fam = family_for_degree(domain, params, n)
    q = _rho_t_all(domain, fam.t, k, xa, ya)[k]
    val = eval_all(fam.x_tables[k], n - k, xa)[n - k] * q
    if params.weighted:
        val = val * weight_2d(domain, params, xa, ya)
    return float(val) if np.ndim(val) == 0 else val


def eval_basis_product(domain, params, x, y, N, with_grad=False):
    """All H_{n,k}, n <= N, from the product formula (optionally with gradients).

    Returns arrays of shape (total_size(N), P); used as an oracle for the
    recurrence-based evaluator and for weak-form quadrature.
    """
    params = as_params(domain, params)
    xa, ya = check_points(domain, x, y)
    xa, ya = np.atleast_1d(xa), np.atleast_1d(ya)
    fam = family_for_degree(domain, params, N)
    size = total_size(N)
    off = block_offsets(N + 1)
    vals = np.empty((size, xa.size))
    if with_grad:
        gx = np.empty_like(vals)
        gy = np.empty_like(vals)
        q, qx, qy = _rho_t_all(domain, fam.t, N, xa, ya, with_grad=True)
    else:
        q = _rho_t_all(domain, fam.t, N, xa, ya)
    for k in range(N + 1):
        if with_grad:
            R, dR = eval_all_with_derivative(fam.x_tables[k], N - k, xa)
        else:
            R = eval_all(fam.x_tables[k], N - k, xa)
        idx = off[k:N + 1] + k  # positions of H_{n,k}, n = k..N
        vals[idx] = R * q[k]
        if with_grad:
            gx[idx] = dR * q[k] + R * qx[k]
            gy[idx] = R * qy[k]
    if params.weighted:
        W = weight_2d(domain, params, xa, ya)
        if with_grad:
            Wx, Wy = weight_gradient(domain, params, xa, ya)
            gx = gx * W + vals * Wx
            gy = gy * W + vals * Wy
        vals = vals * W
    if with_grad:
        return vals, gx, gy
    return vals


def weight_gradient(domain, params, x, y):
    """(dW/dx, dW/dy) of the bivariate weight, for integer or real exponents."""
    v = as_params(domain, params).values
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if domain.kind == TRAPEZIUM:
        a, b, c, d = v
        f = [(1 - x, a, -1.0, 0.0), (x, b, 1.0, 0.0), (y, c, 0.0, 1.0),
             (1 - domain.xi * x - y, d, -domain.xi, -1.0)]
    else:
        if domain.kind == DISK_SLICE:
            a, b, c = v
            f = [(domain.beta - x, a, -1.0, 0.0), (x - domain.alpha, b, 1.0, 0.0)]
        else:
            b, c = v
            f = [(x - domain.alpha, b, 1.0, 0.0)]
        f.append((1 - x * x - y * y, c, None, None))
    W = np.ones(np.broadcast(x, y).shape)
    parts = []
    for base, e, _, _ in f:
        base = np.maximum(base, 0.0)
        parts.append(base ** e if e else np.ones_like(W))
        W = W * parts[-1]
    gx = np.zeros_like(W)
    gy = np.zeros_like(W)
    for i, (base, e, dxf, dyf) in enumerate(f):
        if not e:
            continue
        others = np.ones_like(W)
        for j, p in enumerate(parts):
            if j != i:
                others = others * p
        dbase = e * np.maximum(base, 0.0) ** (e - 1)
        if dxf is None:
            gx = gx + others * dbase * (-2 * x)
            gy = gy + others * dbase * (-2 * y)
        else:
            gx = gx + others * dbase * dxf
            gy = gy + others * dbase * dyf
    return gx, gy


# ----------------------------------------------------------------------------
# separable terms and their projection


@dataclass(frozen=True)
class Term:
    """coef * cx(x) (beta-x)^ea (x-alpha)^eb R^{(d_x)}(x) rho^p * ct(t) (delta-t)^A (t-gamma)^B P^{(d_t)}(t).

    ``cx`` and ``ct`` are ascending power-basis coefficients; ``dx``/``dt``
    select the polynomial itself (0) or its derivative (1).
    """

    coef: float
    cx: tuple
    ea: float
    eb: float
    dx: int
    p: float
    ct: tuple
    A: float
    B: float
    dt: int

    def replace(self, **kw):
        d = self.__dict__.copy()
        d.update(kw)
        return Term(**d)


def base_terms(domain, params, weighted):
    """Separable form of H_{.,k} (or W H_{.,k}) with rho power offset zero."""
    if weighted:
        ea, eb, er = x_exponents(domain, params)
        A, B = t_exponents(domain, params)
    else:
        ea = eb = er = A = B = 0.0
    return [Term(1.0, (1.0,), ea, eb, 0, er, (1.0,), A, B, 0)]


def _polymul(p, q):
    return tuple(npoly.polymul(p, q))


def terms_dx(domain, terms):
    """Partial x-derivative of base terms (rho power of H_{.,k} enters as p + k)."""
    g, s = drho_split(domain)
    out = []
    for t in terms:
        if t.dx or t.dt or len(t.cx) > 1 or len(t.ct) > 1:
            raise ValueError("only undifferentiated constant-coefficient terms can be differentiated")
        c = t.coef * t.cx[0] * t.ct[0]
        one = (1.0,)
        if t.ea:
            out.append(Term(-c * t.ea, one, t.ea - 1, t.eb, 0, t.p, one, t.A, t.B, 0))
        if t.eb:
            out.append(Term(c * t.eb, one, t.ea, t.eb - 1, 0, t.p, one, t.A, t.B, 0))
        out.append(Term(c, one, t.ea, t.eb, 1, t.p, one, t.A, t.B, 0))
        # rho'(x) rho^(q-1) [q T - t T'], q = t.p + k handled by the "k" flag below
        tt = (0.0, 1.0)
        p2 = t.p - 1 + s
        out.append(_KTerm(c, g, t.ea, t.eb, 0, p2, one, t.A, t.B, 0, q_offset=t.p))
        out.append(Term(-c, g, t.ea, t.eb, 0, p2, tt, t.A, t.B, 1))
        if t.A:
            out.append(Term(c * t.A, g, t.ea, t.eb, 0, p2, tt, t.A - 1, t.B, 0))
        if t.B:
            out.append(Term(-c * t.B, g, t.ea, t.eb, 0, p2, tt, t.A, t.B - 1, 0))
    return out


@dataclass(frozen=True)
class _KTerm(Term):
    """A term whose coefficient carries the total rho power q = q_offset + k."""

    q_offset: float = 0.0

    def replace(self, **kw):
        d = self.__dict__.copy()
        d.update(kw)
        return _KTerm(**d)


def terms_dy(domain, terms):
    """Partial y-derivative: X rho^(q-1) T'(t)."""
    out = []
    for t in terms:
        if t.dx or t.dt or len(t.cx) > 1 or len(t.ct) > 1:
            raise ValueError("only undifferentiated constant-coefficient terms can be differentiated")
        c = t.coef * t.cx[0] * t.ct[0]
        one = (1.0,)
        if t.A:
            out.append(Term(-c * t.A, one, t.ea, t.eb, 0, t.p - 1, one, t.A - 1, t.B, 0))
        if t.B:
            out.append(Term(c * t.B, one, t.ea, t.eb, 0, t.p - 1, one, t.A, t.B - 1, 0))
        out.append(Term(c, one, t.ea, t.eb, 0, t.p - 1, one, t.A, t.B, 1))
    return out


def terms_mul_x(terms):
    return [t.replace(cx=_polymul(t.cx, (0.0, 1.0))) for t in terms]


def terms_mul_y(terms):
    return [t.replace(p=t.p + 1, ct=_polymul(t.ct, (0.0, 1.0))) for t in terms]


def terms_mul_xpoly(terms, coeffs):
    return [t.replace(cx=_polymul(t.cx, coeffs)) for t in terms]


def terms_divide_weight(domain, terms, params):
    """Divide by the target weight W^{params} (symbolically in the exponents)."""
    ea, eb, er = x_exponents(domain, params)
    A, B = t_exponents(domain, params)
    out = []
    for t in terms:
        new = t.replace(ea=t.ea - ea, eb=t.eb - eb, p=t.p - er, A=t.A - A, B=t.B - B)
        if min(new.ea, new.eb, new.A, new.B) < 0:
            if new.coef == 0:
                continue
            raise DomainError("target weight does not divide the source function")
        out.append(new)
    return out


def _xfactor(x, lo, hi, ea, eb):
    f = np.ones_like(x)
    if ea:
        f = f * (hi - x) ** ea
    if eb:
        f = f * (x - lo) ** eb
    return f


def _deg(c):
    return len(c) - 1


def project_terms(src, tgt, domain, terms, N_in, N_out, bandwidths, subbandwidths,
                  domain_tag=None, range_tag=None, chunk=32):
    """Assemble the BBB matrix of a separable operator by 1D quadrature.

    Entry ((m, j), (n, k)) is the coefficient of the target H_{m,j} in the
    source function sum(terms) evaluated for source index (n, k), where the
    rho power of each term is ``p + k``.  Only entries inside the given
    bandwidths are computed.  Work is batched over source levels k sharing
    the sub-block offset k - j, so the cost is O(N^3) arithmetic.

    Parameters
    ----------
    src, tgt : OPFamily
        Source and target recurrence families.
    terms : list of Term
    N_in, N_out : int
        Source and target maximal degrees.
    """
    L, U = bandwidths
    lam, mu = subbandwidths
    guard = settings.TOL.quad_guard
    circular = domain.circular
    lo, hi = domain.alpha, domain.beta
    tlo, thi = domain.gamma, domain.delta
    if N_out + 1 > tgt.nlevels or N_in + 1 > src.nlevels:
        raise TableError("recurrence families have too few levels")

    # t inner products: one rule exact for every (k, j) pair
    max_ct = max(_deg(t.ct) for t in terms)
    max_te = max(t.A + t.B for t in terms)
    Mt = int(np.ceil((2 * (N_in + lam + 2) + max_ct + max_te + 1) / 2)) + guard
    if Mt > tgt.t.N:
        raise TableError("target t-table too short")
    trule = tgt.t_rule(Mt)
    tn, tw = trule.nodes, trule.weights / tgt.t.omega
    Pt = eval_all(tgt.t, N_out + 1, tn)
    Ps, dPs = eval_all_with_derivative(src.t, N_in + 1, tn)
    tvals = [npoly.polyval(tn, t.ct) * _xfactor(tn, tlo, thi, t.A, t.B) for t in terms]

    # x inner products: one rule size for every target level
    max_cx = max(_deg(t.cx) for t in terms)
    max_xe = max(t.ea + t.eb for t in terms)
    max_e = max(t.p for t in terms) + mu
    M = int(np.ceil((N_in + N_out + max_cx + max_xe + max_e + 1) / 2)) + guard
    if M > min(tb.N for tb in tgt.x_tables[:N_out + 1]):
        raise TableError(f"target tables too short for a {M}-point rule")
    need_dx = any(t.dx for t in terms)

    rows, cols, subr, subc, vals = [], [], [], [], []
    for o in range(-lam, mu + 1):
        ks_all = np.arange(max(0, o), min(N_in, N_out + o) + 1)
        for c0 in range(0, ks_all.size, chunk):
            ks = ks_all[c0:c0 + chunk]
            js = ks - o
            # t-factors per x-signature, summed so cancelling pieces are tested together
            groups = {}
            for t, tv in zip(terms, tvals):
                coef = t.coef * ((t.q_offset + ks) if isinstance(t, _KTerm) else np.ones(ks.size))
                P = dPs[ks] if t.dt else Ps[ks]
                g = tv[None, :] * P
                tau = coef * np.einsum("q,cq,cq->c", tw, g, Pt[js])
                scale = np.abs(coef) * np.sqrt(np.einsum("q,cq->c", tw, g * g))
                key = (t.cx, t.ea, t.eb, t.dx, t.p)
                acc = groups.setdefault(key, [np.zeros(ks.size), np.zeros(ks.size)])
                acc[0] += tau
                acc[1] += scale
            contrib = []
            for (cxk, ea, eb, dxk, p), (tau, scale) in groups.items():
                live = np.abs(tau) > 1e-13 * scale
                if not live.any():
                    continue
                e = p + o
                if e < 0 or e != int(e) or (circular and int(e) % 2):
                    raise NumericalFailure("non-polynomial projection", offset=o,
                                           tau=float(np.abs(tau[live]).max()))
                contrib.append((np.where(live, tau, 0.0), cxk, ea, eb, dxk, int(e)))
            if not contrib:
                continue
            rules = [tgt.x_rule(int(j), M) for j in js]
            X = np.stack([r.nodes for r in rules])                       # (C, M)
            Wq = np.stack([r.weights for r in rules]) / tgt.x_omega[js][:, None]
            nl_max = N_in - int(ks[0])
            R, dR = _eval_stacked([src.x_tables[k] for k in ks], nl_max, X, need_dx)
            Rt, _ = _eval_stacked([tgt.x_tables[j] for j in js], N_out - int(js[0]), X, False)
            Rt *= Wq[:, None, :]
            r2 = rho_squared(domain, X)
            V = np.zeros_like(R)
            for tau, cxk, ea, eb, dxk, e in contrib:
                w = tau[:, None] * npoly.polyval(X, cxk) * _xfactor(X, lo, hi, ea, eb)
                if e:
                    w = w * (r2 ** (e // 2) if circular else (1 - domain.xi * X) ** e)
                V += w[:, None, :] * (dR if dxk else R)
            nlk = N_in - ks                  # valid source x-indices l <= nlk
            nit = N_out - js                 # valid target x-indices i <= nit
            for eb_ in range(-L, U + 1):
                d = o - eb_                  # i - l
                l0 = max(0, -d)
                l1 = min(nl_max, Rt.shape[1] - 1 - d)
                if l1 < l0:
                    continue
                v = np.einsum("clq,clq->cl", Rt[:, l0 + d:l1 + d + 1], V[:, l0:l1 + 1])
                ls = np.arange(l0, l1 + 1)
                ok = (ls[None, :] <= nlk[:, None]) & (ls[None, :] + d <= nit[:, None])
                if not ok.any():
                    continue
                cc, li = np.nonzero(ok)
                ll = ls[li]
                rows.append(ll + d + js[cc])
                cols.append(ll + ks[cc])
                subr.append(js[cc])
                subc.append(ks[cc])
                vals.append(v[cc, li])
    return from_triplets(N_out + 1, N_in + 1, bandwidths, subbandwidths,
                         rows, cols, subr, subc, vals, domain_tag, range_tag)


def _eval_stacked(tables, n, X, with_derivative):
    """Orthonormal polynomials 0..n of several tables, row c at nodes X[c].

    Returns arrays of shape (C, n + 1, M); rows beyond a table's length are
    padded by continuing its recurrence with the available coefficients.
    """
    C, Mq = X.shape
    A = np.zeros((C, n + 1))
    B = np.ones((C, n + 1))
    for c, tb in enumerate(tables):
        m = min(n + 1, tb.alpha.size)
        A[c, :m] = tb.alpha[:m]
        B[c, :m] = tb.beta[:m]
    P = np.empty((C, n + 1, Mq))
    P[:, 0] = 1.0
    dP = None
    if with_derivative:
        dP = np.empty_like(P)
        dP[:, 0] = 0.0
    for l in range(n):
        a = A[:, l, None]
        b = B[:, l, None]
        nxt = (X - a) * P[:, l]
        if l:
            nxt -= B[:, l - 1, None] * P[:, l - 1]
        P[:, l + 1] = nxt / b
        if with_derivative:
            dn = P[:, l] + (X - a) * dP[:, l]
            if l:
                dn -= B[:, l - 1, None] * dP[:, l - 1]
            dP[:, l + 1] = dn / b
    return P, dP


def from_triplets(nrows, ncols, bandwidths, subbandwidths, rows, cols, subr, subc, vals,
                  domain_tag=None, range_tag=None):
    """BBBMatrix from lists of (block_i, block_j, sub_i, sub_j, value) arrays."""
    if not rows:
        return BBBMatrix(nrows, ncols, bandwidths, subbandwidths,
                         domain_tag=domain_tag, range_tag=range_tag)
    return BBBMatrix.from_triplets(nrows, ncols, bandwidths, subbandwidths,
                                   np.concatenate(rows), np.concatenate(cols),
                                   np.concatenate(subr), np.concatenate(subc),
                                   np.concatenate(vals), domain_tag, range_tag)


# ----------------------------------------------------------------------------
# Jacobi matrices and the block recurrence


def multiplication_matrices(domain, params, N):
    """Coefficient matrices of multiplication by x and y (degree N -> N + 1).

    These are the transposes of the Jacobi matrices J_x, J_y.
    """
    params = as_params(domain, params, weighted=False)
    fam = family_for_degree(domain, params, N + 1)
    base = base_terms(domain, params, False)
    tag = basis_tag(domain, params, False)
    sub_y = (1, 1)
    Mx = project_terms(fam, fam, domain, terms_mul_x(base), N, N + 1, (1, 1), (0, 0), tag, tag)
    My = project_terms(fam, fam, domain, terms_mul_y(base), N, N + 1, (1, 1), sub_y, tag, tag)
    return Mx, My


def jacobi_matrices(domain, params, N):
    """Block-tridiagonal Jacobi matrices with J_x H = x H, J_y H = y H.

    Returns matrices with N + 1 row blocks and N + 2 column blocks, so that
    (J H_{0..N+1})_n = x H_n for n <= N.
    """
    Mx, My = multiplication_matrices(domain, params, N)
    return Mx.transpose(), My.transpose()


class BasisEvaluator:
    """Evaluates basis values and expansions by the block three-term recurrence."""

    def __init__(self, domain, params, N):
        self.domain = domain
        self.params = as_params(domain, params)
        self.N = int(N)
        jx, jy = jacobi_matrices(domain, self.params, self.N)
        self.jx, self.jy = jx, jy
        self.ax, self.bx, self.cx = [], [], []
        self.ay, self.by, self.cy = [], [], []
        for n in range(self.N + 1):
            self.ax.append(_diag(jx, n, n + 1))
            self.bx.append(_diag(jx, n, n))
            self.cx.append(_diag(jx, n, n - 1) if n else np.zeros(0))
            self.ay.append(_band(jy, n, n + 1))
            self.by.append(_band(jy, n, n))
            self.cy.append(_band(jy, n, n - 1) if n else np.zeros((3, 1)))
        for n in range(self.N + 1):
            if np.any(self.ax[n] == 0) or self.ay[n][2, n] == 0:
                raise NumericalFailure("rank-deficient A_n in block recurrence", n=n)

    # band helpers store offsets -1, 0, +1 as rows 0, 1, 2

    def evaluate(self, x, y, upto=None):
        """All H_{n,k}(x, y), n <= upto, as an array (total_size, P)."""
        N = self.N if upto is None else upto
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.empty((total_size(N), x.size))
        off = block_offsets(N + 1)
        out[0] = 1.0
        prev = np.zeros((0, x.size))
        cur = out[0:1]
        for n in range(N):
            rx = x * cur - self.bx[n][:, None] * cur
            ry = y * cur - _band_apply(self.by[n], cur)
            if n:
                rx[:n] -= self.cx[n][:n, None] * prev
                ry -= _band_apply(self.cy[n], prev)
            nxt = out[off[n + 1]:off[n + 2]]
            nxt[:n + 1] = rx / self.ax[n][:, None]
            ay = self.ay[n]
            last = ry[n] - ay[1, n] * nxt[n]
            if n:
                last = last - ay[0, n] * nxt[n - 1]
            nxt[n + 1] = last / ay[2, n]
            prev, cur = cur, nxt
        return out

    def clenshaw(self, coeffs, x, y):
        """sum_{n,k} c_{n,k} H_{n,k}(x, y) by the backward block recurrence."""
        c = coeffs.data if isinstance(coeffs, BlockCoeffVector) else np.asarray(coeffs, float)
        N = degree_of(c.size)
        if N > self.N:
            raise TableError("evaluator built for a lower degree")
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        off = block_offsets(N + 1)
        P = x.size
        b_next = None   # b_{n+1}
        ahead = None    # D_{n+1} b_{n+2}
        for n in range(N, -1, -1):
            bn = np.repeat(c[off[n]:off[n + 1], None], P, axis=1)
            if b_next is not None:
                zx, zy = self._D_apply(n, b_next)
                # M_n^T b_{n+1} = (G_n - B_n)^T D_n b_{n+1}
                bn += (x - self.bx[n][:, None]) * zx
                ey = _unit_row(zy, n, P)
                bn += y * ey - _band_apply_T(self.by[n], ey, n + 1)
                if ahead is not None:
                    # K_{n+1}^T b_{n+2} = -C_{n+1}^T D_{n+1} b_{n+2}
                    wx, wy = ahead
                    bn -= self.cx[n + 1][:n + 1, None] * wx[:n + 1]
                    bn -= _band_apply_T(self.cy[n + 1], _unit_row(wy, n + 1, P), n + 1)
                ahead = (zx, zy)
            b_next = bn
        return b_next[0]

    def _D_apply(self, n, z):
        """D_n z for z of length n + 2: x-part (n+1, P) and the single y-entry n."""
        ay = self.ay[n]
        zy = z[n + 1] / ay[2, n]
        zx = z[:n + 1].copy()
        zx[n] -= ay[1, n] * zy
        if n:
            zx[n - 1] -= ay[0, n] * zy
        zx /= self.ax[n][:, None]
        return zx, zy


def degree_of(size):
    N = int(round((np.sqrt(8 * size + 1) - 3) / 2))
    if total_size(N) != size:
        raise ValueError(f"{size} is not a triangular coefficient count")
    return N


def _unit_row(vals, n, P):
    out = np.zeros((n + 1, P))
    out[n] = vals
    return out


def _diag(J, i, j):
    """Diagonal (offset 0) of block (i, j) of a matrix with zero sub-bandwidths."""
    data = J.get_block(i, j)
    if data is None:
        return np.zeros(i + 1)
    return data[J.lam].copy()


def _band(J, i, j):
    """Offsets -1, 0, +1 of block (i, j) as a (3, i + 1) array."""
    out = np.zeros((3, i + 1))
    data = J.get_block(i, j)
    if data is None:
        return out
    for o in (-1, 0, 1):
        if -J.lam <= o <= J.mu:
            out[o + 1] = data[o + J.lam]
    mask = J._valid_mask(i, j)
    full = np.zeros((3, i + 1), dtype=bool)
    for o in (-1, 0, 1):
        if -J.lam <= o <= J.mu:
            full[o + 1] = mask[o + J.lam]
    return out * full


def _band_apply(band, v):
    """out[k] = sum_o band[o+1, k] v[k+o] for a rows x (len v) block."""
    rows = band.shape[1]
    ncols = v.shape[0]
    out = np.zeros((rows,) + v.shape[1:])
    for o in (-1, 0, 1):
        r0, r1 = max(0, -o), min(rows, ncols - o)
        if r1 > r0:
            out[r0:r1] += band[o + 1, r0:r1, None] * v[r0 + o:r1 + o]
    return out


def _band_apply_T(band, z, ncols):
    """Transpose of :func:`_band_apply` mapping length rows -> ncols."""
    rows = band.shape[1]
    out = np.zeros((ncols,) + z.shape[1:])
    for o in (-1, 0, 1):
        r0, r1 = max(0, -o), min(rows, ncols - o)
        if r1 > r0:
            out[r0 + o:r1 + o] += band[o + 1, r0:r1, None] * z[r0:r1]
    return out


_EVALUATORS = {}
_EVAL_LOCK = threading.Lock()


def get_evaluator(domain, params, N):
    params = as_params(domain, params, weighted=False)
    key = (domain, params.values)
    with _EVAL_LOCK:
        ev = _EVALUATORS.get(key)
        if ev is None or ev.N < N:
            ev = BasisEvaluator(domain, params, N)
            _EVALUATORS[key] = ev
        return ev


def eval_basis_all(domain, params, x, y, N):
    """All H_{n,k}(x, y), n <= N, via the block recurrence.

    Returns a BlockCoeffVector for a scalar point, else an array of shape
    (total_size(N), P).
    """
    params = as_params(domain, params)
    scalar = np.ndim(x) == 0 and np.ndim(y) == 0
    xa, ya = check_points(domain, x, y)
    xa, ya = np.atleast_1d(xa).ravel(), np.atleast_1d(ya).ravel()
    vals = get_evaluator(domain, params, N).evaluate(xa, ya, N)
    if params.weighted:
        vals = vals * weight_2d(domain, params, xa, ya)
    if scalar:
        return BlockCoeffVector(vals[:, 0], basis_tag(domain, params))
    return vals


def left_inverse_Dn(domain, params, n):
    """Structured left inverse D_n^T of A_n = [A_{n,x}; A_{n,y}] and A_n itself.

    Returns
    -------
    (Dt, A) : dense arrays of shapes (n+2, 2(n+1)) and (2(n+1), n+2)
    """
    ev = get_evaluator(domain, params, n)
    A = np.zeros((2 * (n + 1), n + 2))
    A[np.arange(n + 1), np.arange(n + 1)] = ev.ax[n]
    ay = ev.ay[n]
    for k in range(n + 1):
        for o in (-1, 0, 1):
            if 0 <= k + o <= n + 1:
                A[n + 1 + k, k + o] = ay[o + 1, k]
    Dt = np.zeros((n + 2, 2 * (n + 1)))
    Dt[np.arange(n + 1), np.arange(n + 1)] = 1.0 / ev.ax[n]
    top = ay[2, n]
    Dt[n + 1, n + 1 + n] = 1.0 / top
    for k in range(n + 1):
        Dt[n + 1, k] = -A[n + 1 + n, k] / (ev.ax[n][k] * top)
    resid = np.abs(Dt @ A - np.eye(n + 2)).max()
    if resid > settings.TOL.left_inverse * max(1.0, np.abs(Dt).max() * np.abs(A).max()):
        raise NumericalFailure("left inverse check failed", n=n, residual=resid)
    return Dt, A


def clenshaw_eval(coeffs, x, y, domain=None, params=None):
    """Evaluate sum c_{n,k} H_{n,k}(x, y); multiplies by W for weighted tags."""
    if isinstance(coeffs, BlockCoeffVector) and coeffs.tag is not None:
        domain, params = coeffs.tag
    if domain is None or params is None:
        raise ValueError("coefficients need a basis tag or explicit domain/params")
    params = as_params(domain, params)
    data = coeffs.data if isinstance(coeffs, BlockCoeffVector) else np.asarray(coeffs, float)
    N = degree_of(data.size)
    scalar = np.ndim(x) == 0 and np.ndim(y) == 0
    shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
    xa, ya = check_points(domain, x, y)
    xa, ya = xa.ravel(), ya.ravel()
    vals = get_evaluator(domain, params, N).clenshaw(data, xa, ya)
    if params.weighted:
        vals = vals * weight_2d(domain, params, xa, ya)
    if scalar:
        return float(vals[0])
    return vals.reshape(shape)
