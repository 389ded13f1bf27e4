"""Quadrature on the domain, expansion of functions and synthesis.

The rules come from the change of variables y = rho(x) t, which turns
integration against W into integration of a product measure in (s, t):

    int_Omega f W dA = int w_s(s) int f(s, rho(s) t) w_t(t) dt ds,

with w_s the level-0 x-weight of the basis.  On the circular domains the t
weight is symmetric, so pairing each node (x, y) with (x, -y) integrates odd
parts exactly and ceil((N+1)/2) points in each variable are enough for
degree N; the trapezium uses N + 1 points in s.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .bbbmatrix import BlockCoeffVector, block_offsets, total_size
from .domains import _rho_unchecked, as_params, check_points
from .errors import TableError
from .ops1d import bootstrap_recurrence, eval_all, gauss_rule
from . import ops2d


@dataclass(frozen=True)
class QuadRule2D:
    """Tensor rule in (s, t) mapped to (x, y) = (s, rho(s) t).

    Attributes
    ----------
    s, ws : arrays
        Nodes and weights of the s-rule (level-0 x-weight).
    t, wt : arrays
        Nodes and weights of the t-rule.
    symmetric : bool
        True when each node is paired with its reflection (x, -y).
    degree : int
        Polynomial exactness degree.
    """

    domain: object
    params: object
    degree: int
    s: np.ndarray
    ws: np.ndarray
    t: np.ndarray
    wt: np.ndarray
    symmetric: bool

    @property
    def npoints(self):
        """Number of (paired) nodes."""
        return self.s.size * self.t.size

    def points(self):
        """Nodes (x, y) and weights w of the rule, reflections expanded.

        Returns arrays of shape (ns, nt') for the tensor layout, where
        nt' = 2 nt for paired rules (the reflected copies carry half weight).
        """
        t, wt = self.t, self.wt
        if self.symmetric:
            t = np.concatenate([t, -t])
            wt = np.concatenate([wt, wt]) / 2
        x = np.repeat(self.s[:, None], t.size, axis=1)
        y = _rho_unchecked(self.domain, self.s)[:, None] * t[None, :]
        w = self.ws[:, None] * wt[None, :]
        return x, y, w

    def paired_nodes(self):
        """(x_j, y_j, w_j), j = 1..M, without reflections."""
        x = np.repeat(self.s, self.t.size)
        y = (_rho_unchecked(self.domain, self.s)[:, None] * self.t[None, :]).ravel()
        w = (self.ws[:, None] * self.wt[None, :]).ravel()
        return x, y, w

    def integrate(self, f):
        """Integral of f W over the domain; f is vectorized in (x, y)."""
        x, y, w = self.points()
        return float(np.sum(w * np.asarray(f(x, y), dtype=float)))


_SRULES = {}
_SLOCK = threading.Lock()


def _s_rule(domain, params, M):
    key = (domain, params.values, M)
    with _SLOCK:
        if key not in _SRULES:
            table = bootstrap_recurrence(ops2d.x_weight(domain, params, 0), M)
            _SRULES[key] = gauss_rule(table, M)
        return _SRULES[key]


def rule_sizes(domain, N):
    """(s points, t points) used for exactness degree N."""
    half = -(-(N + 1) // 2)
    if domain.circular:
        return half, half
    return N + 1, half


def quad_rule_2d(domain, params, N):
    """Rule exact for polynomials of degree <= N against W^{params}.

    Examples
    --------
    >>> from sliceops.domains import DomainSpec
    >>> quad_rule_2d(DomainSpec.disk_slice(), (1, 1, 1), 9).npoints
    25
    """
    params = as_params(domain, params, weighted=False)
    if N < 0:
        raise ValueError("degree must be nonnegative")
    m1, m2 = rule_sizes(domain, N)
    sr = _s_rule(domain, params, m1)
    fam_t = ops2d.t_table(domain, params, m2 + 2)
    tr = gauss_rule(fam_t, m2)
    return QuadRule2D(domain, params, N, sr.nodes, sr.weights, tr.nodes, tr.weights,
                      domain.circular)


def integrate(f, domain, params, N):
    """Integral of f * W^{params} with the degree-N rule."""
    return quad_rule_2d(domain, params, N).integrate(f)


def analyze(f, domain, params, N, rule_degree=None):
    """Coefficients of f in H^{params} up to degree N.

    ``f`` is sampled on the degree-2N rule (or ``rule_degree``), and the
    coefficients are <f, H_{n,k}> / ||H_{n,k}||^2, evaluated separably in
    O(N^3) operations.
    """
    params = as_params(domain, params)
    if params.weighted:
        raise ValueError("analyze expands in the non-weighted basis")
    rule = quad_rule_2d(domain, params, 2 * N if rule_degree is None else rule_degree)
    x, y, _ = rule.points()
    F = np.asarray(f(x, y), dtype=float) * np.ones_like(x)
    t, wt = rule.t, rule.wt
    if rule.symmetric:
        t = np.concatenate([t, -t])
        wt = np.concatenate([wt, wt]) / 2
    return _analyze_grid(domain, params, N, rule.s, rule.ws, t, wt, F)


def _analyze_grid(domain, params, N, s, ws, t, wt, F):
    fam = ops2d.family_for_degree(domain, params, N)
    if fam.t.N < N + 1:
        raise TableError("t-table too short")
    P = eval_all(fam.t, N, t)                       # (N+1, nt)
    G = (F * wt[None, :]) @ P.T                     # (ns, N+1): sum_t w_t P_k F
    r = _rho_unchecked(domain, s)
    coeffs = np.empty(total_size(N))
    off = block_offsets(N + 1)
    norms = fam.norms(N)
    rk = np.ones_like(s)
    for k in range(N + 1):
        R = eval_all(fam.x_tables[k], N - k, s)     # (N-k+1, ns)
        idx = off[k:N + 1] + k
        coeffs[idx] = R @ (ws * rk * G[:, k])
        rk = rk * r
    coeffs /= norms
    return BlockCoeffVector(coeffs, ops2d.basis_tag(domain, params))


def synthesize(coeffs, x, y, domain=None, params=None):
    """Evaluate an expansion at points (vectorized Clenshaw)."""
    return ops2d.clenshaw_eval(coeffs, x, y, domain, params)


def gram_matrix(domain, params, N):
    """<H_{n,k}, H_{m,j}> for n, m <= N from the degree-2N rule (test helper)."""
    params = as_params(domain, params, weighted=False)
    rule = quad_rule_2d(domain, params, 2 * N)
    x, y, w = rule.points()
    H = ops2d.eval_basis_product(domain, params, x.ravel(), y.ravel(), N)
    return (H * w.ravel()) @ H.T


def check_rule_nodes(rule):
    """Raise DomainError if a node falls outside the closed domain."""
    x, y, _ = rule.points()
    check_points(rule.domain, x, y)
    return True
