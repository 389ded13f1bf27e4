"""PDE drivers: Poisson, variable-coefficient Helmholtz, biharmonic and p-FEM.

Boundary conditions are encoded by the solution basis: Poisson and
Helmholtz solutions live in W^{(1,..,1)} H (zero Dirichlet data), the
biharmonic solution in W^{(2,..,2)} H (zero Dirichlet and Neumann data).
A constant Dirichlet value c for Helmholtz is handled by writing
u = u~ + c and solving for u~ with right-hand side f - c k^2 v.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from . import ops2d, settings
from .bbbmatrix import BBBMatrix, BlockCoeffVector, block_offsets, total_size
from .domains import DomainSpec, ParamSet, as_params, weight_2d
from .errors import NumericalFailure
from .transform import analyze, synthesize

EQUATIONS = ("Poisson", "Helmholtz", "Biharmonic")


@dataclass
class PDEProblem:
    """Description of a solve.

    Attributes
    ----------
    kind : {"Poisson", "Helmholtz", "Biharmonic"}
    rhs : callable f(x, y) or BlockCoeffVector
        Right-hand side; coefficient vectors must be in H^{1} (Poisson,
        Helmholtz) or H^{2} (biharmonic).
    N : int
        Truncation degree of the solution.
    domain : DomainSpec
    k : float
        Helmholtz wavenumber.
    v : callable, BlockCoeffVector or None
        Helmholtz coefficient (None means v = 1); vectors are in H^{0}.
    c : float
        Constant Dirichlet value (Helmholtz only).
    v_degree : int
        Expansion degree used when ``v`` is a function.
    """

    kind: str
    rhs: object
    N: int
    domain: DomainSpec = field(default_factory=DomainSpec.disk_slice)
    k: float = 0.0
    v: object = None
    c: float = 0.0
    v_degree: int = 10

    def __post_init__(self):
        if self.kind not in EQUATIONS:
            raise ValueError(f"unknown equation {self.kind!r}")
        if self.N < (2 if self.kind == "Biharmonic" else 1):
            raise ValueError("degree too small for this equation")
        if self.c and self.kind != "Helmholtz":
            raise ValueError("a constant boundary value is only supported for Helmholtz")

    @property
    def solution_params(self):
        value = 2 if self.kind == "Biharmonic" else 1
        return ParamSet(ops.ones(self.domain, value), weighted=True)

    @property
    def rhs_params(self):
        return self.solution_params.as_weighted(False)


@dataclass
class Solution:
    """Solution coefficients in the weighted basis plus diagnostics."""

    coeffs: BlockCoeffVector
    domain: DomainSpec
    params: ParamSet
    shift: float = 0.0
    residual: float = 0.0
    timings: dict = field(default_factory=dict)

    @property
    def N(self):
        return ops2d.degree_of(self.coeffs.data.size)

    @property
    def block_norms(self):
        return block_norms(self.coeffs)

    def __call__(self, x, y):
        return synthesize(self.coeffs, x, y, self.domain, self.params) + self.shift


def block_norms(coeffs):
    """Euclidean norm of each degree block of a coefficient vector or Solution."""
    if isinstance(coeffs, Solution):
        coeffs = coeffs.coeffs
    data = coeffs.data if isinstance(coeffs, BlockCoeffVector) else np.asarray(coeffs, float)
    N = ops2d.degree_of(data.size)
    off = block_offsets(N + 1)
    return np.array([np.linalg.norm(data[off[n]:off[n + 1]]) for n in range(N + 1)])


def _expand(rhs, domain, params, N):
    if isinstance(rhs, BlockCoeffVector):
        data = rhs.data
        if ops2d.degree_of(data.size) != N:
            data = _resize(data, N)
        return data
    if callable(rhs):
        return analyze(rhs, domain, params, N).data
    return _resize(np.asarray(rhs, float), N)


def _resize(data, N):
    n = total_size(N)
    if data.size >= n:
        return data[:n].copy()
    out = np.zeros(n)
    out[:data.size] = data
    return out


def certify(A, u, f, tol=None):
    """Relative residual ||A u - f||_inf / ||f||_inf, raising above ``tol``."""
    tol = 10 * settings.TOL.solve_residual if tol is None else tol
    res = A.matvec(u) - f
    fn = np.abs(f).max(initial=0.0)
    rel = np.abs(res).max(initial=0.0) / fn if fn else np.abs(res).max(initial=0.0)
    if rel > tol:
        raise NumericalFailure("solution failed residual certification", residual=rel)
    return rel


def _solve(A, f):
    if not np.any(f):
        return np.zeros_like(f), 0.0
    u = A.solve(f)
    return u, certify(A, u, f)


def _finish(problem, u, shift, residual, timings):
    tag = ops2d.basis_tag(problem.domain, problem.solution_params)
    return Solution(BlockCoeffVector(u, tag), problem.domain, problem.solution_params,
                    shift=shift, residual=residual, timings=timings)


def solve_poisson(problem):
    """Solve Delta u = f with u = 0 on the boundary."""
    dom, N = problem.domain, problem.N
    t0 = time.perf_counter()
    A = ops.build_laplacian_W111(dom, N)
    t1 = time.perf_counter()
    f = _expand(problem.rhs, dom, problem.rhs_params, N)
    u, res = _solve(A, f)
    t2 = time.perf_counter()
    return _finish(problem, u, 0.0, res, {"assemble": t1 - t0, "solve": t2 - t1})


def v_coefficients(domain, v, degree):
    """Coefficients of v in H^{0}, trimmed after the last significant block."""
    if v is None:
        data = np.zeros(1)
        data[0] = 1.0
        return data
    if isinstance(v, BlockCoeffVector):
        data = v.data
    elif callable(v):
        data = analyze(v, domain, ops.ones(domain, 0), degree).data
    else:
        data = np.asarray(v, float)
    norms = block_norms(data)
    keep = np.flatnonzero(norms > 1e-15 * max(norms.max(), 1e-300))
    M = int(keep[-1]) if keep.size else 0
    return data[:total_size(M)].copy()


def solve_helmholtz(problem):
    """Solve Delta u + k^2 v u = f with u = c on the boundary."""
    dom, N, k = problem.domain, problem.N, float(problem.k)
    t0 = time.perf_counter()
    vc = v_coefficients(dom, problem.v, problem.v_degree)
    A = ops.build_helmholtz(dom, N, k, vc)
    t1 = time.perf_counter()
    f = _expand(problem.rhs, dom, problem.rhs_params, N)
    c = float(problem.c)
    if c and k:
        # u = u~ + c: Delta u~ + k^2 v u~ = f - c k^2 v, v converted H^{0} -> H^{1}
        T = ops.build_conversion(dom, "T_abc", ops.ones(dom, 0), ops2d.degree_of(vc.size))
        v1 = _resize(T.matvec(vc), N)
        f = f - c * k * k * v1
    u, res = _solve(A, f)
    t2 = time.perf_counter()
    return _finish(problem, u, c, res, {"assemble": t1 - t0, "solve": t2 - t1})


def solve_biharmonic(problem):
    """Solve Delta^2 u = f with zero Dirichlet and Neumann data."""
    dom, N = problem.domain, problem.N
    t0 = time.perf_counter()
    A = ops.build_biharmonic(dom, N)
    t1 = time.perf_counter()
    f = _expand(problem.rhs, dom, problem.rhs_params, N)
    u, res = _solve(A, f)
    t2 = time.perf_counter()
    return _finish(problem, u, 0.0, res, {"assemble": t1 - t0, "solve": t2 - t1})


def solve(problem):
    """Dispatch on ``problem.kind``."""
    return {"Poisson": solve_poisson, "Helmholtz": solve_helmholtz,
            "Biharmonic": solve_biharmonic}[problem.kind](problem)


# ----------------------------------------------------------------------------
# single-element p-FEM


def mass_matrix(domain, params, N):
    """Lambda^{params}: diagonal of ||H_{n,k}||^2 for n <= N."""
    tag = ops2d.basis_tag(domain, params, False)
    return BBBMatrix.diagonal(ops2d.norms_2d(domain, params, N), tag)


def pfem_assemble(domain, N):
    """Stiffness matrix and load builder of a single-element p-FEM.

    The trial and test space is W^{1} H_n, n <= N.  Returns ``(A, load)``
    with A_{ij} = integral of grad(phi_i) . grad(phi_j) and
    ``load(f_coeffs) = Lambda^{1} f`` for f given in H^{1}, so that A u =
    load(f) is the Galerkin system of -Delta u = f.
    """
    one = ops.ones(domain)
    Wx = ops.build_Wx(domain, one, N)
    Wy = ops.build_Wy(domain, one, N)
    TWy = ops.build_conversion(domain, "TW_ab", operators_target(domain, "Wy", one),
                               Wy.nrows - 1).compose(Wy)
    rows = max(Wx.nrows, TWy.nrows)
    lam0 = mass_matrix(domain, ops.ones(domain, 0), rows - 1)
    Gx = ops._pad_rows(Wx, rows)
    Gy = ops._pad_rows(TWy, rows)
    A = Gx.transpose().compose(lam0.compose(Gx)).add(Gy.transpose().compose(lam0.compose(Gy)))
    lam1 = ops2d.norms_2d(domain, one, N)

    def load(f_coeffs):
        data = f_coeffs.data if isinstance(f_coeffs, BlockCoeffVector) else np.asarray(f_coeffs, float)
        return lam1 * _resize(data, N)

    return A, load


def operators_target(domain, kind, params):
    return ops.operator_params(domain, kind, params)[1]


def pfem_solve(domain, rhs, N):
    """p-FEM solution of -Delta u = f, zero Dirichlet data."""
    A, load = pfem_assemble(domain, N)
    one = ParamSet(ops.ones(domain), weighted=True)
    f = _expand(rhs, domain, one.as_weighted(False), N)
    b = load(f)
    u, res = _solve(A, b)
    tag = ops2d.basis_tag(domain, one)
    return Solution(BlockCoeffVector(u, tag), domain, one, residual=res)
