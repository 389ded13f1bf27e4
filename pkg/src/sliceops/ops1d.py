"""Univariate orthonormal polynomials for the weights behind the 2D bases.

Polynomials are orthonormal under the mass-normalized inner product
<f, g> = (1/omega) int f g w dx, so p_0 = 1, and satisfy

    x p_n(x) = beta_n p_{n+1}(x) + alpha_n p_n(x) + beta_{n-1} p_{n-1}(x).

Non-classical weights are bootstrapped with a discretized Stieltjes
procedure; higher powers of (1 -+ x) are then added by Christoffel-Darboux
lifting, which maps one recurrence table to the next in O(N).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import betaln, roots_jacobi

from . import settings
from .errors import CorruptCacheError, NumericalFailure, TableError

CACHE_FORMAT = "sliceops-recurrence"
CACHE_VERSION = 1


@dataclass(frozen=True)
class WeightSpec:
    """w(x) = (hi - x)^a (x - lo)^b (1 - xi x)^c (1 + x)^d on (lo, hi).

    With ``xi = 1`` the third factor is the interim (1 - x)^c factor; on the
    trapezium ``xi`` is the slope of rho(x) = 1 - xi x.
    """

    lo: float
    hi: float
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    xi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("empty interval")
        if self.a <= -1 or self.b <= -1:
            raise ValueError("weight is not integrable at an endpoint")
        if self.c < 0 or self.d < 0:
            raise ValueError("smooth factor exponents must be nonnegative")
        if self.xi * self.hi > 1 + 1e-15 or (self.d > 0 and self.lo < -1):
            raise ValueError("smooth factors must not vanish inside the interval")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return (_pw(self.hi - x, self.a) * _pw(x - self.lo, self.b)
                * _pw(1 - self.xi * x, self.c) * _pw(1 + x, self.d))

    def lifted(self, endpoint):
        """Weight multiplied by (1 - x) for endpoint +1 or (1 + x) for -1."""
        if self.xi != 1.0:
            raise ValueError("endpoint lifting needs the interim (1 - x) form")
        if endpoint == 1:
            return WeightSpec(self.lo, self.hi, self.a, self.b, self.c + 1, self.d, 1.0)
        if endpoint == -1:
            return WeightSpec(self.lo, self.hi, self.a, self.b, self.c, self.d + 1, 1.0)
        raise ValueError("endpoint must be +1 or -1")

    def describe(self):
        return {k: float(getattr(self, k)) for k in ("lo", "hi", "a", "b", "c", "d", "xi")}

    def _endpoint_exponents(self):
        # singular endpoint exponents seen by the Gauss-Jacobi discretization
        ea, eb = self.a, self.b
        smooth_c, smooth_d = self.c, self.d
        if self.xi * self.hi == 1.0:
            ea, smooth_c = ea + self.c, 0.0
        if self.lo == -1.0:
            eb, smooth_d = eb + self.d, 0.0
        return ea, eb, smooth_c, smooth_d


def _pw(base, e):
    base = np.maximum(base, 0.0)
    if e == 0:
        return np.ones_like(base)
    return base ** e


@dataclass(frozen=True, eq=False)
class RecurrenceTable:
    """Recurrence coefficients alpha[0..N], beta[0..N] and mass omega."""

    weight: WeightSpec
    alpha: np.ndarray
    beta: np.ndarray
    omega: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        if a.shape != b.shape or a.ndim != 1 or a.size == 0:
            raise TableError("alpha and beta must be equal-length 1D arrays")
        if np.any(b <= 0):
            raise NumericalFailure("non-positive beta in recurrence table", beta_min=float(b.min()))
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "omega", float(self.omega))

    @property
    def N(self):
        return self.alpha.size - 1

    def truncated(self, length):
        if length > self.alpha.size:
            raise TableError(f"table holds {self.alpha.size} coefficients, {length} requested")
        return RecurrenceTable(self.weight, self.alpha[:length], self.beta[:length],
                               self.omega, dict(self.meta))

    def to_record(self):
        return {
            "weight": self.weight.describe(),
            "N": int(self.N),
            "alpha": [float(v).hex() for v in self.alpha],
            "beta": [float(v).hex() for v in self.beta],
            "omega": float(self.omega).hex(),
        }

    @classmethod
    def from_record(cls, rec):
        w = WeightSpec(**rec["weight"])
        alpha = np.array([float.fromhex(v) for v in rec["alpha"]])
        beta = np.array([float.fromhex(v) for v in rec["beta"]])
        if alpha.size != rec["N"] + 1:
            raise CorruptCacheError("record length does not match its N")
        return cls(w, alpha, beta, float.fromhex(rec["omega"]))


@dataclass(frozen=True, eq=False)
class GaussRule:
    """Nodes and weights for the unnormalized measure w(x) dx."""

    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values):
        return float(np.dot(self.weights, values))


# ----------------------------------------------------------------------------
# bootstrap


def _discretize(weight, n):
    """n-point Gauss-Jacobi rule on the singular factors, smooth part folded in."""
    ea, eb, sc, sd = weight._endpoint_exponents()
    s, ws = roots_jacobi(n, ea, eb)
    half = 0.5 * (weight.hi - weight.lo)
    x = weight.lo + half * (s + 1.0)
    w = ws * half ** (ea + eb + 1.0)
    if sc:
        w = w * _pw(1 - weight.xi * x, sc)
    if sd:
        w = w * _pw(1 + x, sd)
    return x, w


def _stieltjes(x, w, length):
    """Discretized Stieltjes procedure on normalized vectors."""
    alpha = np.empty(length)
    beta = np.empty(length)
    q = np.sqrt(w / w.sum())
    q_prev = np.zeros_like(q)
    b_prev = 0.0
    for n in range(length):
        alpha[n] = np.dot(x * q, q)
        r = (x - alpha[n]) * q - b_prev * q_prev
        # second Gram-Schmidt pass against q keeps alpha_n accurate
        corr = np.dot(r, q)
        r -= corr * q
        alpha[n] += corr
        beta[n] = np.linalg.norm(r)
        if beta[n] == 0.0:
            raise NumericalFailure("discrete measure exhausted", n=n, nodes=x.size)
        q_prev, q, b_prev = q, r / beta[n], beta[n]
    return alpha, beta


def bootstrap_recurrence(weight, N, tol=None):
    """Recurrence coefficients alpha[0..N], beta[0..N] of ``weight``.

    The measure is discretized by Gauss-Jacobi quadrature on its singular
    endpoint factors; the node count grows by half until two successive tables agree
    to ``tol`` (default from :mod:`sliceops.settings`).

    Parameters
    ----------
    weight : WeightSpec
    N : int
        Highest recurrence index required.

    Returns
    -------
    RecurrenceTable

    Raises
    ------
    NumericalFailure
        If the coefficients fail to settle within the refinement budget.
    """
    tols = settings.TOL
    tol = tols.bootstrap if tol is None else tol
    length = int(N) + 1
    if length < 1:
        raise ValueError("N must be nonnegative")
    scale = max(abs(weight.lo), abs(weight.hi))
    # polynomial smooth factors need extra nodes to be integrated exactly
    n = 2 * length + 24 + int(np.ceil(0.5 * (weight.c + weight.d)))
    prev = None
    history = []
    for _ in range(tols.bootstrap_max_refine + 1):
        x, w = _discretize(weight, n)
        alpha, beta = _stieltjes(x, w, length)
        omega = float(w.sum())
        if prev is not None:
            diff = max(np.max(np.abs(alpha - prev[0])), np.max(np.abs(beta - prev[1])))
            history.append((n, float(diff)))
            if diff <= tol * scale:
                return RecurrenceTable(weight, alpha, beta, omega, {"nodes": n})
        prev = (alpha, beta)
        # gentle refinement: large Gauss-Jacobi rules lose a few digits
        n = int(np.ceil(1.5 * n))
    raise NumericalFailure("Stieltjes bootstrap did not converge", history=history,
                           weight=weight.describe())


def jacobi_table(A, B, N, lo=-1.0, hi=1.0):
    """Closed-form table for (hi - x)^A (x - lo)^B (shifted Jacobi weight)."""
    n = np.arange(N + 1, dtype=float)
    s = 2 * n + A + B
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = (B * B - A * A) / (s * (s + 2))
    alpha[0] = (B - A) / (A + B + 2)
    beta = (2.0 / (s + 2)) * np.sqrt(
        (n + 1) * (n + A + 1) * (n + B + 1) * (n + A + B + 1) / ((s + 1) * (s + 3))
    )
    half = 0.5 * (hi - lo)
    omega = np.exp((A + B + 1) * np.log(2 * half) + betaln(A + 1, B + 1))
    weight = WeightSpec(lo, hi, A, B)
    return RecurrenceTable(weight, lo + half * (alpha + 1), half * beta, omega, {"closed_form": True})


# ----------------------------------------------------------------------------
# Christoffel-Darboux lifting


def chi_ratios(table, y):
    """chi_n(y) = p_{n+1}(y) / p_n(y) from the ratio recurrence."""
    a, b = table.alpha, table.beta
    chi = np.empty(a.size)
    prev = 0.0
    for n in range(a.size):
        val = (y - a[n] - (b[n - 1] / prev if n else 0.0)) / b[n]
        if abs(val) < settings.TOL.chi_guard:
            raise NumericalFailure("vanishing chi in lift", n=n, y=y)
        chi[n] = prev = val
    return chi


def lift_endpoint(table, endpoint):
    """Add a factor (1 - x) (endpoint=+1) or (1 + x) (endpoint=-1) to the weight.

    The output table is one coefficient shorter than the input.

    Parameters
    ----------
    table : RecurrenceTable
        Table for the interim weight (hi - x)^a (x - lo)^b (1-x)^c (1+x)^d.
    endpoint : {+1, -1}

    Returns
    -------
    RecurrenceTable
        Table for the weight with c or d raised by one.
    """
    if endpoint not in (1, -1):
        raise ValueError("endpoint must be +1 or -1")
    if table.alpha.size < 2:
        raise TableError("lifting needs at least two coefficients")
    new_weight = table.weight.lifted(endpoint)
    y = float(endpoint)
    a, b = table.alpha, table.beta
    chi = chi_ratios(table, y)
    ratio = b / chi                      # beta_n / chi_n(y)
    shifted = np.concatenate(([0.0], ratio[:-1]))
    alpha_new = a + shifted - ratio
    s = b * chi                          # y - alpha_n - beta_{n-1}/chi_{n-1}
    beta_new = np.sqrt(s[1:] / s[:-1]) * b[:-1]
    omega_new = table.omega * abs(y - a[0])
    return RecurrenceTable(new_weight, alpha_new[:-1], beta_new, omega_new,
                           {"lifted_from": table.weight.describe()})


def lift_both(table, times=1):
    """Apply ``times`` rounds of lift(+1) followed by lift(-1)."""
    for _ in range(times):
        table = lift_endpoint(lift_endpoint(table, 1), -1)
    return table


# ----------------------------------------------------------------------------
# quadrature, evaluation, inner products


def gauss_rule(table, M):
    """M-point Gauss rule for the table's (unnormalized) measure.

    Raises
    ------
    TableError
        If the table is too short.
    """
    M = int(M)
    if M < 1:
        raise ValueError("M must be positive")
    if M > table.N:
        raise TableError(f"gauss_rule needs M <= N (M={M}, N={table.N})")
    if M == 1:
        return GaussRule(np.array([table.alpha[0]]), np.array([table.omega]))
    nodes, vecs = eigh_tridiagonal(table.alpha[:M], table.beta[:M - 1])
    weights = table.omega * vecs[0] ** 2
    order = np.argsort(nodes)
    return GaussRule(nodes[order], weights[order])


def eval_all(table, n, x):
    """Values p_0..p_n at x; returns an array of shape (n + 1,) + x.shape."""
    x = np.asarray(x, dtype=float)
    if n > table.alpha.size:
        raise TableError(f"degree {n} needs {n} coefficients, table has {table.alpha.size}")
    a, b = table.alpha, table.beta
    out = np.empty((n + 1,) + x.shape)
    out[0] = 1.0
    if n >= 1:
        out[1] = (x - a[0]) / b[0]
    for k in range(1, n):
        out[k + 1] = ((x - a[k]) * out[k] - b[k - 1] * out[k - 1]) / b[k]
    return out


def eval_all_with_derivative(table, n, x):
    """Values and first derivatives of p_0..p_n at x."""
    x = np.asarray(x, dtype=float)
    p = eval_all(table, n, x)
    a, b = table.alpha, table.beta
    dp = np.zeros_like(p)
    if n >= 1:
        dp[1] = 1.0 / b[0]
    for k in range(1, n):
        dp[k + 1] = ((x - a[k]) * dp[k] + p[k] - b[k - 1] * dp[k - 1]) / b[k]
    return p, dp


def eval_poly(table, n, x):
    """Value of the orthonormal polynomial p_n at x."""
    if n > table.N:
        raise TableError(f"degree {n} exceeds table N={table.N}")
    out = eval_all(table, n, x)[n]
    return float(out) if out.ndim == 0 else out


def inner_product(rule, f, g):
    """Unnormalized sum_i w_i f(x_i) g(x_i); divide by omega to normalize."""
    return float(np.dot(rule.weights, np.asarray(f(rule.nodes)) * np.asarray(g(rule.nodes))))


# ----------------------------------------------------------------------------
# cache files


def _checksum(records):
    blob = json.dumps(records, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_tables(path, tables, descriptor=None):
    """Write tables to ``path`` atomically (temp file plus rename)."""
    records = [t.to_record() for t in tables]
    doc = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "descriptor": descriptor or {},
        "records": records,
        "checksum": _checksum(records),
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=0)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_tables(path):
    """Read tables written by :func:`save_tables`, verifying the checksum.

    Returns
    -------
    (list of RecurrenceTable, descriptor dict)
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CorruptCacheError(f"unreadable cache file {path}: {exc}") from exc
    if doc.get("format") != CACHE_FORMAT or doc.get("version") != CACHE_VERSION:
        raise CorruptCacheError(f"unsupported cache format in {path}")
    records = doc.get("records", [])
    if _checksum(records) != doc.get("checksum"):
        raise CorruptCacheError(f"checksum mismatch in {path}")
    try:
        tables = [RecurrenceTable.from_record(r) for r in records]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCacheError(f"malformed record in {path}: {exc}") from exc
    return tables, doc.get("descriptor", {})
