"""Geometries, boundary functions and weights.

Three domain families are supported, all of the form

    alpha < x < beta,   gamma * rho(x) < y < delta * rho(x).

* ``DiskSlice``: a vertical slice of the unit disk, rho(x) = sqrt(1 - x^2).
* ``EndDiskSlice``: the same with beta = 1 (a half-disk when alpha = 0).
* ``Trapezium``: the canonical trapezium 0 < x < 1, 0 < y < 1 - xi x.

Every bivariate weight factors as

    W(x, y) = (beta - x)^ea (x - alpha)^eb rho(x)^er  w_t(y / rho(x)),
    w_t(t)  = (delta - t)^A (t - gamma)^B,

and the helpers at the bottom of this module return those exponents
for each domain and parameter tuple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import settings
from .errors import DomainError

DISK_SLICE = "DiskSlice"
END_DISK_SLICE = "EndDiskSlice"
TRAPEZIUM = "Trapezium"

_ARITY = {DISK_SLICE: 3, END_DISK_SLICE: 2, TRAPEZIUM: 4}


@dataclass(frozen=True)
class DomainSpec:
    """Immutable geometry descriptor.

    Use the constructors :meth:`disk_slice`, :meth:`end_disk_slice` and
    :meth:`trapezium` rather than building instances by hand.
    """

    kind: str
    alpha: float
    beta: float
    gamma: float
    delta: float
    xi: float = 0.0

    def __post_init__(self):
        k = self.kind
        if k not in _ARITY:
            raise DomainError(f"unknown domain kind {k!r}")
        if k == DISK_SLICE:
            if not (0.0 < self.alpha < self.beta < 1.0):
                raise DomainError("disk-slice needs 0 < alpha < beta < 1")
        elif k == END_DISK_SLICE:
            if not (0.0 < self.alpha < 1.0) or self.beta != 1.0:
                raise DomainError("end-disk-slice needs 0 < alpha < 1 and beta = 1")
        else:
            if (self.alpha, self.beta) != (0.0, 1.0) or not (0.0 < self.xi < 1.0):
                raise DomainError("trapezium needs (alpha, beta) = (0, 1) and 0 < xi < 1")
        if k in (DISK_SLICE, END_DISK_SLICE) and (self.gamma, self.delta) != (-1.0, 1.0):
            raise DomainError("circular domains use (gamma, delta) = (-1, 1)")
        if k == TRAPEZIUM and (self.gamma, self.delta) != (0.0, 1.0):
            raise DomainError("the trapezium uses (gamma, delta) = (0, 1)")

    @classmethod
    def disk_slice(cls, alpha=0.25, beta=0.75):
        return cls(DISK_SLICE, float(alpha), float(beta), -1.0, 1.0)

    @classmethod
    def end_disk_slice(cls, alpha=0.2):
        return cls(END_DISK_SLICE, float(alpha), 1.0, -1.0, 1.0)

    @classmethod
    def trapezium(cls, xi=0.5):
        return cls(TRAPEZIUM, 0.0, 1.0, 0.0, 1.0, float(xi))

    @property
    def arity(self):
        return _ARITY[self.kind]

    @property
    def circular(self):
        """True when rho(x) = sqrt(1 - x^2)."""
        return self.kind != TRAPEZIUM

    def describe(self):
        return {"kind": self.kind, "alpha": self.alpha, "beta": self.beta, "xi": self.xi}

    # convenience forwards
    def rho(self, x):
        return rho(self, x)

    def contains(self, x, y):
        return contains(self, x, y)


@dataclass(frozen=True)
class ParamSet:
    """Basis parameters plus the weighted flag.

    ``values`` holds (a, b, c) on a disk-slice, (a, b) on an end-disk-slice
    and (a, b, c, d) on a trapezium.  ``weighted`` selects W * H instead of H.
    """

    values: tuple
    weighted: bool = False

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if any(v < 0 for v in vals):
            raise DomainError(f"parameters must be nonnegative, got {vals}")
        object.__setattr__(self, "values", vals)

    def check(self, domain):
        if len(self.values) != domain.arity:
            raise DomainError(
                f"{domain.kind} takes {domain.arity} parameters, got {len(self.values)}"
            )
        return self

    def shifted(self, delta, weighted=None):
        """Parameters incremented by ``delta`` (which may be negative)."""
        new = tuple(v + d for v, d in zip(self.values, delta))
        if any(v < 0 for v in new):
            raise DomainError(f"parameter shift {tuple(delta)} from {self.values} goes negative")
        return ParamSet(new, self.weighted if weighted is None else weighted)

    def as_weighted(self, flag=True):
        return ParamSet(self.values, flag)

    def is_integral(self):
        return all(float(v).is_integer() for v in self.values)

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


def as_params(domain, params, weighted=None):
    """Coerce a tuple or ParamSet into a checked ParamSet."""
    if not isinstance(params, ParamSet):
        params = ParamSet(tuple(params), bool(weighted))
    elif weighted is not None and params.weighted != bool(weighted):
        params = params.as_weighted(bool(weighted))
    return params.check(domain)


def _as_array(x):
    return np.asarray(x, dtype=float)


def rho(domain, x):
    """Boundary function rho(x) on [alpha, beta].

    Raises
    ------
    DomainError
        If any x lies outside [alpha, beta].
    """
    xa = _as_array(x)
    if np.any(xa < domain.alpha) or np.any(xa > domain.beta):
        raise DomainError(f"x outside [{domain.alpha}, {domain.beta}]")
    out = _rho_unchecked(domain, xa)
    return float(out) if np.ndim(out) == 0 else out


def _rho_unchecked(domain, x):
    if domain.circular:
        return np.sqrt(np.maximum(1.0 - x * x, 0.0))
    return 1.0 - domain.xi * x


def rho_squared(domain, x):
    """rho(x)^2 as a polynomial expression (no square roots)."""
    if domain.circular:
        return 1.0 - x * x
    r = 1.0 - domain.xi * x
    return r * r


def drho_split(domain):
    """Write rho'(x) = g(x) rho(x)^s and return (coefficients of g, s).

    For the circular domains rho' = -x / rho, for the trapezium rho' = -xi.
    The polynomial g is returned in ascending power-basis coefficients.
    """
    if domain.circular:
        return (0.0, -1.0), -1
    return (-domain.xi,), 0


def contains(domain, x, y):
    """Strict interior test; vectorized over arrays."""
    xa, ya = np.broadcast_arrays(_as_array(x), _as_array(y))
    inside_x = (xa > domain.alpha) & (xa < domain.beta)
    r = _rho_unchecked(domain, np.clip(xa, domain.alpha, domain.beta))
    out = inside_x & (ya > domain.gamma * r) & (ya < domain.delta * r)
    return bool(out) if out.ndim == 0 else out


def in_closure(domain, x, y, slack=None):
    """Closure test with a small tolerance for rounding."""
    tol = settings.TOL.boundary_clamp if slack is None else slack
    xa, ya = np.broadcast_arrays(_as_array(x), _as_array(y))
    ok_x = (xa >= domain.alpha - tol) & (xa <= domain.beta + tol)
    r = _rho_unchecked(domain, np.clip(xa, domain.alpha, domain.beta))
    return ok_x & (ya >= domain.gamma * r - tol) & (ya <= domain.delta * r + tol)


def check_points(domain, x, y):
    """Return x, y as float arrays, raising DomainError outside the closure."""
    xa, ya = np.broadcast_arrays(_as_array(x), _as_array(y))
    if not np.all(in_closure(domain, xa, ya)):
        raise DomainError("point(s) outside the closed domain")
    return np.clip(xa, domain.alpha, domain.beta), ya


# ----------------------------------------------------------------------------
# exponent bookkeeping


def x_exponents(domain, params):
    """Exponents (ea, eb, er) of (beta - x), (x - alpha), rho(x) in W."""
    v = as_params(domain, params).values
    if domain.kind == DISK_SLICE:
        a, b, c = v
        return a, b, 2.0 * c
    if domain.kind == END_DISK_SLICE:
        a, b = v
        return 0.0, a, 2.0 * b
    a, b, c, d = v
    return a, b, c + d


def t_exponents(domain, params):
    """Exponents (A, B) of (delta - t), (t - gamma) in the t-weight."""
    v = as_params(domain, params).values
    if domain.kind == DISK_SLICE:
        return v[2], v[2]
    if domain.kind == END_DISK_SLICE:
        return v[1], v[1]
    return v[3], v[2]


def weight_2d(domain, params, x, y):
    """Bivariate weight W^{params}(x, y) on the closed domain.

    Examples
    --------
    >>> d = DomainSpec.disk_slice(0.25, 0.75)
    >>> weight_2d(d, (1, 1, 1), 0.5, 0.0)
    0.046875
    """
    params = as_params(domain, params)
    xa, ya = check_points(domain, x, y)
    v = params.values
    with np.errstate(invalid="ignore"):
        if domain.kind == DISK_SLICE:
            a, b, c = v
            w = _pow(domain.beta - xa, a) * _pow(xa - domain.alpha, b) * _pow(1 - xa * xa - ya * ya, c)
        elif domain.kind == END_DISK_SLICE:
            a, b = v
            w = _pow(xa - domain.alpha, a) * _pow(1 - xa * xa - ya * ya, b)
        else:
            a, b, c, d = v
            w = (_pow(1 - xa, a) * _pow(xa, b) * _pow(ya, c)
                 * _pow(1 - domain.xi * xa - ya, d))
    return float(w) if w.ndim == 0 else w


def _pow(base, e):
    # clamp rounding-level negatives; 0**0 is 1 as required
    base = np.maximum(base, 0.0)
    if e == 0:
        return np.ones_like(base)
    return base ** e


def bounding_box(domain):
    """(xmin, xmax, ymin, ymax) of the closed domain."""
    if domain.circular:
        ymax = math.sqrt(1 - domain.alpha ** 2)
        return domain.alpha, domain.beta, -ymax, ymax
    return 0.0, 1.0, 0.0, 1.0
