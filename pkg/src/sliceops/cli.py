"""Command-line frontend.

Commands
--------
``solve``        solve one PDE and write coefficients, a grid and a report
``convergence``  block norms of Poisson/Helmholtz/biharmonic solutions for several RHS
``spy``          sparsity pattern of an operator
``cache``        build, verify or purge the on-disk recurrence cache

Output files (all CSV files have a header row):

* ``coefficients.csv``: ``n,k,coefficient`` in the weighted solution basis
* ``grid.csv``: ``x,y,u`` on a uniform bounding-box grid, ``u`` empty outside
* ``report.txt``: ``key = value`` lines (residual, timings, cache use, errors)
* ``blocknorms.csv``: ``degree,<rhs 1>,<rhs 2>,...``
* ``convergence_summary.csv``: ``rhs,slope,monotone_tail,corner_max,corner_vanishing``
* ``spy.csv``: ``block_i,block_j,sub_i,sub_j,value``
* ``spy_summary.txt``: shape and bandwidths of the exported operator

Exit codes: 0 success, 2 configuration error, 3 numerical failure or
corrupt cache.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import glob
import hashlib
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import operators as ops
from . import ops2d
from . import solve as S
from .bbbmatrix import BBBMatrix, BlockCoeffVector, block_offsets, total_size
from .domains import DomainSpec, ParamSet, bounding_box, in_closure, rho
from .errors import ConfigError, CorruptCacheError, DomainError, NumericalFailure, TableError
from .ops1d import load_tables, save_tables

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DOMAINS = ("diskslice", "halfdisk", "trapezium")
EQUATIONS = {"poisson": "Poisson", "helmholtz": "Helmholtz", "biharmonic": "Biharmonic"}
SPY_OPERATORS = ops.OPERATOR_KINDS + ("identity", "laplacian", "biharmonic", "helmholtz")

# ----------------------------------------------------------------------------
# expressions


_FUNCS = {"exp": np.exp, "erf": erf, "sin": np.sin, "cos": np.cos}
_CONSTS = {"pi": math.pi}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}


def parse_expression(text):
    """Compile an arithmetic expression in x and y into a vectorized callable.

    The grammar is numbers, ``x``, ``y``, ``pi``, ``+ - * /``, ``^`` (power)
    and the functions exp, erf, sin and cos.  Nothing else is evaluated.

    Examples
    --------
    >>> f = parse_expression("1 + x^2 * exp(y)")
    >>> float(f(2.0, 0.0))
    5.0
    """
    src = str(text).strip()
    if not src:
        raise ConfigError("empty expression")
    try:
        tree = ast.parse(src.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from None

    def build(node):
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            v = float(node.value)
            return lambda x, y: v
        if isinstance(node, ast.Name):
            if node.id == "x":
                return lambda x, y: x
            if node.id == "y":
                return lambda x, y: y
            if node.id in _CONSTS:
                v = _CONSTS[node.id]
                return lambda x, y: v
            raise ConfigError(f"unknown name {node.id!r} in expression")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op, a, b = _BINOPS[type(node.op)], build(node.left), build(node.right)
            return lambda x, y: op(a(x, y), b(x, y))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            a = build(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda x, y: -a(x, y)
            return a
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords:
            fn, a = _FUNCS[node.func.id], build(node.args[0])
            return lambda x, y: fn(a(x, y))
        raise ConfigError(f"unsupported construct in expression {text!r}")

    body = build(tree)

    def f(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        with np.errstate(all="ignore"):
            return np.broadcast_to(body(x, y), np.broadcast(x, y).shape).astype(float)

    f.expression = src
    return f


def _erf_rhs(x, y):
    return 1 + erf(5 * (1 - 10 * ((x - 0.5) ** 2 + y ** 2)))


BUILTIN_RHS = {
    "zero": lambda x, y: np.zeros(np.broadcast(x, y).shape),
    "one": lambda x, y: np.ones(np.broadcast(x, y).shape),
    "erf": _erf_rhs,
    "helmholtz": lambda x, y: x * (1 - x ** 2 - y ** 2) * np.exp(x),
}
BUILTIN_V = {
    "one": None,
    "ellipse": lambda x, y: 1 - (3 * (x - 1) ** 2 + 5 * y ** 2),
    "xy2": lambda x, y: x * y ** 2,
}
MANUFACTURED = "manufactured"


def _manufactured_base(x, y):
    return y ** 3 * np.exp(x)


def resolve_function(name, builtins):
    """Built-in name or expression string -> callable (None for v = 1)."""
    key = str(name).strip()
    if key in builtins:
        return builtins[key]
    return parse_expression(key)


# ----------------------------------------------------------------------------
# configuration

_SCHEMA = {
    "domain": {"kind": str, "alpha": float, "beta": float, "xi": float},
    "problem": {"equation": str, "degree": int, "rhs": str, "k": float, "v": str,
                "v_degree": int, "bc_const": float},
    "convergence": {"rhs": str},
    "spy": {"operator": str, "params": str},
    "output": {"dir": str, "grid": int},
    "cache": {"dir": str},
}


@dataclass
class RunConfig:
    """Validated run settings."""

    domain: DomainSpec
    domain_name: str
    equation: str = "Poisson"
    degree: int = 20
    rhs: str = "erf"
    k: float = 0.0
    v: str = "one"
    v_degree: int = 10
    bc_const: float = 0.0
    convergence_rhs: list = field(default_factory=lambda: ["erf", "one"])
    operator: str = "laplacian"
    params: tuple = None
    out: str = "."
    grid: int = 201
    cache_dir: str = None


def read_config(path):
    """Parse a ``key = value`` file with sections, rejecting unknown entries."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[(section, key)] = _SCHEMA[section][key](raw.strip())
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {section}.{key}") from None
    return values


def _make_domain(name, alpha, beta, xi):
    if name not in DOMAINS:
        raise ConfigError(f"unknown domain {name!r}; choose from {', '.join(DOMAINS)}")
    try:
        if name == "diskslice":
            return DomainSpec.disk_slice(0.25 if alpha is None else alpha,
                                         0.75 if beta is None else beta)
        if beta is not None and beta != 1.0:
            raise ConfigError(f"{name} has beta = 1")
        if name == "halfdisk":
            return DomainSpec.end_disk_slice(0.2 if alpha is None else alpha)
        if alpha not in (None, 0.0):
            raise ConfigError("the trapezium has alpha = 0")
        return DomainSpec.trapezium(0.5 if xi is None else xi)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


def _parse_params(text, domain):
    try:
        vals = tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad parameter list {text!r}") from None
    if len(vals) != domain.arity:
        raise ConfigError(f"{domain.kind} takes {domain.arity} parameters, got {len(vals)}")
    return tuple(int(v) if v.is_integer() else v for v in vals)


def build_config(args):
    """Merge the config file (if any) with command-line overrides and validate."""
    file_vals = read_config(args.config) if getattr(args, "config", None) else {}

    def pick(section, key, flag=None, default=None):
        v = getattr(args, flag, None) if flag else None
        if v is not None:
            return v
        return file_vals.get((section, key), default)

    name = pick("domain", "kind", "domain", "diskslice")
    domain = _make_domain(name, pick("domain", "alpha", "alpha"), pick("domain", "beta", "beta"),
                          pick("domain", "xi", "xi"))
    eq = str(pick("problem", "equation", "equation", "poisson")).lower()
    if eq not in EQUATIONS:
        raise ConfigError(f"unknown equation {eq!r}")
    cfg = RunConfig(domain=domain, domain_name=name, equation=EQUATIONS[eq])
    cfg.degree = int(pick("problem", "degree", "degree", 20))
    if cfg.degree < (2 if cfg.equation == "Biharmonic" else 1):
        raise ConfigError("degree too small for this equation")
    cfg.rhs = str(pick("problem", "rhs", "rhs", "erf"))
    cfg.k = float(pick("problem", "k", "k", 0.0))
    cfg.v = str(pick("problem", "v", "v", "one"))
    cfg.v_degree = int(pick("problem", "v_degree", None, 10))
    cfg.bc_const = float(pick("problem", "bc_const", "bc_const", 0.0))
    if cfg.bc_const and cfg.equation != "Helmholtz":
        raise ConfigError("a boundary constant is only supported for Helmholtz")
    if not all(math.isfinite(v) for v in (cfg.k, cfg.bc_const)):
        raise ConfigError("k and bc-const must be finite")
    conv = pick("convergence", "rhs", "conv_rhs", None)
    if conv is not None:
        cfg.convergence_rhs = [s.strip() for s in str(conv).split(";") if s.strip()]
        if not cfg.convergence_rhs:
            raise ConfigError("empty convergence rhs list")
    cfg.operator = str(pick("spy", "operator", "operator", "laplacian"))
    if cfg.operator not in SPY_OPERATORS:
        raise ConfigError(f"unknown operator {cfg.operator!r}")
    params = pick("spy", "params", "params", None)
    if params is not None:
        cfg.params = _parse_params(params, domain)
    cfg.out = str(pick("output", "dir", "out", "."))
    cfg.grid = int(pick("output", "grid", "grid", 201))
    if cfg.grid < 2:
        raise ConfigError("grid needs at least 2 points per side")
    cfg.cache_dir = pick("cache", "dir", "cache_dir", None)
    # resolve every function now so bad expressions fail before any computation
    for text in [cfg.rhs] + cfg.convergence_rhs:
        if text != MANUFACTURED:
            resolve_function(text, BUILTIN_RHS)
    resolve_function(cfg.v, BUILTIN_V)
    return cfg


# ----------------------------------------------------------------------------
# recurrence cache


def _cache_key(domain, params):
    desc = repr((domain.kind, domain.alpha, domain.beta, domain.xi, tuple(params.values)))
    return hashlib.sha256(desc.encode()).hexdigest()[:16]


class TableCache:
    """Directory of level tables keyed by domain and basis parameters.

    Installed as ``ops2d.table_provider``: a request covered by a stored
    file is served from disk, otherwise the tables are built and written.
    """

    def __init__(self, directory, write=True):
        self.directory = directory
        self.write = write
        self.hits = 0
        self.misses = 0
        self.build_time = 0.0

    def path(self, domain, params):
        return os.path.join(self.directory, f"tables-{_cache_key(domain, params)}.json")

    def __call__(self, domain, params, nlevels, length):
        path = self.path(domain, params)
        if os.path.exists(path):
            tables, desc = load_tables(path)
            if desc.get("nlevels", 0) >= nlevels and desc.get("length", 0) >= length:
                self.hits += 1
                return [t.truncated(length) for t in tables[:nlevels]]
        self.misses += 1
        t0 = time.perf_counter()
        tables = ops2d.build_level_tables(domain, params, nlevels, length)
        self.build_time += time.perf_counter() - t0
        if self.write:
            desc = {"domain": domain.describe(), "params": list(params.values),
                    "nlevels": nlevels, "length": length}
            save_tables(path, tables, desc)
        return tables

    def files(self):
        return sorted(glob.glob(os.path.join(self.directory, "tables-*.json")))

    def verify(self, fraction=0.1, tol=1e-11, seed=0):
        """Re-derive a random ``fraction`` of stored entries; returns the count checked."""
        rng = np.random.default_rng(seed)
        checked = 0
        for path in self.files():
            tables, desc = load_tables(path)
            try:
                d = desc["domain"]
                domain = DomainSpec(d["kind"], d["alpha"], d["beta"],
                                    -1.0 if d["kind"] != "Trapezium" else 0.0,
                                    1.0, d.get("xi", 0.0))
                params = ParamSet(tuple(desc["params"]))
                nlevels, length = int(desc["nlevels"]), int(desc["length"])
            except (KeyError, TypeError, ValueError, DomainError) as exc:
                raise CorruptCacheError(f"bad descriptor in {path}: {exc}") from None
            if len(tables) < nlevels or any(t.alpha.size < length for t in tables):
                raise CorruptCacheError(f"truncated tables in {path}")
            fresh = ops2d.build_level_tables(domain, params, nlevels, length)
            for old, new in zip(tables, fresh):
                n = old.alpha.size
                pick = rng.choice(n, size=max(1, int(math.ceil(fraction * n))), replace=False)
                for a, b in ((old.alpha, new.alpha), (old.beta, new.beta)):
                    err = np.abs(a[pick] - b[pick]) / np.maximum(np.abs(b[pick]), 1.0)
                    if err.max() > tol:
                        raise CorruptCacheError(
                            f"{path}: re-derived entries differ by {err.max():.2e}")
                checked += 2 * pick.size
        return checked

    def purge(self):
        files = self.files()
        for path in files:
            os.unlink(path)
        return len(files)


def _default_cache_dir():
    return os.path.join(os.path.expanduser("~"), ".cache", "sliceops")


def _install_cache(cfg):
    if cfg.cache_dir is None:
        return None
    cache = TableCache(cfg.cache_dir)
    ops2d.table_provider = cache
    ops2d.clear_family_cache()
    return cache


# ----------------------------------------------------------------------------
# output helpers


def _fmt(v):
    return repr(float(v))


def write_coefficients(path, coeffs):
    data = coeffs.data if isinstance(coeffs, BlockCoeffVector) else np.asarray(coeffs)
    N = ops2d.degree_of(data.size)
    off = block_offsets(N + 1)
    with open(path, "w") as fh:
        fh.write("n,k,coefficient\n")
        for n in range(N + 1):
            for k in range(n + 1):
                fh.write(f"{n},{k},{_fmt(data[off[n] + k])}\n")


def grid_points(domain, m):
    """Uniform m x m bounding-box grid and its closed-domain mask."""
    x0, x1, y0, y1 = bounding_box(domain)
    X, Y = np.meshgrid(np.linspace(x0, x1, m), np.linspace(y0, y1, m), indexing="xy")
    return X.ravel(), Y.ravel(), in_closure(domain, X.ravel(), Y.ravel(), 0.0)


def write_grid(path, domain, evaluate, m, chunk=4096):
    x, y, inside = grid_points(domain, m)
    u = np.full(x.size, np.nan)
    idx = np.flatnonzero(inside)
    for c in range(0, idx.size, chunk):
        sel = idx[c:c + chunk]
        u[sel] = evaluate(x[sel], y[sel])
    with open(path, "w") as fh:
        fh.write("x,y,u\n")
        for xi, yi, ui in zip(x, y, u):
            fh.write(f"{_fmt(xi)},{_fmt(yi)},{'' if np.isnan(ui) else _fmt(ui)}\n")
    return int(inside.sum())


def write_report(path, items):
    with open(path, "w") as fh:
        for key, value in items:
            fh.write(f"{key} = {value}\n")


def random_interior_points(domain, n, seed=1234):
    """Deterministic uniform samples from the interior of the domain."""
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = bounding_box(domain)
    xs, ys = [], []
    while sum(a.size for a in xs) < n:
        x = rng.uniform(x0, x1, 4 * n)
        y = rng.uniform(y0, y1, 4 * n)
        ok = domain.contains(x, y)
        xs.append(x[ok])
        ys.append(y[ok])
    return np.concatenate(xs)[:n], np.concatenate(ys)[:n]


def corner_points(domain):
    """Corners (vertices) of the domain boundary."""
    if domain.kind == "Trapezium":
        return np.array([0.0, 1.0, 1.0, 0.0]), np.array([0.0, 0.0, 1 - domain.xi, 1.0])
    ra = float(rho(domain, domain.alpha))
    if domain.kind == "EndDiskSlice":
        return np.array([domain.alpha, domain.alpha]), np.array([ra, -ra])
    rb = float(rho(domain, domain.beta))
    return (np.array([domain.alpha, domain.alpha, domain.beta, domain.beta]),
            np.array([ra, -ra, rb, -rb]))


# ----------------------------------------------------------------------------
# problems


def _one_params(cfg):
    return ops.ones(cfg.domain, 2 if cfg.equation == "Biharmonic" else 1)


def system_matrix(cfg, N, vc=None):
    dom = cfg.domain
    if cfg.equation == "Poisson":
        return ops.build_laplacian_W111(dom, N)
    if cfg.equation == "Biharmonic":
        return ops.build_biharmonic(dom, N)
    if vc is None:
        vc = S.v_coefficients(dom, resolve_function(cfg.v, BUILTIN_V), cfg.v_degree)
    return ops.build_helmholtz(dom, N, cfg.k, vc)


def manufactured_rhs(cfg):
    """(rhs coefficients, exact solution) for u* = W^{1 or 2} y^3 e^x.

    The rhs is the forward operator applied at degree N + 4, truncated to N.
    """
    dom, N = cfg.domain, cfg.degree
    pw = _one_params(cfg)
    from .transform import analyze
    ut = analyze(_manufactured_base, dom, pw, N + 4)
    A = system_matrix(cfg, N + 4)
    f = A.matvec(ut.data)[:total_size(N)]
    weight = ParamSet(pw, weighted=True)

    def exact(x, y):
        from .domains import weight_2d
        return weight_2d(dom, weight, x, y) * _manufactured_base(x, y)

    tag = ops2d.basis_tag(dom, ParamSet(pw))
    return BlockCoeffVector(f, tag), exact


def make_problem(cfg, rhs_text=None, N=None):
    text = cfg.rhs if rhs_text is None else rhs_text
    exact = None
    if text == MANUFACTURED:
        if cfg.bc_const:
            raise ConfigError("the manufactured solution has zero boundary data")
        rhs, exact = manufactured_rhs(cfg)
    else:
        rhs = resolve_function(text, BUILTIN_RHS)
    problem = S.PDEProblem(cfg.equation, rhs, cfg.degree if N is None else N, cfg.domain,
                           k=cfg.k, v=resolve_function(cfg.v, BUILTIN_V), c=cfg.bc_const,
                           v_degree=cfg.v_degree)
    return problem, exact


# ----------------------------------------------------------------------------
# commands


def cmd_solve(cfg):
    """Solve, then write coefficients.csv, grid.csv and report.txt."""
    os.makedirs(cfg.out, exist_ok=True)
    cache = _install_cache(cfg)
    t0 = time.perf_counter()
    problem, exact = make_problem(cfg)
    sol = S.solve(problem)
    t_total = time.perf_counter() - t0
    write_coefficients(os.path.join(cfg.out, "coefficients.csv"), sol.coeffs)
    t1 = time.perf_counter()
    inside = write_grid(os.path.join(cfg.out, "grid.csv"), cfg.domain, sol, cfg.grid)
    t_grid = time.perf_counter() - t1
    items = [("equation", cfg.equation), ("domain", cfg.domain_name),
             ("alpha", cfg.domain.alpha), ("beta", cfg.domain.beta), ("xi", cfg.domain.xi),
             ("degree", problem.N), ("unknowns", sol.coeffs.data.size),
             ("rhs", cfg.rhs), ("k", cfg.k), ("v", cfg.v), ("bc_const", cfg.bc_const),
             ("residual", f"{sol.residual:.3e}"),
             ("grid_points_inside", inside)]
    if exact is not None:
        x, y = random_interior_points(cfg.domain, 500)
        err = float(np.abs(sol(x, y) - exact(x, y)).max())
        items.append(("manufactured_max_error", f"{err:.3e}"))
    items += [("time_assemble_s", f"{sol.timings.get('assemble', 0.0):.3f}"),
              ("time_solve_s", f"{sol.timings.get('solve', 0.0):.3f}"),
              ("time_total_s", f"{t_total:.3f}"), ("time_grid_s", f"{t_grid:.3f}")]
    if cache is not None:
        items += [("cache_hits", cache.hits), ("cache_misses", cache.misses),
                  ("time_table_build_s", f"{cache.build_time:.3f}")]
    write_report(os.path.join(cfg.out, "report.txt"), items)
    print(f"solved {cfg.equation} on {cfg.domain_name} at N={problem.N}: "
          f"{sol.coeffs.data.size} coefficients, residual {sol.residual:.2e}")
    return EXIT_OK


def fit_slope(norms, lo=None, hi=None):
    """Least-squares slope of log(norm) against log(degree) over [lo, hi]."""
    N = norms.size - 1
    lo = max(1, N // 5) if lo is None else lo
    hi = N - 5 if hi is None else hi
    n = np.arange(norms.size)
    m = (n >= lo) & (n <= hi) & (norms > 0)
    if m.sum() < 3:
        return float("nan")
    return float(np.polyfit(np.log(n[m]), np.log(norms[m]), 1)[0])


def monotone_tail(norms, window=5, windows=None):
    """True if maxima over consecutive trailing windows strictly decrease."""
    N = norms.size - 1
    count = max(2, (N // 3) // window) if windows is None else windows
    start = norms.size - count * window
    if start < 1 or not np.any(norms):
        return False
    w = norms[start:].reshape(count, window).max(axis=1)
    return bool(np.all(np.diff(w) < 0))


def cmd_convergence(cfg):
    """Block norms per RHS plus fitted decay slopes."""
    os.makedirs(cfg.out, exist_ok=True)
    _install_cache(cfg)
    cx, cy = corner_points(cfg.domain)
    gx, gy, inside = grid_points(cfg.domain, 41)
    table, summary = [], []
    for text in cfg.convergence_rhs:
        problem, _ = make_problem(cfg, text)
        norms = S.solve(problem).block_norms
        table.append(norms)
        if text == MANUFACTURED:
            corner, vanish = float("nan"), False
        else:
            f = resolve_function(text, BUILTIN_RHS)
            scale = float(np.abs(f(gx[inside], gy[inside])).max(initial=0.0))
            corner = float(np.abs(f(cx, cy)).max())
            vanish = scale > 0 and corner <= 1e-12 * scale
        summary.append((text, fit_slope(norms), monotone_tail(norms), corner, vanish))
    with open(os.path.join(cfg.out, "blocknorms.csv"), "w") as fh:
        fh.write("degree," + ",".join(_csv_field(t) for t in cfg.convergence_rhs) + "\n")
        for n in range(cfg.degree + 1):
            fh.write(f"{n}," + ",".join(_fmt(col[n]) for col in table) + "\n")
    with open(os.path.join(cfg.out, "convergence_summary.csv"), "w") as fh:
        fh.write("rhs,slope,monotone_tail,corner_max,corner_vanishing\n")
        for text, slope, mono, corner, vanish in summary:
            fh.write(f"{_csv_field(text)},{slope:.4f},{mono},{corner:.3e},{vanish}\n")
        flag = _faster_flag(summary)
        fh.write(f"# corner_vanishing_decays_faster = {flag}\n")
    print(f"convergence table for {len(table)} right-hand sides written to {cfg.out}")
    return EXIT_OK


def _csv_field(text):
    return '"' + text.replace('"', "'") + '"' if ("," in text or '"' in text) else text


def _faster_flag(summary):
    fast = [s for _, s, _, _, v in summary if v and math.isfinite(s)]
    slow = [s for _, s, _, _, v in summary if not v and math.isfinite(s)]
    if not fast or not slow:
        return "n/a"
    return max(fast) < min(slow)


def spy_operator(cfg):
    dom, N = cfg.domain, cfg.degree
    name = cfg.operator
    if name == "identity":
        return BBBMatrix.identity(N + 1)
    if name == "laplacian":
        return ops.build_laplacian_W111(dom, N)
    if name == "biharmonic":
        return ops.build_biharmonic(dom, N)
    if name == "helmholtz":
        vc = S.v_coefficients(dom, resolve_function(cfg.v, BUILTIN_V), cfg.v_degree)
        return ops.build_helmholtz(dom, N, cfg.k, vc)
    weighted = name.startswith("W") or name.startswith("TW")
    params = cfg.params if cfg.params is not None else ops.ones(dom, 1 if weighted else 0)
    return ops.build_operator(dom, name, ParamSet(params, weighted=weighted), N)


def cmd_spy(cfg):
    """Write the operator's stored nonzero pattern as triplets."""
    os.makedirs(cfg.out, exist_ok=True)
    _install_cache(cfg)
    A = spy_operator(cfg)
    rows = A.spy_export(os.path.join(cfg.out, "spy.csv"))
    scale = max((abs(r[4]) for r in rows), default=0.0)
    (L, U), (lam, mu) = A.measured_bandwidths(tol=1e-12 * scale)
    write_report(os.path.join(cfg.out, "spy_summary.txt"), [
        ("operator", cfg.operator), ("domain", cfg.domain_name), ("degree", cfg.degree),
        ("block_rows", A.nrows), ("block_cols", A.ncols),
        ("declared_bandwidths", f"{A.L},{A.U}"), ("declared_subbandwidths", f"{A.lam},{A.mu}"),
        ("measured_bandwidths", f"{L},{U}"), ("measured_subbandwidths", f"{lam},{mu}"),
        ("nonzeros", len(rows))])
    print(f"{cfg.operator}: {A.nrows}x{A.ncols} blocks, bandwidths ({A.L},{A.U})/({A.lam},{A.mu})")
    return EXIT_OK


def cmd_cache(cfg, action):
    """Build, verify or purge the recurrence cache."""
    directory = cfg.cache_dir or _default_cache_dir()
    cache = TableCache(directory)
    if action == "purge":
        print(f"removed {cache.purge()} cache files from {directory}")
        return EXIT_OK
    if action == "verify":
        if not cache.files():
            print(f"no cache files in {directory}")
            return EXIT_OK
        count = cache.verify()
        print(f"verified {count} entries in {len(cache.files())} files")
        return EXIT_OK
    os.makedirs(directory, exist_ok=True)
    ops2d.table_provider = cache
    ops2d.clear_family_cache()
    t0 = time.perf_counter()
    system_matrix(cfg, cfg.degree)
    print(f"cache built in {time.perf_counter() - t0:.2f}s: {cache.misses} new, "
          f"{cache.hits} reused files in {directory}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def _parser():
    p = argparse.ArgumentParser(prog="sliceops", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with sections")
    common.add_argument("--out", help="output directory")
    common.add_argument("--degree", type=int, help="truncation degree N")
    common.add_argument("--domain", choices=DOMAINS)
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--xi", type=float)
    common.add_argument("--equation", choices=tuple(EQUATIONS))
    common.add_argument("--k", type=float, help="Helmholtz wavenumber")
    common.add_argument("--bc-const", dest="bc_const", type=float,
                        help="constant Dirichlet value (Helmholtz)")
    common.add_argument("--rhs", help="built-in name or expression in x, y")
    common.add_argument("--v", help="Helmholtz coefficient: built-in name or expression")
    common.add_argument("--cache-dir", dest="cache_dir", help="recurrence cache directory")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve one PDE")
    conv = sub.add_parser("convergence", parents=[common], help="block-norm decay per RHS")
    conv.add_argument("--rhs-list", dest="conv_rhs", help="';'-separated RHS list")
    spy = sub.add_parser("spy", parents=[common], help="operator sparsity pattern")
    spy.add_argument("--operator", choices=SPY_OPERATORS)
    spy.add_argument("--params", help="comma-separated basis parameters")
    cache = sub.add_parser("cache", parents=[common], help="recurrence cache maintenance")
    cache.add_argument("action", choices=("build", "verify", "purge"))
    return p


def main(argv=None):
    """Run the CLI; returns the process exit code."""
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        # argparse usage errors are configuration errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    previous = ops2d.table_provider
    try:
        cfg = build_config(args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "convergence":
            return cmd_convergence(cfg)
        if args.command == "spy":
            return cmd_spy(cfg)
        return cmd_cache(cfg, args.action)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptCacheError as exc:
        print(f"corrupt cache: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericalFailure, TableError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if ops2d.table_provider is not previous:
            ops2d.table_provider = previous
            ops2d.clear_family_cache()


if __name__ == "__main__":
    sys.exit(main())
