"""Banded-block-banded matrices.

Rows and columns are grouped by total degree: block ``i`` has ``i + 1``
entries (inner index k = 0..i).  A matrix with block-bandwidths (L, U)
stores only blocks (i, j) with -L <= j - i <= U, and inside a stored block
only entries (r, s) with -lam <= s - r <= mu.  Bandwidths may be negative,
e.g. (L, U) = (-1, 3) keeps the block superdiagonals 1..3.

Each stored block is kept in row-aligned band form: ``data[o + lam, r]``
holds entry (r, r + o) for o in [-lam, mu].
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from . import settings
from .errors import NumericalFailure


def block_offsets(nblocks):
    """Start offsets of degree blocks 0..nblocks-1 plus the total length."""
    n = np.arange(nblocks + 1)
    return n * (n + 1) // 2


def total_size(N):
    """Number of coefficients for degrees 0..N."""
    return (N + 1) * (N + 2) // 2


def degree_of_size(size):
    N = int(round((np.sqrt(8 * size + 1) - 3) / 2))
    if total_size(N) != size:
        raise ValueError(f"{size} is not a triangular coefficient count")
    return N


class BlockCoeffVector:
    """Coefficients blocked by total degree n = 0..N, block n of length n + 1.

    ``tag`` identifies the basis (domain and parameters); binary operations
    require matching tags.
    """

    __slots__ = ("data", "N", "tag")

    def __init__(self, data, tag=None):
        data = np.asarray(data, dtype=float)
        self.N = degree_of_size(data.size)
        self.data = data
        self.tag = tag

    @classmethod
    def zeros(cls, N, tag=None):
        return cls(np.zeros(total_size(N)), tag)

    @classmethod
    def unit(cls, N, n, k, tag=None):
        v = cls.zeros(N, tag)
        v.data[total_size(n - 1) + k] = 1.0
        return v

    @classmethod
    def from_blocks(cls, blocks, tag=None):
        return cls(np.concatenate([np.asarray(b, dtype=float) for b in blocks]), tag)

    def block(self, n):
        s = total_size(n - 1)
        return self.data[s:s + n + 1]

    def blocks(self):
        return [self.block(n) for n in range(self.N + 1)]

    def truncated(self, N):
        """Copy restricted (or zero-padded) to degree N."""
        out = np.zeros(total_size(N))
        m = min(out.size, self.data.size)
        out[:m] = self.data[:m]
        return BlockCoeffVector(out, self.tag)

    def _check(self, other):
        if isinstance(other, BlockCoeffVector):
            if self.tag is not None and other.tag is not None and self.tag != other.tag:
                raise ValueError("basis tags differ")
            if other.N != self.N:
                raise ValueError("degree mismatch")
            return other.data
        return other

    def __add__(self, other):
        return BlockCoeffVector(self.data + self._check(other), self.tag)

    def __sub__(self, other):
        return BlockCoeffVector(self.data - self._check(other), self.tag)

    def __mul__(self, s):
        return BlockCoeffVector(self.data * float(s), self.tag)

    __rmul__ = __mul__

    def __neg__(self):
        return BlockCoeffVector(-self.data, self.tag)

    def __len__(self):
        return self.data.size

    def __repr__(self):
        return f"BlockCoeffVector(N={self.N}, tag={self.tag!r})"


class BBBMatrix:
    """Banded-block-banded matrix with degree-indexed blocks.

    Parameters
    ----------
    nrows, ncols : int
        Number of row and column degree blocks (row block i has i + 1 rows).
    bandwidths : (L, U)
        Block-bandwidths, -L <= j - i <= U.
    subbandwidths : (lam, mu)
        Bandwidths inside each block, -lam <= s - r <= mu.
    blocks : dict, optional
        Mapping (i, j) -> band array of shape (lam + mu + 1, i + 1).
    """

    def __init__(self, nrows, ncols, bandwidths, subbandwidths, blocks=None,
                 domain_tag=None, range_tag=None):
        self.nrows = int(nrows)
        self.ncols = int(ncols)
        self.L, self.U = (int(v) for v in bandwidths)
        self.lam, self.mu = (int(v) for v in subbandwidths)
        if self.L + self.U < 0 or self.lam + self.mu < 0:
            raise ValueError("empty band")
        self.blocks = {}
        self.domain_tag = domain_tag
        self.range_tag = range_tag
        self._lu = None
        self._lock = threading.Lock()
        for (i, j), data in (blocks or {}).items():
            self._store(i, j, np.asarray(data, dtype=float))

    # -- structure ------------------------------------------------------------

    @property
    def width(self):
        return self.lam + self.mu + 1

    @property
    def shape(self):
        return total_size(self.nrows - 1), total_size(self.ncols - 1)

    def block_range(self, i):
        """Column blocks that may be stored in block row i."""
        return range(max(0, i - self.L), min(self.ncols, i + self.U + 1))

    def _check_block(self, i, j):
        if not (0 <= i < self.nrows and 0 <= j < self.ncols):
            raise IndexError(f"block ({i}, {j}) outside {self.nrows}x{self.ncols}")
        if not (-self.L <= j - i <= self.U):
            raise IndexError(f"block ({i}, {j}) outside block-bandwidths ({self.L}, {self.U})")

    def _store(self, i, j, data):
        self._check_block(i, j)
        if data.shape != (self.width, i + 1):
            raise ValueError(f"block ({i}, {j}) has shape {data.shape}, want {(self.width, i + 1)}")
        self.blocks[(i, j)] = data
        self._lu = None

    def get_block(self, i, j, create=False):
        key = (i, j)
        if key not in self.blocks:
            if not create:
                return None
            self._store(i, j, np.zeros((self.width, i + 1)))
        return self.blocks[key]

    def _valid_mask(self, i, j):
        # band positions whose column index lands inside block column j
        r = np.arange(i + 1)
        o = np.arange(-self.lam, self.mu + 1)[:, None]
        c = r + o
        return (c >= 0) & (c <= j)

    def set_entry(self, i, j, r, s, value):
        o = s - r
        if not (-self.lam <= o <= self.mu):
            raise IndexError(f"entry ({r}, {s}) outside sub-bandwidths ({self.lam}, {self.mu})")
        if not (0 <= r <= i and 0 <= s <= j):
            raise IndexError("entry outside block")
        self.get_block(i, j, create=True)[o + self.lam, r] = value
        self._lu = None

    def entry(self, i, j, r, s):
        data = self.get_block(i, j)
        o = s - r
        if data is None or not (-self.lam <= o <= self.mu):
            return 0.0
        return float(data[o + self.lam, r])

    @property
    def nbytes(self):
        """Bytes held by the stored band arrays."""
        return sum(d.nbytes for d in self.blocks.values())

    def copy(self):
        return BBBMatrix(self.nrows, self.ncols, (self.L, self.U), (self.lam, self.mu),
                         {k: v.copy() for k, v in self.blocks.items()},
                         self.domain_tag, self.range_tag)

    # -- conversions ----------------------------------------------------------

    def _coo(self):
        ro, co = block_offsets(self.nrows), block_offsets(self.ncols)
        rows, cols, vals = [], [], []
        offs = np.arange(-self.lam, self.mu + 1)[:, None]
        for (i, j), data in self.blocks.items():
            r = np.broadcast_to(np.arange(i + 1), data.shape)
            c = r + offs
            m = (c >= 0) & (c <= j) & (data != 0)
            rows.append(ro[i] + r[m])
            cols.append(co[j] + c[m])
            vals.append(data[m])
        if not rows:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    def to_scipy(self, fmt="csr"):
        r, c, v = self._coo()
        return sp.coo_matrix((v, (r, c)), shape=self.shape).asformat(fmt)

    def to_dense(self):
        return self.to_scipy("csr").toarray()

    @classmethod
    def from_dense(cls, dense, nrows, ncols, bandwidths, subbandwidths, tol=0.0):
        """Pack a dense matrix, checking that nothing outside the bands exceeds tol."""
        dense = np.asarray(dense, dtype=float)
        out = cls(nrows, ncols, bandwidths, subbandwidths)
        if dense.shape != out.shape:
            raise ValueError(f"dense shape {dense.shape} != {out.shape}")
        ro, co = block_offsets(nrows), block_offsets(ncols)
        kept = np.zeros(dense.shape, dtype=bool)
        offs = np.arange(-out.lam, out.mu + 1)[:, None]
        for i in range(nrows):
            for j in out.block_range(i):
                sub = dense[ro[i]:ro[i + 1], co[j]:co[j + 1]]
                r = np.broadcast_to(np.arange(i + 1), (out.width, i + 1))
                c = r + offs
                m = (c >= 0) & (c <= j)
                data = np.zeros((out.width, i + 1))
                data[m] = sub[r[m], c[m]]
                kept[ro[i] + r[m], co[j] + c[m]] = True
                if np.any(data):
                    out.blocks[(i, j)] = data
        outside = np.abs(dense[~kept]).max(initial=0.0)
        if outside > tol:
            raise ValueError(f"entry of size {outside:.3e} outside the declared bands")
        return out

    @classmethod
    def from_scipy(cls, mat, nrows, ncols, bandwidths, subbandwidths, tol=0.0):
        return cls.from_dense(mat.toarray() if sp.issparse(mat) else mat, nrows, ncols,
                              bandwidths, subbandwidths, tol)

    @classmethod
    def from_coo(cls, mat, nrows, ncols, bandwidths, subbandwidths, tol=0.0):
        """Pack a scipy sparse matrix without densifying it."""
        coo = sp.coo_matrix(mat)
        out = cls(nrows, ncols, bandwidths, subbandwidths)
        if coo.shape != out.shape:
            raise ValueError(f"sparse shape {coo.shape} != {out.shape}")
        ro, co = block_offsets(nrows), block_offsets(ncols)
        bi = np.searchsorted(ro, coo.row, side="right") - 1
        bj = np.searchsorted(co, coo.col, side="right") - 1
        return out._fill(bi, bj, coo.row - ro[bi], coo.col - co[bj], coo.data, tol)

    @classmethod
    def from_triplets(cls, nrows, ncols, bandwidths, subbandwidths, bi, bj, si, sj, values,
                      domain_tag=None, range_tag=None, tol=0.0):
        """Pack (block_i, block_j, sub_i, sub_j, value) arrays; duplicates are summed."""
        out = cls(nrows, ncols, bandwidths, subbandwidths,
                  domain_tag=domain_tag, range_tag=range_tag)
        return out._fill(np.asarray(bi), np.asarray(bj), np.asarray(si), np.asarray(sj),
                         np.asarray(values, dtype=float), tol)

    def _fill(self, bi, bj, si, sj, v, tol):
        inside = ((-self.L <= bj - bi) & (bj - bi <= self.U)
                  & (-self.lam <= sj - si) & (sj - si <= self.mu))
        if np.any(~inside):
            worst = np.abs(v[~inside]).max()
            if worst > tol:
                raise ValueError(f"entry of size {worst:.3e} outside the declared bands")
            bi, bj, si, sj, v = bi[inside], bj[inside], si[inside], sj[inside], v[inside]
        if v.size == 0:
            return self
        order = np.lexsort((bj, bi))
        bi, bj, si, sj, v = bi[order], bj[order], si[order], sj[order], v[order]
        keys = bi * (self.ncols + 1) + bj
        starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
        ends = np.r_[starts[1:], keys.size]
        for s0, s1 in zip(starts, ends):
            data = self.get_block(int(bi[s0]), int(bj[s0]), create=True)
            np.add.at(data, (sj[s0:s1] - si[s0:s1] + self.lam, si[s0:s1]), v[s0:s1])
        return self

    @classmethod
    def identity(cls, nblocks, value=1.0, tag=None):
        blocks = {(i, i): np.full((1, i + 1), float(value)) for i in range(nblocks)}
        return cls(nblocks, nblocks, (0, 0), (0, 0), blocks, tag, tag)

    @classmethod
    def diagonal(cls, values, tag=None):
        """Diagonal matrix from a full coefficient-length array."""
        values = np.asarray(values, dtype=float)
        nb = degree_of_size(values.size) + 1
        off = block_offsets(nb)
        blocks = {(i, i): values[off[i]:off[i + 1]][None, :].copy() for i in range(nb)}
        return cls(nb, nb, (0, 0), (0, 0), blocks, tag, tag)

    # -- measured structure ---------------------------------------------------

    def measured_bandwidths(self, tol=0.0):
        """Smallest (L, U), (lam, mu) covering all entries larger than tol."""
        L = U = lam = mu = None
        offs = np.arange(-self.lam, self.mu + 1)
        for (i, j), data in self.blocks.items():
            m = (np.abs(data) > tol) & self._valid_mask(i, j)
            if not m.any():
                continue
            d = j - i
            L = -d if L is None else max(L, -d)
            U = d if U is None else max(U, d)
            rows_used = offs[m.any(axis=1)]
            lam = -rows_used.min() if lam is None else max(lam, -rows_used.min())
            mu = rows_used.max() if mu is None else max(mu, rows_used.max())
        if L is None:
            return None, None
        return (int(L), int(U)), (int(lam), int(mu))

    def rebanded(self, bandwidths, subbandwidths, tol=0.0):
        """Re-pack under new bandwidths; entries dropped must not exceed tol."""
        out = BBBMatrix(self.nrows, self.ncols, bandwidths, subbandwidths,
                        domain_tag=self.domain_tag, range_tag=self.range_tag)
        worst = 0.0
        for (i, j), data in self.blocks.items():
            valid = self._valid_mask(i, j)
            if not (-out.L <= j - i <= out.U):
                worst = max(worst, np.abs(data[valid]).max(initial=0.0))
                continue
            new = np.zeros((out.width, i + 1))
            for o in range(-self.lam, self.mu + 1):
                row = data[o + self.lam] * valid[o + self.lam]
                if -out.lam <= o <= out.mu:
                    new[o + out.lam] = row
                else:
                    worst = max(worst, np.abs(row).max(initial=0.0))
            out.blocks[(i, j)] = new
        if worst > tol:
            raise ValueError(f"rebanding would drop an entry of size {worst:.3e}")
        return out

    # -- arithmetic -----------------------------------------------------------

    def matvec(self, v):
        """Structured product A v; accepts arrays or BlockCoeffVector."""
        tagged = isinstance(v, BlockCoeffVector)
        if tagged and self.domain_tag is not None and v.tag is not None and v.tag != self.domain_tag:
            raise ValueError("vector basis does not match the operator's domain")
        x = v.data if tagged else np.asarray(v, dtype=float)
        if x.shape[0] != self.shape[1]:
            raise ValueError(f"length {x.shape[0]} does not match {self.shape[1]} columns")
        ro, co = block_offsets(self.nrows), block_offsets(self.ncols)
        y = np.zeros((self.shape[0],) + x.shape[1:])
        for (i, j), data in self.blocks.items():
            xj = x[co[j]:co[j + 1]]
            yi = y[ro[i]:ro[i + 1]]
            for o in range(-self.lam, self.mu + 1):
                r0, r1 = max(0, -o), min(i + 1, j + 1 - o)
                if r1 <= r0:
                    continue
                coef = data[o + self.lam, r0:r1]
                if x.ndim > 1:
                    coef = coef[:, None]
                yi[r0:r1] += coef * xj[r0 + o:r1 + o]
        if tagged:
            return BlockCoeffVector(y, self.range_tag)
        return y

    def transpose(self):
        out = BBBMatrix(self.ncols, self.nrows, (self.U, self.L), (self.mu, self.lam),
                        domain_tag=self.range_tag, range_tag=self.domain_tag)
        for (i, j), data in self.blocks.items():
            new = np.zeros((out.width, j + 1))
            for o in range(-self.lam, self.mu + 1):
                r0, r1 = max(0, -o), min(i + 1, j + 1 - o)
                if r1 > r0:
                    # entry (r, r + o) becomes (r + o, r), offset -o
                    new[-o + out.lam, r0 + o:r1 + o] = data[o + self.lam, r0:r1]
            out.blocks[(j, i)] = new
        return out

    @property
    def T(self):
        return self.transpose()

    def _same_shape(self, other):
        if (self.nrows, self.ncols) != (other.nrows, other.ncols):
            raise ValueError(f"block shapes {(self.nrows, self.ncols)} and "
                             f"{(other.nrows, other.ncols)} differ")

    def add(self, other, scale=1.0):
        """self + scale * other, on the union of the two band structures."""
        self._same_shape(other)
        for a, b in ((self.domain_tag, other.domain_tag), (self.range_tag, other.range_tag)):
            if a is not None and b is not None and a != b:
                raise ValueError("added operators act between different bases")
        L, U = max(self.L, other.L), max(self.U, other.U)
        lam, mu = max(self.lam, other.lam), max(self.mu, other.mu)
        out = BBBMatrix(self.nrows, self.ncols, (L, U), (lam, mu),
                        domain_tag=self.domain_tag or other.domain_tag,
                        range_tag=self.range_tag or other.range_tag)
        for mat, s in ((self, 1.0), (other, scale)):
            for (i, j), data in mat.blocks.items():
                tgt = out.get_block(i, j, create=True)
                tgt[lam - mat.lam:lam - mat.lam + mat.width] += s * data
        return out

    def __add__(self, other):
        return self.add(other)

    def __sub__(self, other):
        return self.add(other, -1.0)

    def scaled(self, s):
        return BBBMatrix(self.nrows, self.ncols, (self.L, self.U), (self.lam, self.mu),
                         {k: s * v for k, v in self.blocks.items()},
                         self.domain_tag, self.range_tag)

    def __mul__(self, s):
        return self.scaled(float(s))

    __rmul__ = __mul__

    def __neg__(self):
        return self.scaled(-1.0)

    def compose(self, other):
        """Matrix product self @ other, exploiting both band structures."""
        if self.ncols != other.nrows:
            raise ValueError(f"inner block dimensions differ: {self.ncols} vs {other.nrows}")
        if (self.domain_tag is not None and other.range_tag is not None
                and self.domain_tag != other.range_tag):
            raise ValueError("composed operators disagree on the intermediate basis")
        out = BBBMatrix(self.nrows, other.ncols, (self.L + other.L, self.U + other.U),
                        (self.lam + other.lam, self.mu + other.mu),
                        domain_tag=other.domain_tag, range_tag=self.range_tag)
        by_row = {}
        for (j, k), data in other.blocks.items():
            by_row.setdefault(j, []).append((k, data))
        for (i, j), a in self.blocks.items():
            for k, b in by_row.get(j, ()):
                c = out.get_block(i, k, create=True)
                for oa in range(-self.lam, self.mu + 1):
                    # rows r where the intermediate index s = r + oa is valid
                    r0, r1 = max(0, -oa), min(i + 1, j + 1 - oa)
                    if r1 <= r0:
                        continue
                    av = a[oa + self.lam, r0:r1]
                    if not av.any():
                        continue
                    for ob in range(-other.lam, other.mu + 1):
                        # column t = s + ob must be inside block k
                        s0 = max(r0 + oa, -ob)
                        s1 = min(r1 + oa, k + 1 - ob)
                        if s1 <= s0:
                            continue
                        bv = b[ob + other.lam, s0:s1]
                        c[oa + ob + out.lam, s0 - oa:s1 - oa] += av[s0 - oa - r0:s1 - oa - r0] * bv
        return out

    def __matmul__(self, other):
        if isinstance(other, BBBMatrix):
            return self.compose(other)
        return self.matvec(other)

    def truncate(self, nrows, ncols=None):
        """Keep row blocks < nrows and column blocks < ncols."""
        ncols = nrows if ncols is None else ncols
        out = BBBMatrix(nrows, ncols, (self.L, self.U), (self.lam, self.mu),
                        domain_tag=self.domain_tag, range_tag=self.range_tag)
        for (i, j), data in self.blocks.items():
            if i < nrows and j < ncols:
                out.blocks[(i, j)] = data.copy()
        return out

    def square(self, N):
        """Square truncation to degree blocks 0..N on both sides."""
        return self.truncate(N + 1, N + 1)

    # -- export ---------------------------------------------------------------

    def spy_export(self, path=None, tol=0.0):
        """Nonzero pattern as (block_i, block_j, sub_i, sub_j, value) rows."""
        rows = []
        offs = np.arange(-self.lam, self.mu + 1)
        for (i, j) in sorted(self.blocks):
            data = self.blocks[(i, j)]
            m = (np.abs(data) > tol) & self._valid_mask(i, j)
            for oi, r in zip(*np.nonzero(m)):
                rows.append((i, j, int(r), int(r + offs[oi]), float(data[oi, r])))
        rows.sort()
        if path is not None:
            with open(path, "w") as fh:
                fh.write("block_i,block_j,sub_i,sub_j,value\n")
                for row in rows:
                    fh.write("%d,%d,%d,%d,%.17g\n" % row)
        return rows

    # -- solve ----------------------------------------------------------------

    def _factor(self):
        with self._lock:
            if self._lu is None:
                if self.shape[0] != self.shape[1]:
                    raise ValueError("solve needs a square matrix; truncate first")
                A = self.to_scipy("csc")
                try:
                    self._lu = ("lu", spla.splu(A, permc_spec="COLAMD"), A)
                except RuntimeError as exc:
                    raise NumericalFailure(f"sparse LU failed: {exc}",
                                           condition=float("inf")) from exc
            return self._lu

    def condition_estimate(self):
        """1-norm condition estimate from the sparse LU factors."""
        _, lu, A = self._factor()
        n = A.shape[0]
        inv = spla.LinearOperator((n, n), matvec=lu.solve,
                                  rmatvec=lambda v: lu.solve(v, trans="T"))
        return float(spla.onenormest(A) * spla.onenormest(inv))

    def solve(self, f, tol=None):
        """Solve A u = f by sparse LU with iterative refinement.

        Raises
        ------
        NumericalFailure
            If the residual stays above tol * ||f|| after refinement.
        """
        tols = settings.TOL
        tol = tols.solve_residual if tol is None else tol
        tagged = isinstance(f, BlockCoeffVector)
        b = f.data if tagged else np.asarray(f, dtype=float)
        bnorm = np.abs(b).max(initial=0.0)
        small = self.shape[0] <= tols.qr_fallback_max
        try:
            _, lu, A = self._factor()
        except NumericalFailure:
            # exactly singular pivots: only the rank-revealing fallback can help
            if not small:
                raise
            lu, A = None, self.to_scipy("csc")
        if lu is not None:
            u = lu.solve(b)
            res = b - A @ u
            for _ in range(tols.refine_steps):
                if np.abs(res).max(initial=0.0) <= tol * bnorm:
                    break
                u = u + lu.solve(res)
                res = b - A @ u
            rel = np.abs(res).max(initial=0.0) / bnorm if bnorm else 0.0
        if (lu is None or not np.all(np.isfinite(u)) or rel > tol) and small:
            u, rel = self._qr_solve(A, b, bnorm)
        if not np.all(np.isfinite(u)) or rel > tol:
            cond = self.condition_estimate() if lu is not None else float("inf")
            raise NumericalFailure("BBB solve missed its residual target", residual=rel,
                                   condition=cond)
        if tagged:
            return BlockCoeffVector(u, self.domain_tag)
        return u

    @staticmethod
    def _qr_solve(A, b, bnorm):
        """Dense column-pivoted QR solve, the fallback for ill-conditioned systems.

        Pivots below n * eps * |R_00| are treated as zero (basic solution).
        """
        Q, R, perm = sla.qr(A.toarray(), pivoting=True)
        d = np.abs(np.diag(R))
        tiny = d[0] * R.shape[0] * np.finfo(float).eps if d.size else 0.0
        rank = int(np.count_nonzero(d > tiny))
        z = np.zeros(R.shape[1])
        if rank:
            z[:rank] = sla.solve_triangular(R[:rank, :rank], (Q.T @ b)[:rank])
        u = np.empty_like(z)
        u[perm] = z
        res = b - A @ u
        return u, (np.abs(res).max(initial=0.0) / bnorm if bnorm else 0.0)

    def __repr__(self):
        return (f"BBBMatrix({self.nrows}x{self.ncols} blocks, bw=({self.L},{self.U}), "
                f"sub=({self.lam},{self.mu}), stored={len(self.blocks)})")


def zero_like(nrows, ncols, tag_in=None, tag_out=None):
    return BBBMatrix(nrows, ncols, (0, 0), (0, 0), domain_tag=tag_in, range_tag=tag_out)
