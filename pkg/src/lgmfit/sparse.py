"""Symmetric sparse matrices and simplicial sparse Cholesky factorization.

Storage is compressed lower-triangle CSC.  Factorization is up-looking
(row-by-row) on a fill-reducing greedy minimum-degree permutation, with
the symbolic analysis (elimination tree, row patterns, factor structure)
computed once per sparsity pattern and reused across refactorizations.
Numeric kernels are numba-compiled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "SparseSymmetric",
    "CholeskyFactor",
    "SymbolicCholesky",
    "NotPositiveDefiniteError",
    "factorize",
    "solve",
    "logdet",
    "partial_inverse_diagonal",
    "minimum_degree",
    "write_matrix_market",
    "read_matrix_market",
]


class NotPositiveDefiniteError(ArithmeticError):
    """Factorization hit a non-positive pivot."""

    def __init__(self, pivot: int):
        self.pivot = int(pivot)
        super().__init__(f"matrix is not positive definite (pivot at index {pivot})")


class SparseSymmetric:
    """Symmetric matrix stored as its lower triangle in CSC form.

    Column indices are sorted and duplicate entries merged.  Instances are
    treated as immutable.
    """

    def __init__(self, n: int, colptr, rowidx, vals):
        self.n = int(n)
        self.colptr = np.asarray(colptr, dtype=np.int64)
        self.rowidx = np.asarray(rowidx, dtype=np.int64)
        self.vals = np.asarray(vals, dtype=np.float64)
        if self.colptr.shape != (self.n + 1,):
            raise ValueError("column pointer length inconsistent with dimension")
        if self.rowidx.shape != self.vals.shape:
            raise ValueError("row index / value length mismatch")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_entries(cls, n, rows, cols, vals) -> "SparseSymmetric":
        """Build from (row, col, val) triplets; mirrored duplicates merge."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        lo = np.minimum(rows, cols)
        hi = np.maximum(rows, cols)
        key = lo * n + hi  # sort by column then row
        order = np.argsort(key, kind="stable")
        key, hi, lo, vals = key[order], hi[order], lo[order], vals[order]
        if key.size:
            uniq, inv = np.unique(key, return_inverse=True)
            merged = np.bincount(inv, weights=vals)
            r = (uniq % n).astype(np.int64)
            c = (uniq // n).astype(np.int64)
        else:
            merged = vals
            r = hi
            c = lo
        colptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(colptr, c + 1, 1)
        np.cumsum(colptr, out=colptr)
        return cls(n, colptr, r, merged)

    @classmethod
    def from_dense(cls, A, tol: float = 0.0) -> "SparseSymmetric":
        A = np.asarray(A, dtype=float)
        n = A.shape[0]
        r, c = np.nonzero(np.abs(np.tril(A)) > tol)
        return cls.from_entries(n, r, c, A[r, c])

    @classmethod
    def identity(cls, n: int) -> "SparseSymmetric":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    # -- basics ---------------------------------------------------------------

    @property
    def nnz(self) -> int:
        return self.vals.size

    def to_dense(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for j in range(self.n):
            sl = slice(self.colptr[j], self.colptr[j + 1])
            A[self.rowidx[sl], j] = self.vals[sl]
            A[j, self.rowidx[sl]] = self.vals[sl]
        return A

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.n)
        for j in range(self.n):
            sl = slice(self.colptr[j], self.colptr[j + 1])
            rows = self.rowidx[sl]
            hit = rows == j
            if hit.any():
                d[j] = self.vals[sl][hit][0]
        return d

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return _sym_matvec(self.colptr, self.rowidx, self.vals, x)

    def triplets(self):
        rows = self.rowidx
        cols = np.repeat(np.arange(self.n), np.diff(self.colptr))
        return rows, cols, self.vals

    def scaled(self, s: float) -> "SparseSymmetric":
        return SparseSymmetric(self.n, self.colptr, self.rowidx, self.vals * float(s))

    def plus(self, other: "SparseSymmetric") -> "SparseSymmetric":
        if other.n != self.n:
            raise ValueError("dimension mismatch")
        r1, c1, v1 = self.triplets()
        r2, c2, v2 = other.triplets()
        return SparseSymmetric.from_entries(
            self.n, np.concatenate([r1, r2]), np.concatenate([c1, c2]),
            np.concatenate([v1, v2]))

    def plus_diagonal(self, lam) -> "SparseSymmetric":
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (self.n,))
        r, c, v = self.triplets()
        idx = np.arange(self.n)
        return SparseSymmetric.from_entries(
            self.n, np.concatenate([r, idx]), np.concatenate([c, idx]),
            np.concatenate([v, lam]))

    def extract(self, rows, cols) -> np.ndarray:
        """Values at (rows, cols); entries absent from the pattern give 0."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        lo = np.minimum(rows, cols)
        hi = np.maximum(rows, cols)
        return _extract(self.colptr, self.rowidx, self.vals, hi, lo)

    def same_pattern(self, other: "SparseSymmetric") -> bool:
        return (self.n == other.n
                and np.array_equal(self.colptr, other.colptr)
                and np.array_equal(self.rowidx, other.rowidx))

    def pattern_key(self):
        return (self.n, self.colptr.tobytes(), self.rowidx.tobytes())


# -- Matrix Market ----------------------------------------------------------


def write_matrix_market(A: SparseSymmetric, path) -> None:
    from scipy.io import mmwrite
    from scipy.sparse import coo_matrix

    r, c, v = A.triplets()
    coo = coo_matrix((v, (r, c)), shape=(A.n, A.n))
    mmwrite(str(path), coo, symmetry="symmetric")


def read_matrix_market(path) -> SparseSymmetric:
    from scipy.io import mmread

    coo = mmread(str(path)).tocoo()
    if coo.shape[0] != coo.shape[1]:
        raise ValueError("expected a square matrix")
    keep = coo.row >= coo.col
    return SparseSymmetric.from_entries(
        coo.shape[0], coo.row[keep], coo.col[keep], coo.data[keep])


# -- ordering ----------------------------------------------------------------


def minimum_degree(A: SparseSymmetric) -> np.ndarray:
    """Greedy minimum-degree ordering; returns perm with perm[new] = old."""
    n = A.n
    adj: list[set[int]] = [set() for _ in range(n)]
    for j in range(n):
        for p in range(A.colptr[j], A.colptr[j + 1]):
            i = int(A.rowidx[p])
            if i != j:
                adj[i].add(j)
                adj[j].add(i)
    import heapq

    heap = [(len(adj[v]), v) for v in range(n)]
    heapq.heapify(heap)
    eliminated = np.zeros(n, dtype=bool)
    perm = np.empty(n, dtype=np.int64)
    k = 0
    while k < n:
        d, v = heapq.heappop(heap)
        if eliminated[v] or d != len(adj[v]):
            continue
        perm[k] = v
        k += 1
        eliminated[v] = True
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au |= nbrs
            au.discard(u)
            au.discard(v)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return perm


# -- symbolic / numeric factorization ----------------------------------------


def _permute_to_upper(A: SparseSymmetric, perm: np.ndarray):
    """Upper-triangle CSC of P A P' for the up-looking kernel."""
    n = A.n
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n, dtype=np.int64)
    r, c, v = A.triplets()
    pr, pc = inv[r], inv[c]
    hi = np.maximum(pr, pc)  # becomes the column (upper storage by column)
    lo = np.minimum(pr, pc)
    order = np.lexsort((lo, hi))
    hi, lo, v = hi[order], lo[order], v[order]
    colptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(colptr, hi + 1, 1)
    np.cumsum(colptr, out=colptr)
    return colptr, lo, v


def _etree_and_rowpat(n, Up, Ui):
    """Elimination tree and per-row reach patterns (ascending column order).

    Phase 1 is the classic path-compressed etree build; phase 2 walks the
    final parent pointers to collect the pattern of each factor row.
    """
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Up[k], Up[k + 1]):
            i = int(Ui[p])
            while i != -1 and i < k:
                nxt = ancestor[i]
                ancestor[i] = k
                if nxt == -1:
                    parent[i] = k
                i = nxt
    mark = np.full(n, -1, dtype=np.int64)
    rowpats = []
    for k in range(n):
        pat = []
        mark[k] = k
        for p in range(Up[k], Up[k + 1]):
            i = int(Ui[p])
            while i != -1 and i < k and mark[i] != k:
                pat.append(i)
                mark[i] = k
                i = int(parent[i])
        rowpats.append(sorted(pat))
    return parent, rowpats


class SymbolicCholesky:
    """Reusable symbolic analysis for one sparsity pattern."""

    def __init__(self, A: SparseSymmetric, ordering: str = "md"):
        n = A.n
        if ordering == "md":
            self.perm = minimum_degree(A)
        elif ordering == "natural":
            self.perm = np.arange(n, dtype=np.int64)
        else:
            raise ValueError(f"unknown ordering {ordering!r}")
        self.n = n
        self._pattern_key = A.pattern_key()
        Up, Ui, _ = _permute_to_upper(A, self.perm)
        self._Up = Up
        self._Ui = Ui
        parent, rowpats = _etree_and_rowpat(n, Up, Ui)
        self.parent = parent
        # factor structure: column j holds [diag, then rows k ascending]
        counts = np.ones(n, dtype=np.int64)
        for k, pat in enumerate(rowpats):
            for j in pat:
                counts[j] += 1
        Lp = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=Lp[1:])
        Li = np.empty(Lp[-1], dtype=np.int64)
        fill = Lp[:-1].copy()
        for j in range(n):
            Li[fill[j]] = j
            fill[j] += 1
        for k, pat in enumerate(rowpats):
            for j in pat:
                Li[fill[j]] = k
                fill[j] += 1
        self.Lp = Lp
        self.Li = Li
        flat = np.concatenate([np.asarray(p, dtype=np.int64) for p in rowpats]) \
            if rowpats else np.zeros(0, dtype=np.int64)
        lens = np.array([len(p) for p in rowpats], dtype=np.int64)
        self.row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(lens, out=self.row_ptr[1:])
        self.row_pat = flat

    def factorize(self, A: SparseSymmetric) -> "CholeskyFactor":
        if A.pattern_key() != self._pattern_key:
            raise ValueError("matrix pattern differs from symbolic analysis")
        Up, Ui, Ux = _permute_to_upper(A, self.perm)
        Lx = np.zeros(self.Li.size)
        piv = _chol_numeric(self.n, Up, Ui, Ux, self.Lp, self.Li,
                            self.row_ptr, self.row_pat, Lx)
        if piv >= 0:
            raise NotPositiveDefiniteError(int(self.perm[piv]))
        return CholeskyFactor(self, Lx)


@dataclass
class CholeskyFactor:
    """Lower-triangular factor with P A P' = L L'."""

    symbolic: SymbolicCholesky
    Lx: np.ndarray

    @property
    def n(self) -> int:
        return self.symbolic.n

    @property
    def perm(self) -> np.ndarray:
        return self.symbolic.perm

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        single = rhs.ndim == 1
        B = rhs[:, None] if single else rhs
        if B.shape[0] != self.n:
            raise ValueError(f"rhs has {B.shape[0]} rows, expected {self.n}")
        s = self.symbolic
        out = np.empty_like(B, dtype=float)
        for k in range(B.shape[1]):
            y = B[s.perm, k].copy()
            _lsolve(s.Lp, s.Li, self.Lx, y)
            _ltsolve(s.Lp, s.Li, self.Lx, y)
            out[s.perm, k] = y
        return out[:, 0] if single else out

    def logdet(self) -> float:
        s = self.symbolic
        d = self.Lx[s.Lp[:-1]]
        return float(2.0 * np.sum(np.log(d)))

    def solve_Lt(self, z) -> np.ndarray:
        """x = P' L^-T z: maps iid standard normals to N(0, A^-1) draws."""
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        Z = z[:, None] if single else z
        s = self.symbolic
        out = np.empty_like(Z, dtype=float)
        for k in range(Z.shape[1]):
            y = Z[:, k].copy()
            _ltsolve(s.Lp, s.Li, self.Lx, y)
            out[s.perm, k] = y
        return out[:, 0] if single else out

    def partial_inverse(self) -> SparseSymmetric:
        """Entries of A^-1 on the factor pattern (original ordering)."""
        s = self.symbolic
        Zx = np.zeros_like(self.Lx)
        _takahashi(s.Lp, s.Li, self.Lx, Zx)
        rows = s.Li
        cols = np.repeat(np.arange(self.n), np.diff(s.Lp))
        return SparseSymmetric.from_entries(
            self.n, s.perm[rows], s.perm[cols], Zx)

    def partial_inverse_diagonal(self) -> np.ndarray:
        s = self.symbolic
        Zx = np.zeros_like(self.Lx)
        _takahashi(s.Lp, s.Li, self.Lx, Zx)
        d = np.empty(self.n)
        d[s.perm] = Zx[s.Lp[:-1]]
        return d


# -- module-level convenience (the spec's operation surface) ------------------


def factorize(A: SparseSymmetric, ordering: str = "md",
              symbolic: SymbolicCholesky | None = None) -> CholeskyFactor:
    if symbolic is None:
        symbolic = SymbolicCholesky(A, ordering=ordering)
    return symbolic.factorize(A)


def solve(F: CholeskyFactor, rhs) -> np.ndarray:
    return F.solve(rhs)


def logdet(F: CholeskyFactor) -> float:
    return F.logdet()


def partial_inverse_diagonal(F: CholeskyFactor) -> np.ndarray:
    return F.partial_inverse_diagonal()


# -- numba kernels ------------------------------------------------------------


@njit(cache=True)
def _sym_matvec(colptr, rowidx, vals, x):
    n = colptr.size - 1
    y = np.zeros(n)
    for j in range(n):
        xj = x[j]
        for p in range(colptr[j], colptr[j + 1]):
            i = rowidx[p]
            v = vals[p]
            y[i] += v * xj
            if i != j:
                y[j] += v * x[i]
    return y


@njit(cache=True)
def _extract(colptr, rowidx, vals, rows, cols):
    out = np.zeros(rows.size)
    for k in range(rows.size):
        j = cols[k]
        i = rows[k]
        lo = colptr[j]
        hi = colptr[j + 1]
        while lo < hi:
            mid = (lo + hi) // 2
            if rowidx[mid] < i:
                lo = mid + 1
            else:
                hi = mid
        if lo < colptr[j + 1] and rowidx[lo] == i:
            out[k] = vals[lo]
    return out


@njit(cache=True)
def _chol_numeric(n, Up, Ui, Ux, Lp, Li, row_ptr, row_pat, Lx):
    """Up-looking Cholesky on precomputed structure; returns failing pivot or -1."""
    x = np.zeros(n)
    nfilled = np.zeros(n, dtype=np.int64)
    for k in range(n):
        d = 0.0
        for p in range(Up[k], Up[k + 1]):
            i = Ui[p]
            if i == k:
                d = Ux[p]
            else:
                x[i] = Ux[p]
        for q in range(row_ptr[k], row_ptr[k + 1]):
            j = row_pat[q]
            xj = x[j]
            x[j] = 0.0
            ljj = Lx[Lp[j]]
            lkj = xj / ljj
            base = Lp[j] + 1
            for p in range(base, base + nfilled[j]):
                x[Li[p]] -= Lx[p] * lkj
            d -= lkj * lkj
            Lx[base + nfilled[j]] = lkj
            nfilled[j] += 1
        if d <= 0.0 or not np.isfinite(d):
            return k
        Lx[Lp[k]] = np.sqrt(d)
    return -1


@njit(cache=True)
def _lsolve(Lp, Li, Lx, x):
    n = Lp.size - 1
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        xj = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            x[Li[p]] -= Lx[p] * xj
    return x


@njit(cache=True)
def _ltsolve(Lp, Li, Lx, x):
    n = Lp.size - 1
    for j in range(n - 1, -1, -1):
        s = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            s -= Lx[p] * x[Li[p]]
        x[j] = s / Lx[Lp[j]]
    return x


@njit(cache=True)
def _z_lookup(Lp, Li, Zx, r, c):
    # entry (r, c) with r >= c from the factor-pattern storage
    lo = Lp[c]
    hi = Lp[c + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        if Li[mid] < r:
            lo = mid + 1
        else:
            hi = mid
    if lo < Lp[c + 1] and Li[lo] == r:
        return Zx[lo]
    return 0.0


@njit(cache=True)
def _takahashi(Lp, Li, Lx, Zx):
    """Erisman-Tinney recursion for inverse entries on the factor pattern."""
    n = Lp.size - 1
    for j in range(n - 1, -1, -1):
        ljj = Lx[Lp[j]]
        dj = ljj * ljj
        # entries of column j, rows descending (structure is ascending)
        for q in range(Lp[j + 1] - 1, Lp[j] - 1, -1):
            i = Li[q]
            s = 0.0
            if i == j:
                s = 1.0 / dj
            for p in range(Lp[j] + 1, Lp[j + 1]):
                k = Li[p]
                lt = Lx[p] / ljj  # unit-lower factor entry
                if k >= i:
                    zki = _z_lookup(Lp, Li, Zx, k, i)
                else:
                    zki = _z_lookup(Lp, Li, Zx, i, k)
                s -= lt * zki
            Zx[q] = s
    return Zx
