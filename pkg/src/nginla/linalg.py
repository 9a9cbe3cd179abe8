"""Symmetric positive-definite kernels: Cholesky, solves, log-determinants, variances.

Precision matrices are held as :class:`SpdMatrix`, a full-storage CSC matrix
whose sparsity pattern (and the symbolic analysis of its factorization) is
shared between every matrix derived from it by diagonal updates. That is the
common case here: ``Q(theta) + diag(c)`` changes values on every Newton step
but never the pattern.

With numba available the factorization is an up-looking sparse Cholesky in the
matrix's own ordering; otherwise (or for dense inputs) LAPACK is used.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.linalg.lapack
import scipy.sparse as sp

from . import _kernels as K
from .errors import DimensionMismatch, NotPositiveDefinite

__all__ = [
    "SpdMatrix",
    "CholFactor",
    "cholesky",
    "solve",
    "logdet",
    "marginal_variances",
    "inverse",
    "PD_TOL",
]

#: pivot <= PD_TOL * max(diag(Q)) counts as a failed factorization
PD_TOL = 1e-14
SYMMETRY_TOL = 1e-12
_DENSE_FILL = 0.25


class _Pattern:
    """CSC index arrays plus a lazily computed symbolic factorization."""

    __slots__ = ("n", "indptr", "indices", "diag_pos", "_parent", "_Lp")

    def __init__(self, n, indptr, indices):
        self.n = int(n)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        diag_pos = np.empty(self.n, dtype=np.int64)
        for j in range(self.n):
            lo, hi = self.indptr[j], self.indptr[j + 1]
            hit = np.flatnonzero(self.indices[lo:hi] == j)
            diag_pos[j] = lo + hit[0]
        self.diag_pos = diag_pos
        self._parent = None
        self._Lp = None

    @property
    def nnz(self):
        return int(self.indptr[-1])

    def symbolic(self):
        if self._Lp is None:
            self._parent = K.etree(self.n, self.indptr, self.indices)
            self._Lp = K.symbolic_cholesky(self.n, self.indptr, self.indices, self._parent)
        return self._parent, self._Lp


class SpdMatrix:
    """Symmetric matrix in full CSC storage with explicit diagonal entries.

    Accepts a dense array or any scipy sparse matrix. Symmetry is checked to a
    relative tolerance of 1e-12; positive definiteness is only discovered when
    the matrix is factorized.
    """

    __slots__ = ("pattern", "data")

    def __init__(self, matrix, check=True):
        if isinstance(matrix, SpdMatrix):
            self.pattern, self.data = matrix.pattern, matrix.data.copy()
            return
        if sp.issparse(matrix):
            coo = sp.coo_matrix(matrix)
        else:
            arr = np.atleast_2d(np.asarray(matrix, dtype=float))
            coo = sp.coo_matrix(arr)
        n, m = coo.shape
        if n != m or n < 1:
            raise DimensionMismatch(f"expected a non-empty square matrix, got {coo.shape}")
        if check:
            _check_symmetric(coo)
        rows = np.concatenate([coo.row, np.arange(n)])
        cols = np.concatenate([coo.col, np.arange(n)])
        vals = np.concatenate([coo.data.astype(float), np.zeros(n)])
        csc = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
        csc.sort_indices()
        self.pattern = _Pattern(n, csc.indptr, csc.indices)
        self.data = np.ascontiguousarray(csc.data, dtype=float)

    @classmethod
    def _from_parts(cls, pattern, data):
        obj = cls.__new__(cls)
        obj.pattern = pattern
        obj.data = data
        return obj

    @property
    def dim(self):
        return self.pattern.n

    @property
    def shape(self):
        return (self.dim, self.dim)

    def tocsc(self):
        p = self.pattern
        return sp.csc_matrix((self.data.copy(), p.indices.copy(), p.indptr.copy()), shape=self.shape)

    def toarray(self):
        return self.tocsc().toarray()

    def diagonal(self):
        return self.data[self.pattern.diag_pos].copy()

    def density(self):
        return self.pattern.nnz / float(self.dim * self.dim)

    def matvec(self, v):
        v = np.ascontiguousarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"vector of length {v.shape} for dimension {self.dim}")
        p = self.pattern
        if K.USE_NUMBA:
            return K.csc_matvec(p.n, p.indptr, p.indices, self.data, v)
        return self.tocsc() @ v

    def __matmul__(self, v):
        return self.matvec(v)

    def add_diagonal(self, d):
        """Return ``self + diag(d)`` sharing this matrix's pattern."""
        data = self.data.copy()
        data[self.pattern.diag_pos] += d
        return SpdMatrix._from_parts(self.pattern, data)

    def pinned(self, mask):
        """Decouple the coordinates in ``mask``: zero their rows/columns, unit diagonal.

        Factorizing the result yields the factor of the sub-matrix over the free
        coordinates (identity on the pinned ones) without changing the pattern.
        """
        mask = np.ascontiguousarray(mask, dtype=np.bool_)
        data = self.data.copy()
        p = self.pattern
        K.pin_coordinates(p.n, p.indptr, p.indices, data, p.diag_pos, mask)
        return SpdMatrix._from_parts(p, data)

    def __repr__(self):
        return f"SpdMatrix(dim={self.dim}, nnz={self.pattern.nnz})"


def _check_symmetric(coo):
    a = sp.csr_matrix(coo)
    scale = abs(a).max() if a.nnz else 0.0
    diff = a - a.T
    err = abs(diff).max() if diff.nnz else 0.0
    if err > SYMMETRY_TOL * max(scale, 1e-300):
        raise ValueError(f"matrix is not symmetric (max asymmetry {err:.3e})")


class CholFactor:
    """Lower Cholesky factor ``L`` with ``L @ L.T == Q``.

    Stored either densely or as sparse CSC arrays (``Lp``, ``Li``, ``Lx``) with
    the diagonal entry first in each column.
    """

    __slots__ = ("dim", "_dense", "_Lp", "_Li", "_Lx", "_logdet")

    def __init__(self, dim, dense=None, Lp=None, Li=None, Lx=None):
        self.dim = int(dim)
        self._dense = dense
        self._Lp, self._Li, self._Lx = Lp, Li, Lx
        self._logdet = None

    @property
    def is_sparse(self):
        return self._dense is None

    def diagonal(self):
        if self._dense is not None:
            return np.diag(self._dense).copy()
        return self._Lx[self._Lp[:-1]].copy()

    @property
    def lower(self):
        """Dense lower-triangular factor."""
        if self._dense is not None:
            return self._dense
        n = self.dim
        cols = np.repeat(np.arange(n), np.diff(self._Lp))
        out = np.zeros((n, n))
        out[self._Li, cols] = self._Lx
        return out

    def logdet(self):
        if self._logdet is None:
            self._logdet = 2.0 * float(np.sum(np.log(self.diagonal())))
        return self._logdet

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.dim:
            raise DimensionMismatch(f"right-hand side has {b.shape[0]} rows, factor has {self.dim}")
        if self._dense is not None:
            y = scipy.linalg.solve_triangular(self._dense, b, lower=True, check_finite=False)
            return scipy.linalg.solve_triangular(self._dense, y, lower=True, trans="T", check_finite=False)
        if b.ndim == 1:
            y = K.lsolve(self.dim, self._Lp, self._Li, self._Lx, np.ascontiguousarray(b))
            return K.ltsolve(self.dim, self._Lp, self._Li, self._Lx, y)
        return np.column_stack([self.solve(b[:, k]) for k in range(b.shape[1])])

    def inverse_lower(self):
        """``L^{-1}`` as a dense lower-triangular array (O(n^3))."""
        return scipy.linalg.solve_triangular(self.lower, np.eye(self.dim), lower=True, check_finite=False)


def cholesky(Q, method=None):
    """Factorize an SPD matrix.

    ``method`` is ``"sparse"``, ``"dense"`` or ``None`` (automatic: sparse
    kernels when numba is active and the matrix is not mostly full).
    Raises :class:`NotPositiveDefinite` when a pivot falls to or below
    ``PD_TOL * max(diag(Q))``.
    """
    if not isinstance(Q, SpdMatrix):
        Q = SpdMatrix(Q)
    diag = Q.diagonal()
    dmax = float(np.max(diag))
    if not np.isfinite(Q.data).all():
        raise NotPositiveDefinite("matrix has non-finite entries")
    if dmax <= 0.0:
        raise NotPositiveDefinite("matrix has no positive diagonal entry", column=int(np.argmax(diag)))
    tol = PD_TOL * dmax
    if method is None:
        method = "sparse" if (K.USE_NUMBA and Q.density() < _DENSE_FILL) else "dense"
    if method == "sparse":
        p = Q.pattern
        parent, Lp = p.symbolic()
        Li, Lx, failed = K.numeric_cholesky(p.n, p.indptr, p.indices, Q.data, parent, Lp, tol)
        if failed >= 0:
            raise NotPositiveDefinite(f"non-positive pivot in column {failed}", column=int(failed))
        return CholFactor(p.n, Lp=Lp, Li=Li, Lx=Lx)
    if method != "dense":
        raise ValueError(f"unknown factorization method {method!r}")
    L, info = scipy.linalg.lapack.dpotrf(Q.toarray(), lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(f"non-positive pivot in column {info - 1}", column=int(info - 1))
    d = np.diag(L)
    bad = np.flatnonzero(~(d * d > tol))
    if bad.size:
        raise NotPositiveDefinite(f"non-positive pivot in column {bad[0]}", column=int(bad[0]))
    return CholFactor(Q.dim, dense=L)


def solve(f, b):
    """Solve ``Q x = b`` given ``f = cholesky(Q)``."""
    return f.solve(b)


def logdet(f):
    """``log det Q`` from its factor."""
    return f.logdet()


def marginal_variances(f):
    """Diagonal of ``Q^{-1}`` via the explicit inverse of ``L``."""
    Linv = f.inverse_lower()
    return np.einsum("ij,ij->j", Linv, Linv)


def inverse(f):
    """Dense ``Q^{-1}``."""
    Linv = f.inverse_lower()
    return Linv.T @ Linv
