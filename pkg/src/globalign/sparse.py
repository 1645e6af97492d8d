"""Compressed-row sparse matrices and the kernels the alignment model needs.

Dense matrices are plain ``float64`` :class:`numpy.ndarray` objects; only the
sparse side gets a dedicated type.  Construction and canonicalization go
through :mod:`scipy.sparse`; the products themselves are numba kernels that
keep every inner loop contiguous (tiles of dense rows are transposed into a
small buffer where needed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """CSR matrix with sorted, unique column indices in every row."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        rows, cols = self.shape
        if self.indptr.shape != (rows + 1,):
            raise ValueError(f"indptr has length {self.indptr.shape[0]}, expected {rows + 1}")
        if self.indices.shape != self.data.shape:
            raise ValueError("indices and data must have the same length")
        if self.nnz > rows * cols:
            raise ValueError("more stored entries than matrix cells")

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    @property
    def rows(self) -> np.ndarray:
        """Row index of every stored entry (COO view of ``indptr``)."""
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    @classmethod
    def from_scipy(cls, mat) -> "SparseMatrix":
        csr = sp.csr_array(mat, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(
            shape=(int(csr.shape[0]), int(csr.shape[1])),
            indptr=csr.indptr.astype(np.int64),
            indices=csr.indices.astype(np.int64),
            data=np.asarray(csr.data, dtype=np.float64),
        )

    @classmethod
    def from_dense(cls, mat: np.ndarray) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_array(np.asarray(mat, dtype=np.float64)))

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> "SparseMatrix":
        """Build from triplets; duplicated coordinates are summed."""
        return cls.from_scipy(sp.coo_array((values, (rows, cols)), shape=shape))

    def with_data(self, data: np.ndarray) -> "SparseMatrix":
        """Same sparsity pattern, new values."""
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise ValueError(f"expected {self.nnz} values, got {data.shape}")
        return SparseMatrix(self.shape, self.indptr, self.indices, data)

    def to_scipy(self) -> sp.csr_array:
        return sp.csr_array((self.data, self.indices, self.indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def lookup(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Values at the given coordinates (zero where nothing is stored)."""
        return np.asarray(self.to_scipy()[np.asarray(rows), np.asarray(cols)]).ravel()


def _check_finite(out: np.ndarray, what: str) -> np.ndarray:
    # any inf or nan entry makes the sum non-finite; one read pass, no mask
    if not np.isfinite(out.sum()) and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return out


_TILE = 32  # dense rows handled per tile in the tiled kernels
_CHUNKS = 8  # fixed reduction split, so results do not depend on the thread count


@numba.njit(cache=True, parallel=True, fastmath=True)
def _csr_dense(indptr, indices, data, B, out):
    # out[k, :] = sum_e data[e] * B[indices[e], :]
    width = B.shape[1]
    for k in numba.prange(indptr.shape[0] - 1):
        row = out[k]
        for c in range(width):
            row[c] = 0.0
        for e in range(indptr[k], indptr[k + 1]):
            d = data[e]
            src = B[indices[e]]
            for c in range(width):
                row[c] += d * src[c]


@numba.njit(cache=True, parallel=True, fastmath=True)
def _dense_csr_t(B, indptr, indices, data, out, tile):
    # out = B @ A.T; a tile of B rows is transposed so the inner loop is contiguous
    n_rows, n_cols = B.shape
    n_k = indptr.shape[0] - 1
    n_tiles = (n_rows + tile - 1) // tile
    for t in numba.prange(n_tiles):
        lo = t * tile
        w = min(n_rows, lo + tile) - lo
        buf = np.empty((n_cols, w))
        for i in range(w):
            for c in range(n_cols):
                buf[c, i] = B[lo + i, c]
        acc = np.empty(w)
        for k in range(n_k):
            for i in range(w):
                acc[i] = 0.0
            for e in range(indptr[k], indptr[k + 1]):
                d = data[e]
                src = buf[indices[e]]
                for i in range(w):
                    acc[i] += d * src[i]
            for i in range(w):
                out[lo + i, k] = acc[i]


@numba.njit(cache=True, parallel=True, fastmath=True)
def _sampled_rowdot(indptr, indices, X, Y, out):
    n_rows = indptr.shape[0] - 1
    width = X.shape[1]
    for r in numba.prange(n_rows):
        x = X[r]
        for e in range(indptr[r], indptr[r + 1]):
            y = Y[indices[e]]
            acc = 0.0
            for t in range(width):
                acc += x[t] * y[t]
            out[e] = acc


@numba.njit(cache=True, parallel=True, fastmath=True)
def _sampled_coldot(indptr, indices, X, Y, partial, tile):
    # partial[c, e] accumulates sum_i X[i, k] * Y[i, l] over the row tiles of chunk c
    depth = X.shape[0]
    n_k = indptr.shape[0] - 1
    n_tiles = (depth + tile - 1) // tile
    n_chunks = partial.shape[0]
    per_chunk = (n_tiles + n_chunks - 1) // n_chunks
    for c in numba.prange(n_chunks):
        acc = partial[c]
        for e in range(acc.shape[0]):
            acc[e] = 0.0
        for t in range(c * per_chunk, min(n_tiles, (c + 1) * per_chunk)):
            lo = t * tile
            w = min(depth, lo + tile) - lo
            xb = np.empty((X.shape[1], w))
            yb = np.empty((Y.shape[1], w))
            for i in range(w):
                for j in range(X.shape[1]):
                    xb[j, i] = X[lo + i, j]
                for j in range(Y.shape[1]):
                    yb[j, i] = Y[lo + i, j]
            for k in range(n_k):
                x = xb[k]
                for e in range(indptr[k], indptr[k + 1]):
                    y = yb[indices[e]]
                    s = 0.0
                    for i in range(w):
                        s += x[i] * y[i]
                    acc[e] += s


def spmm(A: SparseMatrix, B: np.ndarray) -> np.ndarray:
    """``A @ B`` for sparse ``A`` and dense ``B`` in O(nnz(A) * B.cols)."""
    B = np.ascontiguousarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} @ {B.shape}")
    out = np.empty((A.shape[0], B.shape[1]))
    _csr_dense(A.indptr, A.indices, A.data, B, out)
    return _check_finite(out, "spmm")


def spmm_t(B: np.ndarray, A: SparseMatrix) -> np.ndarray:
    """``B @ A.T`` for dense ``B`` and sparse ``A``."""
    B = np.ascontiguousarray(B, dtype=np.float64)
    if B.shape[1] != A.shape[1]:
        raise ValueError(f"dimension mismatch: {B.shape} @ {A.shape[::-1]}")
    out = np.empty((B.shape[0], A.shape[0]))
    _dense_csr_t(B, A.indptr, A.indices, A.data, out, _TILE)
    return _check_finite(out, "spmm_t")


def transpose(A: SparseMatrix) -> SparseMatrix:
    return SparseMatrix.from_scipy(A.to_scipy().T)


def dense_spmm(B: np.ndarray, A: SparseMatrix) -> np.ndarray:
    """``B @ A`` for dense ``B`` and sparse ``A``."""
    if np.shape(B)[1] != A.shape[0]:
        raise ValueError(f"dimension mismatch: {np.shape(B)} @ {A.shape}")
    return spmm_t(B, transpose(A))


def sampled_product(pattern: SparseMatrix, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Values of ``X @ Y.T`` at the stored positions of ``pattern``.

    Row ``r`` of ``X`` pairs with row ``c`` of ``Y`` for every stored ``(r, c)``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if X.shape[0] != pattern.shape[0] or Y.shape[0] != pattern.shape[1] or X.shape[1] != Y.shape[1]:
        raise ValueError("shape mismatch in sampled product")
    out = np.empty(pattern.nnz)
    _sampled_rowdot(pattern.indptr, pattern.indices, X, Y, out)
    return out


def sampled_product_t(pattern: SparseMatrix, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Values of ``X.T @ Y`` at the stored positions of ``pattern``.

    Works through row tiles of ``X`` and ``Y``; neither is transposed as a whole.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if X.shape[1] != pattern.shape[0] or Y.shape[1] != pattern.shape[1] or X.shape[0] != Y.shape[0]:
        raise ValueError("shape mismatch in transposed sampled product")
    partial = np.empty((_CHUNKS, pattern.nnz))
    _sampled_coldot(pattern.indptr, pattern.indices, X, Y, partial, _TILE)
    return partial.sum(axis=0)


def topk_columns(M: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` largest entries per row, ties to the lower index.

    Returns an array of shape ``(rows, min(k, cols))``.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    M = np.asarray(M, dtype=np.float64)
    k = min(k, M.shape[1])
    # stable sort on the negated values keeps equal entries in column order
    return np.argsort(-M, axis=1, kind="stable")[:, :k]


def topk_mask(M: np.ndarray, k: int) -> SparseMatrix:
    """Binary mask keeping the ``k`` largest entries of every row."""
    cols = topk_columns(M, k)
    rows = np.repeat(np.arange(M.shape[0]), cols.shape[1])
    return SparseMatrix.from_coo(rows, cols.ravel(), np.ones(rows.shape[0]), M.shape)
