"""Relation matrices, sparsification masks and the hierarchical transport cost.

Functions suffixed ``_op`` record on a :class:`~globalign.tape.Tape` and are
what the trainer uses; the unsuffixed versions are plain array functions
with the same semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .sparse import SparseMatrix, topk_columns
from .tape import Tape, Var

MARGINAL_TOL = 1e-6


def _unit_rows(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    norms = np.linalg.norm(R, axis=1, keepdims=True)
    return R / np.where(norms > 0, norms, 1.0)


def cosine_kernel(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; a zero row has similarity 0 with everything."""
    return _unit_rows(Ra) @ _unit_rows(Rb).T


# -- dense relation -------------------------------------------------------------


def _check_simplex(beta: np.ndarray) -> None:
    if beta.shape != (2,) or np.any(beta < 0) or abs(beta.sum() - 1.0) > 1e-9:
        raise ValueError(f"relation weights must lie on the 2-simplex, got {beta}")


def dense_relation_op(tape: Tape, A: np.ndarray, R, beta) -> Var:
    """``beta[0] * A + beta[1] * cos(R, R)`` with dense adjacency ``A``."""
    b = beta.value if isinstance(beta, Var) else np.asarray(beta, dtype=np.float64)
    _check_simplex(b)
    return tape.weighted_sum(beta if isinstance(beta, Var) else b, [A, tape.cosine(R, R)])


def dense_relation(A, R: np.ndarray, beta) -> np.ndarray:
    A = A.to_dense() if isinstance(A, SparseMatrix) else np.asarray(A, dtype=np.float64)
    return dense_relation_op(Tape(), A, np.asarray(R, dtype=np.float64), beta).value


# -- personalized PageRank and masks ------------------------------------------------


def _ppr_rows(A: SparseMatrix, sources: np.ndarray, gamma: float, iters: int) -> np.ndarray:
    n = A.shape[0]
    deg = np.diff(A.indptr).astype(np.float64)
    dangling = deg == 0
    inv = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, deg))
    walk_t = (sp.diags_array(inv) @ A.to_scipy()).T.tocsr()
    restart = np.zeros((sources.shape[0], n))
    restart[np.arange(sources.shape[0]), sources] = 1.0
    P = restart.copy()
    for _ in range(iters):
        spread = np.asarray(walk_t @ P.T).T
        if dangling.any():
            # walks stuck at a degree-0 node restart at their source
            spread[np.arange(sources.shape[0]), sources] += P[:, dangling].sum(axis=1)
        P = (1.0 - gamma) * restart + gamma * spread
    return P


def ppr(A: SparseMatrix, gamma: float = 0.85, iters: int = 30) -> np.ndarray:
    """Dense personalized PageRank matrix by power iteration; row ``u`` is source ``u``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"damping must lie in [0, 1), got {gamma}")
    return _ppr_rows(A, np.arange(A.shape[0]), gamma, iters)


def auto_topk(g) -> int:
    """Average degree rounded up, at least 1."""
    return max(1, math.ceil(g.average_degree - 1e-12))


def build_masks(
    A: SparseMatrix,
    X: np.ndarray,
    k: int,
    gamma: float = 0.85,
    iters: int = 30,
    chunk: int = 512,
) -> SparseMatrix:
    """Symmetric binary mask: row-wise top-k of PPR united with top-k of feature cosine.

    Rows are processed in chunks so no dense n x n matrix is ever held.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"damping must lie in [0, 1), got {gamma}")
    n = A.shape[0]
    Xu = _unit_rows(X)
    rows, cols = [], []
    for lo in range(0, n, chunk):
        src = np.arange(lo, min(n, lo + chunk))
        for block in (_ppr_rows(A, src, gamma, iters), Xu[src] @ Xu.T):
            top = topk_columns(block, k)
            rows.append(np.repeat(src, top.shape[1]))
            cols.append(top.ravel())
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    both_r = np.concatenate([r, c])
    both_c = np.concatenate([c, r])
    M = SparseMatrix.from_coo(both_r, both_c, np.ones(both_r.shape[0]), (n, n))
    return M.with_data(np.ones(M.nnz))


# -- sparse relation ------------------------------------------------------------------


def _values_on(pattern: SparseMatrix, other: SparseMatrix) -> np.ndarray:
    """Values of ``other`` at the stored positions of ``pattern`` (0 if absent)."""
    n = pattern.shape[1]
    codes_p = pattern.rows * n + pattern.indices
    codes_o = other.rows * n + other.indices
    if codes_o.shape[0] == 0:
        return np.zeros(pattern.nnz)
    pos = np.minimum(np.searchsorted(codes_o, codes_p), codes_o.shape[0] - 1)
    return np.where(codes_o[pos] == codes_p, other.data[pos], 0.0)


@dataclass(frozen=True)
class SparseSupport:
    """Union support of adjacency and mask, with both restricted to it."""

    pattern: SparseMatrix
    adjacency: np.ndarray
    mask: np.ndarray

    @classmethod
    def build(cls, A: SparseMatrix, M: SparseMatrix) -> "SparseSupport":
        if A.shape != M.shape:
            raise ValueError(f"adjacency {A.shape} and mask {M.shape} differ in shape")
        union = SparseMatrix.from_scipy(abs(A.to_scipy()) + abs(M.to_scipy()))
        union = union.with_data(np.ones(union.nnz))
        return cls(union, _values_on(union, A), _values_on(union, M))


def sparse_relation_op(tape: Tape, support: SparseSupport, R, scale: float = 1.0) -> Var:
    """``scale * (A + M * cos(R, R))`` stored on the union of A's and M's supports.

    The cosine is evaluated only on that support.
    """
    cos = tape.sampled_cosine(R, support.pattern)
    return tape.sparse_affine(scale * support.adjacency, scale * support.mask, cos)


def sparse_relation(A: SparseMatrix, R: np.ndarray, M: SparseMatrix, scale: float = 1.0) -> SparseMatrix:
    return sparse_relation_op(Tape(), SparseSupport.build(A, M), np.asarray(R, dtype=np.float64), scale).value


# -- transport costs ------------------------------------------------------------------


def cost_wd_op(tape: Tape, Rs, Rt) -> Var:
    return tape.scale(tape.cosine(Rs, Rt), -1.0)


def cost_wd(Rs: np.ndarray, Rt: np.ndarray) -> np.ndarray:
    """Negative cosine similarity between source and target representations."""
    return -cosine_kernel(Rs, Rt)


def check_marginals(T: np.ndarray, mu: np.ndarray, nu: np.ndarray, tol: float = MARGINAL_TOL) -> None:
    row_err = float(np.max(np.abs(T.sum(axis=1) - mu)))
    col_err = float(np.max(np.abs(T.sum(axis=0) - nu)))
    if row_err > tol or col_err > tol:
        raise ValueError(f"coupling marginals off by {max(row_err, col_err):.3e} (tolerance {tol:g})")


def cost_gwd_op(tape: Tape, Ds, Dt, T: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> Var:
    check_marginals(T, mu, nu)
    return tape.gwd_cost(Ds, Dt, T, mu, nu)


def cost_gwd(Ds, Dt, T: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """``sum_{j,l} (Ds[i,j] - Dt[k,l])^2 T[j,l]`` via the decomposed square loss."""
    as_op = lambda D: D if isinstance(D, SparseMatrix) else np.asarray(D, dtype=np.float64)
    return cost_gwd_op(Tape(), as_op(Ds), as_op(Dt), T, mu, nu).value


def combine_cost_op(tape: Tape, c_gwd, c_wd, alpha: float) -> Var:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return tape.lincomb([(alpha, c_gwd), (1.0 - alpha, c_wd)])


def combine_cost(c_gwd: np.ndarray, c_wd: np.ndarray, alpha: float) -> np.ndarray:
    return combine_cost_op(Tape(), np.asarray(c_gwd), np.asarray(c_wd), alpha).value
