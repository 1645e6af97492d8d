"""A small reverse-mode tape over the fixed set of operations the model uses.

Each operation computes its value eagerly and appends a record holding the
indices of its differentiable inputs plus a closure mapping the output
adjoint to input adjoints.  Values live on the returned :class:`Var` objects,
not on the tape, so intermediates nobody keeps a reference to (and that no
closure captured) are freed as soon as they go out of scope.  That matters
for the n_s x n_t cost matrices.

Operands may be :class:`Var` objects or plain constants (arrays, floats);
constants receive no gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.linalg.blas import daxpy

from .sparse import SparseMatrix, dense_spmm, sampled_product, sampled_product_t, spmm, spmm_t


class Var:
    """A value recorded on a tape.

    ``value`` is a float64 ndarray (0-d for scalars) or a
    :class:`~globalign.sparse.SparseMatrix`, in which case the adjoint is an
    array over its stored values.
    """

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"


def _value(x):
    if isinstance(x, Var):
        return x.value
    if isinstance(x, SparseMatrix):
        return x
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    def __init__(self):
        self._inputs: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._leaves: list[Var] = []

    def __len__(self) -> int:
        return len(self._inputs)

    def _record(self, value, operands: Sequence, vjp: Callable | None) -> Var:
        """Append a node.  ``vjp(g)`` returns one adjoint (or None) per operand."""
        idx = []
        keep = []
        for pos, op in enumerate(operands):
            if isinstance(op, Var):
                if op.tape is not self:
                    raise ValueError("operand recorded on a different tape")
                idx.append(op.index)
                keep.append(pos)
        if vjp is not None and keep:
            def sliced(g, vjp=vjp, keep=tuple(keep)):
                grads = vjp(g)
                return tuple(grads[p] for p in keep)
        else:
            sliced = None
        self._inputs.append(tuple(idx))
        self._vjps.append(sliced)
        return Var(self, len(self._inputs) - 1, value)

    def leaf(self, value) -> Var:
        """A parameter to differentiate with respect to."""
        if not isinstance(value, SparseMatrix):
            value = np.array(value, dtype=np.float64)
        self._inputs.append(())
        self._vjps.append(None)
        var = Var(self, len(self._inputs) - 1, value)
        self._leaves.append(var)
        return var

    # -- primitives --------------------------------------------------------

    def matmul(self, a, b, transpose_a: bool = False, transpose_b: bool = False) -> Var:
        A, B = _value(a), _value(b)
        Ao = A.T if transpose_a else A
        Bo = B.T if transpose_b else B
        out = Ao @ Bo

        need_a, need_b = isinstance(a, Var), isinstance(b, Var)

        def vjp(g):
            ga = gb = None
            if need_a:
                ga = g @ Bo.T
                ga = ga.T if transpose_a else ga
            if need_b:
                gb = Ao.T @ g
                gb = gb.T if transpose_b else gb
            return (ga, gb)

        return self._record(out, (a, b), vjp)

    def add(self, a, b) -> Var:
        """Elementwise sum with numpy broadcasting (bias rows, scalar offsets)."""
        A, B = _value(a), _value(b)
        out = A + B
        return self._record(out, (a, b), lambda g: (_unbroadcast(g, A.shape), _unbroadcast(g, B.shape)))

    def scale(self, a, c: float) -> Var:
        c = float(c)
        return self._record(_value(a) * c, (a,), lambda g: (g * c,))

    def lincomb(self, terms: Sequence[tuple[float, object]]) -> Var:
        """``sum(c * x for c, x in terms)`` as a single node (one output buffer)."""
        coefs = [float(c) for c, _ in terms]
        ops = [x for _, x in terms]
        out = np.multiply(_value(ops[0]), coefs[0])
        for c, x in zip(coefs[1:], ops[1:]):
            X = _value(x)
            if X.shape == out.shape and X.dtype == np.float64 and X.flags.c_contiguous and out.flags.c_contiguous:
                # in-place axpy: no n x n temporary for c * x
                daxpy(X.ravel(), out.ravel(), a=c)
            else:
                out += c * X
        return self._record(out, tuple(ops), lambda g: tuple(c * g for c in coefs))

    def mul_scalar(self, s, x) -> Var:
        """``s * x`` where ``s`` is a 0-d (scalar) operand."""
        S, X = _value(s), _value(x)
        if S.shape != ():
            raise ValueError("mul_scalar expects a scalar multiplier")
        return self._record(S * X, (s, x), lambda g: (np.asarray(np.vdot(g, X)), S * g))

    def weighted_sum(self, w, parts: Sequence) -> Var:
        """``sum_i w[i] * parts[i]`` for a weight vector ``w`` (one output buffer)."""
        W = _value(w)
        values = [_value(x) for x in parts]
        if W.shape != (len(values),):
            raise ValueError(f"expected {len(values)} weights, got shape {W.shape}")
        out = W[0] * values[0]
        for c, x in zip(W[1:], values[1:]):
            out += c * x

        live = [isinstance(x, Var) for x in parts]

        def vjp(g):
            gw = np.array([np.vdot(g, x) for x in values]) if isinstance(w, Var) else None
            return (gw, *(c * g if on else None for c, on in zip(W, live)))

        return self._record(out, (w, *parts), vjp)

    def square(self, a) -> Var:
        A = _value(a)
        return self._record(A * A, (a,), lambda g: (2.0 * A * g,))

    def relu(self, a) -> Var:
        A = _value(a)
        on = A > 0
        return self._record(np.where(on, A, 0.0), (a,), lambda g: (np.where(on, g, 0.0),))

    def frobenius_normalize(self, a, allow_zero: bool = False) -> Var:
        """``a / ||a||_F``.  A zero matrix raises unless ``allow_zero``, which maps it to zero."""
        A = _value(a)
        norm = float(np.linalg.norm(A))
        if norm == 0.0:
            if not allow_zero:
                raise FloatingPointError("cannot normalize a matrix with zero Frobenius norm")
            return self._record(np.zeros_like(A), (a,), lambda g: (np.zeros_like(g),))
        Y = A / norm
        return self._record(Y, (a,), lambda g: ((g - Y * np.vdot(g, Y)) / norm,))

    def row_normalize(self, a) -> Var:
        """Divide each row by its Euclidean norm; zero rows stay zero."""
        A = _value(a)
        norms = np.linalg.norm(A, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        Y = A / safe

        def vjp(g):
            proj = np.sum(g * Y, axis=1, keepdims=True)
            return (np.where(norms > 0, (g - Y * proj) / safe, 0.0),)

        return self._record(Y, (a,), vjp)

    def cosine(self, a, b) -> Var:
        """Pairwise cosine similarity between the rows of ``a`` and ``b``."""
        an = self.row_normalize(a) if isinstance(a, Var) else _row_normalized(_value(a))
        bn = an if b is a else (self.row_normalize(b) if isinstance(b, Var) else _row_normalized(_value(b)))
        return self.matmul(an, bn, transpose_b=True)

    def inner(self, a, c) -> Var:
        """``<a, c>`` against a constant ``c``; returns a scalar.

        For a sparse ``a``, ``c`` is a vector over its stored values.
        """
        A = _value(a)
        if isinstance(A, SparseMatrix):
            A = A.data
        C = np.asarray(c, dtype=np.float64)
        if A.shape != C.shape:
            raise ValueError(f"shape mismatch in inner product: {A.shape} vs {C.shape}")
        # the adjoint aliases c when g == 1; accumulation never writes in place
        return self._record(np.asarray(np.vdot(A, C)), (a,), lambda g: (C if float(g) == 1.0 else float(g) * C,))

    def concat(self, parts: Sequence, axis: int = 1) -> Var:
        values = [_value(p) for p in parts]
        out = np.concatenate(values, axis=axis)
        bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
        return self._record(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))

    def row_divide(self, a, d) -> Var:
        """``a / d`` for an ``(n, 1)`` column ``d``."""
        A, D = _value(a), _value(d)
        out = A / D

        def vjp(g):
            return (g / D, -np.sum(g * out, axis=1, keepdims=True) / D)

        return self._record(out, (a, d), vjp)

    def softmax(self, a) -> Var:
        A = _value(a)
        e = np.exp(A - A.max())
        Y = e / e.sum()
        return self._record(Y, (a,), lambda g: (Y * (g - np.vdot(g, Y)),))

    def take(self, a, i: int) -> Var:
        """Scalar element ``i`` of a vector."""
        A = _value(a)

        def vjp(g):
            out = np.zeros_like(A)
            out[i] = g
            return (out,)

        return self._record(np.asarray(A[i]), (a,), vjp)

    # -- sparse-valued primitives -------------------------------------------

    def sampled_cosine(self, a, pattern: SparseMatrix) -> Var:
        """Cosine similarity of rows of ``a`` evaluated only on ``pattern``."""
        an = self.row_normalize(a) if isinstance(a, Var) else _row_normalized(_value(a))
        AN = _value(an)
        vals = sampled_product(pattern, AN, AN)
        out = pattern.with_data(vals)

        def vjp(g):
            G = pattern.with_data(g)
            return (spmm(G, AN) + _spmm_tdense(G, AN),)

        return self._record(out, (an,), vjp)

    def sparse_affine(self, base: np.ndarray, weight: np.ndarray, x) -> Var:
        """Sparse value with data ``base + weight * x.data`` on ``x``'s pattern."""
        X = _value(x)
        base = np.asarray(base, dtype=np.float64)
        weight = np.asarray(weight, dtype=np.float64)
        out = X.with_data(base + weight * X.data)
        return self._record(out, (x,), lambda g: (weight * g,))

    def gwd_cost(self, ds, dt, T: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> Var:
        """Square-loss Gromov-Wasserstein cost tensor applied to a fixed coupling.

        ``(Ds*Ds) mu 1^T + 1 nu^T (Dt*Dt)^T - 2 Ds T Dt^T`` where ``Ds``/``Dt``
        may each be dense or sparse; sparse operands route every product
        through sparse kernels.
        """
        Ds, Dt = _value(ds), _value(dt)
        T = np.asarray(T, dtype=np.float64)
        mu = np.asarray(mu, dtype=np.float64)
        nu = np.asarray(nu, dtype=np.float64)
        s_sparse = isinstance(Ds, SparseMatrix)
        t_sparse = isinstance(Dt, SparseMatrix)

        # the factor -2 rides on Ds (exact in floating point), so neither C
        # nor its adjoint needs an extra pass over an n_s x n_t buffer
        if s_sparse:
            a = Ds.with_data(Ds.data * Ds.data).to_scipy() @ mu
            Xm = spmm(Ds.with_data(-2.0 * Ds.data), T)
        else:
            a = (Ds * Ds) @ mu
            Xm = (-2.0 * Ds) @ T
        if t_sparse:
            b = Dt.with_data(Dt.data * Dt.data).to_scipy() @ nu
            C = spmm_t(Xm, Dt)
        else:
            b = (Dt * Dt) @ nu
            C = Xm @ Dt.T
        C += a[:, None]
        C += b[None, :]

        def vjp(g):
            ga = g.sum(axis=1)
            gb = g.sum(axis=0)
            if t_sparse:
                gx = dense_spmm(g, Dt)
                g_dt = sampled_product_t(Dt, g, Xm)
                g_dt += 2.0 * Dt.data * gb[Dt.rows] * nu[Dt.indices]
            else:
                gx = g @ Dt
                g_dt = g.T @ Xm
                g_dt += _outer_weighted(Dt, 2.0 * gb, nu)
            # gx is the adjoint of Ds T up to the factor -2, applied to g_ds
            if s_sparse:
                g_ds = sampled_product(Ds, gx, T)
                g_ds *= -2.0
                g_ds += 2.0 * Ds.data * ga[Ds.rows] * mu[Ds.indices]
            else:
                g_ds = gx @ T.T
                g_ds *= -2.0
                g_ds += _outer_weighted(Ds, 2.0 * ga, mu)
            return (g_ds, g_dt, None, None, None)

        return self._record(C, (ds, dt, T, mu, nu), vjp)

    # -- reverse sweep -------------------------------------------------------

    def backward(self, output: Var, wrt: Sequence[Var] | None = None, release: bool = True) -> list:
        """Adjoints of the scalar ``output`` with respect to ``wrt`` (default: all leaves).

        With ``release=True`` the backward closures are dropped afterwards,
        freeing whatever they captured; a second sweep is then impossible.
        """
        if len(self) == 0:
            raise ValueError("tape is empty")
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if np.shape(output.value) != ():
            raise ValueError(f"backward needs a scalar output, got shape {np.shape(output.value)}")
        if wrt is None:
            wrt = self._leaves

        adjoints: dict[int, np.ndarray] = {output.index: np.asarray(1.0)}
        for node in range(output.index, -1, -1):
            g = adjoints.pop(node, None)
            if g is None:
                if release:
                    self._vjps[node] = None
                continue
            if not self._inputs[node]:
                adjoints[node] = g
                continue
            vjp = self._vjps[node]
            if vjp is None:
                raise RuntimeError("tape was already released by a previous backward sweep")
            for src, gi in zip(self._inputs[node], vjp(g)):
                if gi is None:
                    continue
                prev = adjoints.get(src)
                adjoints[src] = gi if prev is None else prev + gi
            if release:
                self._vjps[node] = None
            del g

        grads = []
        for leaf in wrt:
            g = adjoints.get(leaf.index)
            if g is None:
                v = leaf.value
                g = np.zeros_like(v.data if isinstance(v, SparseMatrix) else v)
            grads.append(np.asarray(g))
        return grads


def _row_normalized(A: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    return A / np.where(norms > 0, norms, 1.0)


def _spmm_tdense(G: SparseMatrix, B: np.ndarray) -> np.ndarray:
    """``G.T @ B`` for sparse ``G``."""
    return np.ascontiguousarray(G.to_scipy().T @ B)


def _outer_weighted(D: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``D * outer(r, c)`` with a single temporary."""
    out = D * r[:, None]
    out *= c[None, :]
    return out
