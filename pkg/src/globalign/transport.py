"""Couplings and the KL-proximal Sinkhorn step.

The T-update solves ``min <C, T> + eps * KL(T || prev)`` over couplings with
marginals ``(mu, nu)``.  Its solution is a diagonal rescaling of the kernel
``prev * exp(-C / eps)``.  The scaling loop runs on a kernel pre-normalized
in the log domain; whenever the scaling vectors drift too far from 1 they
are absorbed back into log-domain potentials and the kernel is rebuilt.
Matrix-vector products then dominate the cost, and nothing overflows for
small ``eps``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

_ABSORB = 30.0  # |log u| or |log v| beyond this triggers absorption
_BLOCK = 1 << 22  # entries per row block in blocked elementwise passes


@dataclass
class Coupling:
    """Nonnegative ``plan`` with row sums ``mu`` and column sums ``nu``."""

    plan: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    converged: bool = True
    iterations: int = 0
    error: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape

    def marginal_error(self) -> float:
        return max(
            float(np.max(np.abs(self.plan.sum(axis=1) - self.mu))),
            float(np.max(np.abs(self.plan.sum(axis=0) - self.nu))),
        )


def init_coupling(n_s: int, n_t: int) -> Coupling:
    """Uniform marginals and the independent coupling ``mu nu^T``."""
    if n_s < 1 or n_t < 1:
        raise ValueError("coupling sides need at least one node")
    mu = np.full(n_s, 1.0 / n_s)
    nu = np.full(n_t, 1.0 / n_t)
    return Coupling(np.outer(mu, nu), mu, nu)


def objective(C: np.ndarray, T) -> float:
    """``<C, T>``."""
    plan = T.plan if isinstance(T, Coupling) else np.asarray(T)
    C = np.asarray(C)
    if C.shape != plan.shape:
        raise ValueError(f"cost {C.shape} and coupling {plan.shape} differ in shape")
    return float(np.vdot(C, plan))


def kl_divergence(T: np.ndarray, prev: np.ndarray) -> float:
    """``sum T log(T / prev) - T + prev`` with ``0 log 0 = 0``."""
    T = np.asarray(T)
    prev = np.asarray(prev)
    pos = T > 0
    return float(np.sum(T[pos] * np.log(T[pos] / prev[pos])) - T.sum() + prev.sum())


def prox_value(C: np.ndarray, T: np.ndarray, prev: np.ndarray, eps: float) -> float:
    """The T-update objective ``<C, T> + eps * KL(T || prev)``."""
    return objective(C, T) + eps * kl_divergence(T, prev)


def _row_blocks(n_rows: int, n_cols: int):
    step = max(1, _BLOCK // max(1, n_cols))
    for lo in range(0, n_rows, step):
        yield slice(lo, min(n_rows, lo + step))


def _lse_rows(logK: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``log sum_l exp(logK[i, l] + g[l])`` for every row ``i``."""
    out = np.empty(logK.shape[0])
    for rows in _row_blocks(*logK.shape):
        block = logK[rows] + g
        top = block.max(axis=1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        np.subtract(block, top, out=block)
        np.exp(block, out=block)
        out[rows] = np.log(block.sum(axis=1)) + top[:, 0]
    return out


def _lse_cols(logK: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``log sum_i exp(logK[i, l] + f[i])`` for every column ``l``."""
    top = np.full(logK.shape[1], -np.inf)
    for rows in _row_blocks(*logK.shape):
        np.maximum(top, (logK[rows] + f[rows, None]).max(axis=0), out=top)
    top = np.where(np.isfinite(top), top, 0.0)
    acc = np.zeros(logK.shape[1])
    for rows in _row_blocks(*logK.shape):
        block = logK[rows] + f[rows, None]
        block -= top
        np.exp(block, out=block)
        acc += block.sum(axis=0)
    return np.log(acc) + top


def _kernel(logK: np.ndarray, f: np.ndarray, g: np.ndarray, out: np.ndarray) -> np.ndarray:
    for rows in _row_blocks(*logK.shape):
        block = out[rows]
        np.add(logK[rows], f[rows, None], out=block)
        block += g
        np.exp(block, out=block)
    return out


def _round_to_marginals(T: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Project onto exact marginals by down-scaling then a rank-one correction."""
    r = T.sum(axis=1)
    T *= np.minimum(1.0, mu / np.where(r > 0, r, 1.0))[:, None]
    c = T.sum(axis=0)
    T *= np.minimum(1.0, nu / np.where(c > 0, c, 1.0))[None, :]
    # both residuals are nonnegative after the down-scaling, up to rounding;
    # clamping keeps the correction nonnegative so positive entries stay positive
    err_r = np.maximum(mu - T.sum(axis=1), 0.0)
    err_c = np.maximum(nu - T.sum(axis=0), 0.0)
    mass = err_r.sum()
    if mass > 0:
        T += np.outer(err_r, err_c / mass)
    return T


def sinkhorn(
    C: np.ndarray,
    prev: Coupling,
    eps: float = 0.01,
    max_inner: int = 100,
    tol: float = 1e-6,
) -> Coupling:
    """Solve the KL-proximal transport step anchored at ``prev``.

    Stops once the largest marginal violation drops below ``tol``.  If
    ``max_inner`` is exhausted first, the plan is rounded onto the exact
    marginals and returned with ``converged=False``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    C = np.asarray(C, dtype=np.float64)
    mu, nu = prev.mu, prev.nu
    if C.shape != prev.plan.shape:
        raise ValueError(f"cost {C.shape} and coupling {prev.plan.shape} differ in shape")
    if not np.all(np.isfinite(C)):
        raise FloatingPointError("cost matrix has non-finite entries")
    n_s, n_t = C.shape
    if n_s == 1 or n_t == 1:
        # a single row or column admits exactly one coupling
        return Coupling(np.outer(mu, nu), mu, nu, True, 0, 0.0)

    # every pass below is in place: the n_s x n_t buffers are the cost at scale
    K = np.multiply(C, 1.0 / eps)
    with np.errstate(divide="ignore"):
        logK = np.log(prev.plan)
    logK -= K
    del K
    # shift each row so its largest kernel entry is 1; the first scaling
    # sweep then matches an exact log-domain sweep without its exp passes
    f = -logK.max(axis=1)
    f[~np.isfinite(f)] = 0.0
    g = np.zeros(n_t)
    K = _kernel(logK, f, g, np.empty_like(logK))
    log_mu, log_nu = np.log(mu), np.log(nu)
    u = np.ones(n_s)
    v = np.ones(n_t)

    converged = False
    err = np.inf
    it = 0
    for it in range(max_inner + 1):
        Kv = K @ v
        err = float(np.max(np.abs(u * Kv - mu)))
        if err < tol:
            converged = True
            break
        if it == max_inner:
            break
        with np.errstate(divide="ignore", over="ignore"):
            u = mu / Kv
            v = nu / (u @ K)
            stable = np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(v > 0) and np.all(u > 0)
            drift = max(np.max(np.abs(np.log(u))), np.max(np.abs(np.log(v)))) if stable else np.inf
        if drift > _ABSORB:
            if stable:
                f += np.log(u)
                g += np.log(v)
            else:
                # scaling broke down: take one exact log-domain sweep instead
                f = log_mu - _lse_rows(logK, g)
                g = log_nu - _lse_cols(logK, f)
            _kernel(logK, f, g, out=K)
            u = np.ones(n_s)
            v = np.ones(n_t)
    del logK

    K *= u[:, None]
    K *= v[None, :]
    if not converged:
        log.debug("sinkhorn stopped after %d iterations with marginal error %.3e", it, err)
        K = _round_to_marginals(K, mu, nu)
    return Coupling(K, mu, nu, converged, it, err)
