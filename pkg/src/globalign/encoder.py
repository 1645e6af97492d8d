"""Global node representations from stacked linear attention.

Every head starts from the same input embedding ``relu(X W + b)``, runs
``layers`` linear-attention layers with its own weights, and the head
outputs are concatenated and projected back to width ``d``.  Node features
are the only input; the graph structure enters later through the relation
matrices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tape import Tape, Var

log = logging.getLogger(__name__)

_PROJECTIONS = ("q", "k", "v")


@dataclass
class EncoderParams:
    """Encoder weights keyed by name; one set encodes both graphs."""

    in_dim: int
    dim: int
    heads: int
    layers: int
    arrays: dict[str, np.ndarray]

    @classmethod
    def init(cls, in_dim: int, dim: int, heads: int, layers: int, rng: np.random.Generator) -> "EncoderParams":
        """Glorot-uniform weights, zero biases, drawn in a fixed key order."""

        def glorot(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        arrays = {"mlp.w": glorot(in_dim, dim), "mlp.b": np.zeros(dim)}
        for a in range(heads):
            for i in range(layers):
                for p in _PROJECTIONS:
                    arrays[f"h{a}.l{i}.{p}.w"] = glorot(dim, dim)
                    arrays[f"h{a}.l{i}.{p}.b"] = np.zeros(dim)
        arrays["out.w"] = glorot(heads * dim, dim)
        return cls(in_dim, dim, heads, layers, arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.in_dim, self.dim, self.heads, self.layers, {k: v.copy() for k, v in self.arrays.items()})

    def leaves(self, tape: Tape) -> dict[str, Var]:
        return {name: tape.leaf(value) for name, value in self.arrays.items()}

    def check_shapes(self) -> None:
        d = self.dim
        expected = {"mlp.w": (self.in_dim, d), "mlp.b": (d,), "out.w": (self.heads * d, d)}
        for a in range(self.heads):
            for i in range(self.layers):
                for p in _PROJECTIONS:
                    expected[f"h{a}.l{i}.{p}.w"] = (d, d)
                    expected[f"h{a}.l{i}.{p}.b"] = (d,)
        if set(expected) != set(self.arrays):
            raise ValueError("encoder parameter names do not match (heads, layers)")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")


def mlp_init(tape: Tape, X: np.ndarray, w, b, activation: str = "relu") -> Var:
    """``activation(X W + b)``; ``activation`` is ``"relu"`` or ``"identity"``."""
    X = np.asarray(X, dtype=np.float64)
    w_shape = w.value.shape if isinstance(w, Var) else np.shape(w)
    if X.shape[1] != w_shape[0]:
        raise ValueError(f"features have {X.shape[1]} columns, input map expects {w_shape[0]}")
    pre = tape.add(tape.matmul(X, w), b)
    if activation == "relu":
        return tape.relu(pre)
    if activation == "identity":
        return pre
    raise ValueError(f"unknown activation {activation!r}")


def _affine(tape: Tape, Z, w, b) -> Var:
    return tape.add(tape.matmul(Z, w), b)


def _norm(tape: Tape, M: Var, what: str) -> Var:
    if not np.any(M.value):
        log.warning("linear attention: %s projection is identically zero (degenerate parameters)", what)
        return tape.frobenius_normalize(M, allow_zero=True)
    return tape.frobenius_normalize(M)


def linear_attention_layer(tape: Tape, Z, p: dict) -> Var:
    """One layer; ``p`` maps ``q.w, q.b, k.w, k.b, v.w, v.b`` to operands.

    Uses the association order ``Q (K^T V)`` so the cost is O(n d^2).
    """
    n = (Z.value if isinstance(Z, Var) else np.asarray(Z)).shape[0]
    Q = _norm(tape, _affine(tape, Z, p["q.w"], p["q.b"]), "query")
    K = _norm(tape, _affine(tape, Z, p["k.w"], p["k.b"]), "key")
    V = _affine(tape, Z, p["v.w"], p["v.b"])

    k_sum = tape.matmul(K, np.ones((n, 1)), transpose_a=True)
    diag = tape.add(tape.scale(tape.matmul(Q, k_sum), 1.0 / n), 1.0)
    if np.any(diag.value <= 0):
        raise FloatingPointError("linear attention normalizer is not positive")
    kv = tape.matmul(K, V, transpose_a=True)
    mixed = tape.add(V, tape.scale(tape.matmul(Q, kv), 1.0 / n))
    return tape.row_divide(mixed, diag)


def encode(tape: Tape, X: np.ndarray, leaves: dict, heads: int, layers: int) -> Var:
    """Representation ``R`` (n x d) for standardized features ``X``."""
    z0 = mlp_init(tape, X, leaves["mlp.w"], leaves["mlp.b"])
    outputs = []
    for a in range(heads):
        Z = z0
        for i in range(layers):
            prefix = f"h{a}.l{i}."
            Z = linear_attention_layer(tape, Z, {p: leaves[prefix + p] for p in ("q.w", "q.b", "k.w", "k.b", "v.w", "v.b")})
        outputs.append(Z)
    stacked = outputs[0] if heads == 1 else tape.concat(outputs, axis=1)
    return tape.matmul(stacked, leaves["out.w"])


def encode_array(X: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Forward pass only, on a throwaway tape."""
    tape = Tape()
    return encode(tape, X, params.arrays, params.heads, params.layers).value
