"""Ranking metrics for an alignment matrix against ground-truth anchors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .transport import Coupling

HITS_KS = (1, 5, 10, 30)


def _plan(T) -> np.ndarray:
    return T.plan if isinstance(T, Coupling) else np.asarray(T, dtype=np.float64)


def _anchors(anchors) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.int64).reshape(-1, 2) if len(anchors) else np.empty((0, 2), np.int64)
    if a.shape[0] == 0:
        raise ValueError("metrics need at least one anchor")
    return a


def ranks(T, anchors) -> np.ndarray:
    """1-based rank of each anchor's target within its source row.

    Rows are sorted by descending value; equal values are ordered by lower
    column index, so an anchor ties behind every equal entry to its left.
    """
    P = _plan(T)
    a = _anchors(anchors)
    if a[:, 0].min() < 0 or a[:, 0].max() >= P.shape[0] or a[:, 1].min() < 0 or a[:, 1].max() >= P.shape[1]:
        raise ValueError(f"anchor indices out of range for a {P.shape[0]}x{P.shape[1]} alignment")
    out = np.empty(a.shape[0], dtype=np.int64)
    cols = np.arange(P.shape[1])[None, :]
    for lo in range(0, a.shape[0], 1024):
        u, v = a[lo : lo + 1024, 0], a[lo : lo + 1024, 1]
        rows = P[u]
        truth = rows[np.arange(u.shape[0]), v][:, None]
        out[lo : lo + 1024] = 1 + np.sum(rows > truth, axis=1) + np.sum((rows == truth) & (cols < v[:, None]), axis=1)
    return out


def hits_at_k(T, anchors, k: int) -> float:
    """Fraction of anchors whose target is among the ``k`` best columns of its row."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    return float(np.mean(ranks(T, anchors) <= k))


def mrr(T, anchors) -> float:
    """Mean reciprocal rank of the anchor targets."""
    return float(np.mean(1.0 / ranks(T, anchors)))


@dataclass
class MetricsReport:
    hits: dict[int, float] = field(default_factory=dict)
    mrr: float = 0.0
    runtime_seconds: float = 0.0
    anchor_count: int = 0

    @classmethod
    def from_ranks(cls, r: np.ndarray, runtime_seconds: float = 0.0) -> "MetricsReport":
        """Report from precomputed ranks; ``inf`` marks a target outside the ranked list."""
        r = np.asarray(r, dtype=np.float64)
        if r.size == 0:
            raise ValueError("metrics need at least one anchor")
        return cls(
            hits={k: float(np.mean(r <= k)) for k in HITS_KS},
            mrr=float(np.mean(1.0 / r)),
            runtime_seconds=float(runtime_seconds),
            anchor_count=int(r.size),
        )

    @classmethod
    def compute(cls, T, anchors, runtime_seconds: float = 0.0) -> "MetricsReport":
        return cls.from_ranks(ranks(T, anchors), runtime_seconds)

    def to_dict(self) -> dict:
        out = {f"hits_{k}": self.hits[k] for k in HITS_KS}
        out.update(mrr=self.mrr, runtime_seconds=self.runtime_seconds, anchor_count=self.anchor_count)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            hits={k: float(d[f"hits_{k}"]) for k in HITS_KS},
            mrr=float(d["mrr"]),
            runtime_seconds=float(d["runtime_seconds"]),
            anchor_count=int(d["anchor_count"]),
        )
