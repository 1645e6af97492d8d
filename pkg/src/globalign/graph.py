"""Attributed graphs, alignment instances, text I/O and edge perturbation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .sparse import SparseMatrix

log = logging.getLogger(__name__)


class InputError(ValueError):
    """Malformed or inconsistent input files."""


def _canonical_edges(edges: np.ndarray) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edges = np.sort(edges, axis=1)
    edges = edges[edges[:, 0] != edges[:, 1]]
    if edges.shape[0] == 0:
        return edges
    return np.unique(edges, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph.

    ``edges`` holds each undirected pair once as ``(i, j)`` with ``i < j``,
    lexicographically sorted.  ``features`` has one row per node.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        edges = _canonical_edges(self.edges)
        object.__setattr__(self, "edges", edges)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features[:, None]
        object.__setattr__(self, "features", features)
        if features.shape[0] != self.n:
            raise InputError(f"feature matrix has {features.shape[0]} rows but the graph has {self.n} nodes")
        if edges.size and (edges.min() < 0 or edges.max() >= self.n):
            raise InputError(f"edge endpoint out of range for a {self.n}-node graph")
        if features.shape[1] and np.any(np.all(np.isnan(features), axis=1)):
            raise InputError("feature matrix has an all-NaN row")

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @cached_property
    def adjacency(self) -> SparseMatrix:
        """Symmetric binary adjacency with zero diagonal."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        return SparseMatrix.from_coo(rows, cols, np.ones(rows.shape[0]), (self.n, self.n))

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    @property
    def average_degree(self) -> float:
        return 2.0 * self.num_edges / self.n if self.n else 0.0

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(self.n, self.edges, features)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AlignmentInstance:
    """A source/target pair with ``source.n <= target.n``.

    ``anchors`` are ground-truth ``(source, target)`` pairs used only for
    scoring, stored in the internal orientation.  ``swapped`` records whether
    the input files were exchanged to satisfy the size ordering.
    """

    source: Graph
    target: Graph
    anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    swapped: bool = False

    def __post_init__(self):
        anchors = np.asarray(self.anchors, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "anchors", anchors)
        if self.source.n > self.target.n:
            raise InputError("source graph must not be larger than the target graph")
        if anchors.size:
            if anchors[:, 0].min() < 0 or anchors[:, 0].max() >= self.source.n:
                raise InputError("anchor source index out of range")
            if anchors[:, 1].min() < 0 or anchors[:, 1].max() >= self.target.n:
                raise InputError("anchor target index out of range")
            if np.unique(anchors[:, 0]).shape[0] != anchors.shape[0]:
                raise InputError("a source node appears in more than one anchor")

    @classmethod
    def oriented(cls, first: Graph, second: Graph, anchors=None) -> "AlignmentInstance":
        """Build an instance from graphs in file order, swapping if needed."""
        anchors = np.zeros((0, 2), dtype=np.int64) if anchors is None else np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
        if first.n <= second.n:
            return cls(first, second, anchors, swapped=False)
        return cls(second, first, anchors[:, ::-1].copy(), swapped=True)


# -- text formats --------------------------------------------------------------


def _data_lines(path: Path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def read_pairs(path: str | Path) -> np.ndarray:
    """Read whitespace-separated non-negative integer pairs, one per line."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    pairs = []
    for lineno, line in _data_lines(path):
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise InputError(f"{path}:{lineno}: expected two integers, got {line!r}") from None
        if a < 0 or b < 0:
            raise InputError(f"{path}:{lineno}: negative node index")
        pairs.append((a, b))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def read_features(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    rows = []
    width = None
    for lineno, line in _data_lines(path):
        try:
            row = [float(x) for x in line.split()]
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric feature value") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise InputError(f"{path}:{lineno}: expected {width} values, got {len(row)}")
        rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)


def load_graph(edges_path: str | Path, features_path: str | Path) -> Graph:
    """Load a graph; the node count is the number of feature rows."""
    pairs = read_pairs(edges_path)
    features = read_features(features_path)
    n = features.shape[0]
    implied = int(pairs.max()) + 1 if pairs.size else 0
    if implied > n:
        raise InputError(
            f"{features_path} has {n} feature rows but {edges_path} references {implied} nodes"
        )
    loops = int(np.sum(pairs[:, 0] == pairs[:, 1])) if pairs.size else 0
    if loops:
        log.warning("%s: dropped %d self-loop(s)", edges_path, loops)
    return Graph(n, pairs, features)


def load_instance(
    source_edges_path,
    source_features_path,
    target_edges_path,
    target_features_path,
    anchors_path=None,
) -> AlignmentInstance:
    source = load_graph(source_edges_path, source_features_path)
    target = load_graph(target_edges_path, target_features_path)
    anchors = None
    if anchors_path is not None:
        anchors = read_pairs(anchors_path)
        if anchors.size and (anchors[:, 0].max() >= source.n or anchors[:, 1].max() >= target.n):
            raise InputError(f"{anchors_path}: anchor index out of range")
    return AlignmentInstance.oriented(source, target, anchors)


def save_edges(edges: np.ndarray, path: str | Path) -> None:
    with open(path, "w") as fh:
        for i, j in np.asarray(edges):
            fh.write(f"{i} {j}\n")


def save_features(features: np.ndarray, path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in np.asarray(features):
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def save_graph(g: Graph, edges_path: str | Path, features_path: str | Path) -> None:
    save_edges(g.edges, edges_path)
    save_features(g.features, features_path)


# -- transformations -------------------------------------------------------------


def standardize_features(X: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm; all-zero rows stay zero."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0, norms, 1.0)


def _sample_non_edges(n: int, forbidden: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct unordered pairs not in ``forbidden`` (codes ``i*n+j``, i<j)."""
    total = n * (n - 1) // 2
    if total - forbidden.shape[0] < count:
        raise ValueError("not enough non-edges to insert")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if total <= 4 * (forbidden.shape[0] + count):
        iu, ju = np.triu_indices(n, k=1)
        codes = iu * n + ju
        free = codes[~np.isin(codes, forbidden)]
        chosen = rng.choice(free, size=count, replace=False)
    else:
        chosen = np.zeros(0, dtype=np.int64)
        while chosen.shape[0] < count:
            batch = 2 * (count - chosen.shape[0]) + 16
            a = rng.integers(0, n, size=batch)
            b = rng.integers(0, n, size=batch)
            keep = a != b
            lo, hi = np.minimum(a, b)[keep], np.maximum(a, b)[keep]
            cand = lo * n + hi
            cand = cand[~np.isin(cand, forbidden)]
            cand = cand[~np.isin(cand, chosen)]
            # first occurrence wins so the draw order stays reproducible
            _, first = np.unique(cand, return_index=True)
            cand = cand[np.sort(first)]
            chosen = np.concatenate([chosen, cand[: count - chosen.shape[0]]])
    return np.stack([chosen // n, chosen % n], axis=1)


def perturb_edges(g: Graph, ratio: float, seed: int) -> Graph:
    """Replace ``floor(ratio * |E|)`` random edges by as many random non-edges.

    Inserted pairs are drawn among the non-edges of the input graph, so the
    edge count is preserved exactly.  Isolated nodes are kept.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    m = g.num_edges
    count = int(np.floor(ratio * m))
    if count == 0:
        return Graph(g.n, g.edges.copy(), g.features.copy())
    rng = np.random.default_rng(seed)
    removed = rng.choice(m, size=count, replace=False)
    keep = np.ones(m, dtype=bool)
    keep[removed] = False
    codes = g.edges[:, 0] * g.n + g.edges[:, 1]
    added = _sample_non_edges(g.n, codes, count, rng)
    return Graph(g.n, np.concatenate([g.edges[keep], added]), g.features.copy())


def random_graph(n: int, average_degree: float, seed: int, feature_dim: int = 16, one_hot: bool = False) -> Graph:
    """Uniform random graph with ``round(n * average_degree / 2)`` edges.

    Features are Gaussian; with ``one_hot=True`` an identity block is
    appended so every node has a distinct feature vector.
    """
    rng = np.random.default_rng(seed)
    m = int(round(n * average_degree / 2))
    edges = _sample_non_edges(n, np.zeros(0, dtype=np.int64), m, rng)
    features = rng.standard_normal((n, feature_dim))
    if one_hot:
        features = np.hstack([features, np.eye(n)])
    return Graph(n, edges, features)


def relabel(g: Graph, perm: np.ndarray) -> Graph:
    """Copy of ``g`` in which node ``i`` becomes node ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (g.n,) or not np.array_equal(np.sort(perm), np.arange(g.n)):
        raise ValueError("perm must be a permutation of the node indices")
    features = np.empty_like(g.features)
    features[perm] = g.features
    return Graph(g.n, perm[g.edges], features)


def self_copy_instance(g: Graph, ratio: float = 0.0, seed: int = 0, permute: bool = False) -> AlignmentInstance:
    """Align ``g`` with a (possibly perturbed) copy of itself.

    The ground truth is the identity map, or with ``permute=True`` a random
    relabeling of the copy so that node order carries no information.
    """
    target = perturb_edges(g, ratio, seed)
    perm = np.arange(g.n)
    if permute:
        perm = np.random.default_rng(seed + 1).permutation(g.n)
        target = relabel(target, perm)
    anchors = np.stack([np.arange(g.n), perm], axis=1)
    return AlignmentInstance(g, target, anchors)
