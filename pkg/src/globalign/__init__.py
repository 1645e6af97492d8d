"""Unsupervised attributed graph alignment with hierarchical optimal transport.

The dense variant builds full relation matrices and a Gromov-Wasserstein term
in cubic time; the efficient variant restricts the relation matrices to a
sparse support derived from personalized PageRank and feature similarity.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .graph import AlignmentInstance, Graph, InputError, load_graph, load_instance, perturb_edges
from .metrics import MetricsReport, hits_at_k, mrr
from .trainer import AlignmentResult, Config, NumericalError, align
from .transport import Coupling, sinkhorn

__all__ = [
    "AlignmentInstance",
    "AlignmentResult",
    "Config",
    "Coupling",
    "Graph",
    "InputError",
    "MetricsReport",
    "NumericalError",
    "align",
    "hits_at_k",
    "load_graph",
    "load_instance",
    "mrr",
    "perturb_edges",
    "sinkhorn",
]
