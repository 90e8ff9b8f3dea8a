"""Learned pairwise adjacency over node features.

Each edge weight comes from a single-layer scorer on the concatenated pair
``[x_i || x_j]`` followed by a relu and a row softmax. An initial graph, when
available, weights the softmax so that edges absent from it stay absent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, DegenerateRowError, DimensionError


@dataclass
class LearnedGraph:
    adjacency: Tensor
    support: Optional[np.ndarray] = None


def pairwise_logits(features: Tensor, theta: Tensor) -> Tensor:
    """``relu(theta^T [x_i || x_j])`` for every ordered node pair.

    With ``theta = [t1; t2]`` the score splits into ``x_i.t1 + x_j.t2``, so the
    n x n matrix is an outer sum of two n-vectors rather than n^2 dot products.
    """
    width = features.cols
    if theta.shape != (2 * width, 1):
        raise DimensionError(
            f"pairwise_logits: theta must be ({2 * width}, 1) for feature width {width}, got {theta.shape}"
        )
    t1, t2 = dc.split_rows(theta, width)
    return dc.relu(dc.outer_sum(dc.matmul(features, t1), dc.matmul(features, t2)))


def _check_support(support: np.ndarray, n: int) -> np.ndarray:
    support = np.asarray(support, dtype=np.float64)
    if support.shape != (n, n):
        raise DimensionError(f"support must be ({n}, {n}), got {support.shape}")
    if (support < 0).any():
        raise ContractError("support weights must be nonnegative")
    empty = ~(support > 0).any(axis=1)
    if empty.any():
        raise DegenerateRowError(f"support rows {np.flatnonzero(empty).tolist()} are all zero")
    return support


def learned_adjacency(features: Tensor, theta: Tensor, support: Optional[np.ndarray] = None) -> LearnedGraph:
    """Row-stochastic adjacency learned from ``features``.

    The initial graph enters as a multiplicative weight inside the softmax, in
    both numerator and denominator, so rows still sum to one.
    """
    logits = pairwise_logits(features, theta)
    if support is None:
        return LearnedGraph(dc.row_softmax(logits))
    support = _check_support(support, features.rows)
    return LearnedGraph(dc.row_softmax(logits, mask=support), support)


def row_normalized_laplacian(adjacency: Tensor) -> Tensor:
    """``D^-1 A`` with ``D`` the diagonal of row sums."""
    if (adjacency.value < 0).any():
        raise ContractError("adjacency must be nonnegative")
    return dc.row_normalize(adjacency)


def fixed_propagation(n: int, support: Optional[np.ndarray] = None) -> Tensor:
    """Row-normalized initial graph (complete graph when none is given).

    Used in place of a learned graph when graph learning is switched off.
    """
    if support is None:
        return dc.constant(np.full((n, n), 1.0 / n))
    support = _check_support(support, n)
    return dc.constant(support / support.sum(axis=1, keepdims=True))
