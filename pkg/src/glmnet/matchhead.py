"""Affinity, Sinkhorn normalization, matching losses and discretization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffcore as dc
from .convembed import EmbeddingPair
from .diffcore import Tensor
from .errors import ContractError, DimensionError

Pairs = list[tuple[int, int]]

EXP_FLOOR = -600.0


@dataclass
class MatchPrediction:
    soft: np.ndarray
    hard: Pairs = field(default_factory=list)

    @classmethod
    def from_soft(cls, soft, method: str = "hungarian") -> "MatchPrediction":
        soft = soft.value if isinstance(soft, Tensor) else np.asarray(soft, dtype=np.float64)
        if method == "hungarian":
            hard = hungarian_discretize(soft)
        elif method == "argmax":
            hard = argmax_discretize(soft)
        else:
            raise ValueError(f"unknown discretization {method!r}")
        return cls(np.array(soft), hard)


def affinity_scores(emb: EmbeddingPair, m_weight: Tensor, delta_p: float) -> Tensor:
    """``X M Y^T / delta_p``: the log of the affinity matrix."""
    if delta_p <= 0.0:
        raise ContractError(f"delta_p must be positive, got {delta_p}")
    return dc.scale(dc.matmul(dc.matmul(emb.x, m_weight), dc.transpose(emb.y)), 1.0 / delta_p)


def affinity_matrix(emb: EmbeddingPair, m_weight: Tensor, delta_p: float) -> Tensor:
    """``exp(X M Y^T / delta_p)``, shifted by the global max score.

    The shift is a constant factor on every entry, which Sinkhorn removes.
    Shifted exponents are floored at ``EXP_FLOOR`` so no entry underflows to
    zero; entries that low carry no weight after normalization anyway.
    """
    scores = affinity_scores(emb, m_weight, delta_p)
    shifted = dc.add_scalar(scores, -float(scores.value.max()))
    if shifted.value.min() < EXP_FLOOR:
        shifted = dc.clip(shifted, EXP_FLOOR, 0.0)
    return dc.exp(shifted)


def sinkhorn(c_tilde: Tensor, iterations: int = 20, epsilon: float = 1e-12) -> Tensor:
    """Alternate row and column normalization ``iterations`` times.

    For square input the result is approximately doubly stochastic. When there
    are fewer rows than columns a final row pass makes the rows exact; with
    more rows than columns the last (column) pass already makes columns exact.
    """
    if iterations < 1:
        raise ContractError("sinkhorn needs at least one iteration")
    if (c_tilde.value <= 0).any():
        raise ContractError("sinkhorn input must be strictly positive")
    c = c_tilde
    for _ in range(iterations):
        c = dc.row_normalize(c, epsilon)
        c = dc.col_normalize(c, epsilon)
    if c.rows < c.cols:
        c = dc.row_normalize(c, epsilon)
    return c


def log_sinkhorn(scores: Tensor, iterations: int = 20) -> Tensor:
    """``sinkhorn(exp(scores))`` with every normalization done on logs.

    Same pass schedule as ``sinkhorn``. Working on logs means no entry can
    underflow to zero, so gradients reach every score however large the
    scores grow.
    """
    if iterations < 1:
        raise ContractError("sinkhorn needs at least one iteration")
    log_c = scores
    for _ in range(iterations):
        log_c = dc.log_row_normalize(log_c)
        log_c = dc.log_col_normalize(log_c)
    if log_c.rows < log_c.cols:
        log_c = dc.log_row_normalize(log_c)
    return dc.exp(log_c)


def constraint_loss(c: Tensor) -> Tensor:
    """Sum of products of assignment pairs that share a row or a column.

    Uses ``sum_ij C_ij (R_i + S_j - 2 C_ij) = |R|^2 + |S|^2 - 2 |C|^2`` with row
    sums R and column sums S, so the mn x mn conflict matrix is never built.
    """
    rows = dc.sum(dc.square(dc.row_sums(c)))
    cols = dc.sum(dc.square(dc.col_sums(c)))
    diag = dc.sum(dc.square(c))
    return dc.sub(dc.add(rows, cols), dc.scale(diag, 2.0))


def conflict_matrix(m: int, n: int) -> np.ndarray:
    """``U[(i,j),(k,l)] = 1`` iff exactly one of ``i == k``, ``j == l`` holds."""
    i = np.repeat(np.arange(m), n)
    j = np.tile(np.arange(n), m)
    same_row = i[:, None] == i[None, :]
    same_col = j[:, None] == j[None, :]
    return (same_row ^ same_col).astype(np.float64)


def constraint_loss_bruteforce(c) -> float:
    """Literal quadratic form over the materialized conflict matrix. Test oracle."""
    c = c.value if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64)
    m, n = c.shape
    if m * n > 10_000:
        raise ContractError(f"bruteforce constraint loss limited to m*n <= 1e4, got {m * n}")
    vec = c.reshape(-1)
    u = conflict_matrix(m, n)
    return float(vec @ u @ vec)


def cross_entropy_loss(c: Tensor, truth, clamp: float = 1e-7) -> Tensor:
    """Entrywise binary cross entropy against a 0/1 ground truth, summed."""
    p = np.asarray(truth.value if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if p.shape != c.shape:
        raise DimensionError(f"cross_entropy_loss: prediction {c.shape} vs truth {p.shape}")
    if not 0.0 < clamp < 0.5:
        raise ContractError("clamp must lie in (0, 0.5)")
    # exact clip gradients vanish on saturated entries, which lets confident
    # mistakes stop opposing further growth of the scores
    cc = dc.clip(c, clamp, 1.0 - clamp, straight_through=True)
    pos = dc.mul(dc.constant(p), dc.log(cc))
    neg = dc.mul(dc.constant(1.0 - p), dc.log(dc.add_scalar(dc.scale(cc, -1.0), 1.0)))
    return dc.scale(dc.sum(dc.add(pos, neg)), -1.0)


def loss_terms(c: Tensor, truth, lam: float = 0.1, clamp: float = 1e-7) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, cross_entropy, constraint)`` with ``total = ce + lam * constraint``."""
    if lam < 0.0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    sol = cross_entropy_loss(c, truth, clamp)
    con = constraint_loss(c)
    if lam == 0.0:
        return sol, sol, con
    return dc.add(sol, dc.scale(con, lam)), sol, con


def total_loss(c: Tensor, truth, lam: float = 0.1, clamp: float = 1e-7) -> Tensor:
    return loss_terms(c, truth, lam, clamp)[0]


def hungarian_discretize(c) -> Pairs:
    """Maximum-score one-to-one assignment of ``min(m, n)`` pairs."""
    c = np.asarray(c.value if isinstance(c, Tensor) else c, dtype=np.float64)
    rows, cols = linear_sum_assignment(c, maximize=True)
    return [(int(i), int(j)) for i, j in zip(rows, cols)]


def argmax_discretize(c) -> Pairs:
    """Row-wise argmax; may assign a column more than once."""
    c = np.asarray(c.value if isinstance(c, Tensor) else c, dtype=np.float64)
    return [(i, int(j)) for i, j in enumerate(c.argmax(axis=1))]


def truth_pairs(truth) -> set[tuple[int, int]]:
    p = np.asarray(truth.value if isinstance(truth, Tensor) else truth)
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(p > 0.5))}


def matching_accuracy(pred, truth) -> float:
    """Fraction of ground-truth pairs present in the prediction."""
    expected = truth_pairs(truth)
    if not expected:
        raise ContractError("matching accuracy is undefined without ground-truth matches")
    pairs: Iterable[tuple[int, int]] = pred.hard if isinstance(pred, MatchPrediction) else pred
    hits = sum(1 for pair in set(map(tuple, pairs)) if pair in expected)
    return hits / len(expected)


def nearest_neighbor_pairs(x: np.ndarray, y: np.ndarray, method: str = "hungarian") -> Pairs:
    """Match raw features by squared Euclidean distance."""
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    return hungarian_discretize(-d) if method == "hungarian" else argmax_discretize(-d)
