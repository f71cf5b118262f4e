"""Similarity kernels over token multi-vectors.

Cosines are computed as ``dot / sqrt(|a|^2 |b|^2)`` with elementwise
products reduced along the last axis. With IEEE arithmetic
``sqrt(x*x) == x``, so identical vectors score exactly 1.0, and every pair's
score depends only on that pair, so batched and one-at-a-time scoring agree
bitwise.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import ConfigError, ValidationError
from .ingest import MultiVector

NORM_EPS = 1e-12


class MatchStrategy(str, Enum):
    MAX_MAX = "max-max"
    MAX_SUM = "max-sum"
    MAX_MEAN = "max-mean"


def _as_tokens(x) -> np.ndarray:
    return np.asarray(getattr(x, "vectors", x), dtype=np.float64)


def cosine_tensor(q: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Pairwise cosines ``(..., M, N)`` between ``q (..., M, dim)`` and ``d (..., N, dim)``."""
    if q.shape[-1] != d.shape[-1]:
        raise ConfigError(f"dimension mismatch: {q.shape[-1]} vs {d.shape[-1]}")
    dots = (q[..., :, None, :] * d[..., None, :, :]).sum(axis=-1)
    qn2 = (q * q).sum(axis=-1)
    dn2 = (d * d).sum(axis=-1)
    denom = np.sqrt(qn2[..., :, None] * dn2[..., None, :])
    live = (np.sqrt(qn2)[..., :, None] >= NORM_EPS) & (np.sqrt(dn2)[..., None, :] >= NORM_EPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(live, dots / np.where(live, denom, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"cosine needs equal-length vectors, got {a.shape} and {b.shape}")
    return float(cosine_tensor(a[None, :], b[None, :])[0, 0])


def match_matrix(q, d) -> np.ndarray:
    """``M x N`` matrix of cosines between query tokens and document tokens."""
    q, d = _as_tokens(q), _as_tokens(d)
    if q.ndim != 2 or d.ndim != 2 or len(q) == 0 or len(d) == 0:
        raise ValidationError("match_matrix needs nonempty 2-D token lists")
    return cosine_tensor(q, d)


def sim_max_max(mm: np.ndarray) -> float:
    return float(np.max(mm))


def sim_max_sum(mm: np.ndarray) -> float:
    return float(np.max(mm, axis=-1).sum())


def sim_max_mean(mm: np.ndarray) -> float:
    return sim_max_sum(mm) / mm.shape[0]


def similarity(mm: np.ndarray, strategy: MatchStrategy | str = MatchStrategy.MAX_MAX) -> float:
    strategy = MatchStrategy(strategy)
    if strategy is MatchStrategy.MAX_MAX:
        return sim_max_max(mm)
    if strategy is MatchStrategy.MAX_SUM:
        return sim_max_sum(mm)
    return sim_max_mean(mm)


def unirank_score(q_rank: MultiVector | np.ndarray, d_rank: MultiVector | np.ndarray) -> float:
    """Late-interaction score: sum over query tokens of the best document cosine."""
    return float(np.max(match_matrix(q_rank, d_rank), axis=-1).sum())


def unirank_scores(q_rank: MultiVector | np.ndarray, docs: np.ndarray) -> np.ndarray:
    """Scores of one query against a stack of documents ``(C, N, dim)``."""
    q = _as_tokens(q_rank)
    docs = np.asarray(docs, dtype=np.float64)
    if docs.shape[0] == 0:
        return np.zeros(0)
    cos = cosine_tensor(np.broadcast_to(q, (docs.shape[0],) + q.shape), docs)
    return np.max(cos, axis=-1).sum(axis=-1)
