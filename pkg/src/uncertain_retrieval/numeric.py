"""Dense primitives shared by every other module.

Feature batches are plain ``float64`` arrays of shape ``(B, D)``.
"""
from dataclasses import dataclass

import numpy as np

EPSILON_FLOOR = 1e-6


class NonFiniteError(ValueError):
    pass


@dataclass(frozen=True)
class BatchStats:
    mu: np.ndarray
    sigma: np.ndarray
    sigma_scalar: float

    @property
    def dim(self):
        return self.mu.shape[0]


def as_features(batch, name="features"):
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name}: expected a non-empty (B, D) matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite feature in {name}")
    return arr


def compute_stats(batch, eps=EPSILON_FLOOR):
    """Per-dimension mean and population std over the batch axis, std floored at ``eps``."""
    arr = as_features(batch)
    if arr.shape[0] < 2:
        raise ValueError("degenerate batch: need at least 2 rows for batch statistics")
    mu = arr.mean(axis=0)
    sigma = np.maximum(arr.std(axis=0), eps)
    return BatchStats(mu=mu, sigma=sigma, sigma_scalar=float(sigma.mean()))


def whiten(batch, stats):
    arr = as_features(batch)
    if arr.shape[1] != stats.dim:
        raise ValueError(f"dimension mismatch: batch has D={arr.shape[1]}, stats have D={stats.dim}")
    return (arr - stats.mu) / stats.sigma


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(queries, gallery):
    """Pairwise cosine similarity, rows = queries, cols = gallery items."""
    q = as_features(queries, "queries")
    g = as_features(gallery, "gallery")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: queries D={q.shape[1]}, gallery D={g.shape[1]}")
    qn = np.sqrt(np.einsum("ij,ij->i", q, q))
    gn = np.sqrt(np.einsum("ij,ij->i", g, g))
    if np.any(qn == 0.0) or np.any(gn == 0.0):
        raise ValueError("zero-norm embedding")
    return (q / qn[:, None]) @ (g / gn[:, None]).T


def logsumexp(scores, axis=-1, keepdims=False):
    scores = np.asarray(scores, dtype=np.float64)
    m = np.max(scores, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(scores - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def log_softmax_row(scores):
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("non-finite score")
    return s - logsumexp(s, axis=-1, keepdims=True)
