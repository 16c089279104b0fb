"""Ranking kernels used by the retrieval evaluator.

Each kernel has a numba loop form and a vectorized numpy form. They return
identical integers; ``USE_NUMBA`` picks the one bound to the public name.
"""
import numpy as np

from ._accel import HAS_NUMBA, USE_NUMBA, numba_default


def _target_ranks_loop(sim, targets):
    n_query, n_gallery = sim.shape
    out = np.empty(n_query, dtype=np.int64)
    for q in range(n_query):
        t = targets[q]
        s_t = sim[q, t]
        r = 0
        for g in range(n_gallery):
            s = sim[q, g]
            if s > s_t or (s == s_t and g < t):
                r += 1
        out[q] = r
    return out


def _best_ranks_loop(sim, valid):
    # valid: (n_query, width) gallery ids, padded with -1
    n_query, n_gallery = sim.shape
    width = valid.shape[1]
    out = np.empty(n_query, dtype=np.int64)
    for q in range(n_query):
        best = n_gallery
        for c in range(width):
            t = valid[q, c]
            if t < 0:
                continue
            s_t = sim[q, t]
            r = 0
            for g in range(n_gallery):
                s = sim[q, g]
                if s > s_t or (s == s_t and g < t):
                    r += 1
            if r < best:
                best = r
        out[q] = best
    return out


def target_ranks_numpy(sim, targets):
    """0-based rank of ``targets[q]`` in row ``q`` (descending score, ties by id)."""
    sim = np.asarray(sim, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(sim.shape[0])
    s_t = sim[rows, targets][:, None]
    ids = np.arange(sim.shape[1])[None, :]
    above = (sim > s_t) | ((sim == s_t) & (ids < targets[:, None]))
    return above.sum(axis=1).astype(np.int64)


def best_ranks_numpy(sim, valid):
    """Best 0-based rank over each row's set of ``valid`` ids (``-1`` = padding)."""
    sim = np.asarray(sim, dtype=np.float64)
    valid = np.asarray(valid, dtype=np.int64)
    out = np.full(sim.shape[0], sim.shape[1], dtype=np.int64)
    for c in range(valid.shape[1]):
        col = valid[:, c]
        mask = col >= 0
        if not mask.any():
            continue
        r = target_ranks_numpy(sim[mask], col[mask])
        out[mask] = np.minimum(out[mask], r)
    return out


if HAS_NUMBA:
    import numba

    target_ranks_numba = numba.njit(**numba_default)(_target_ranks_loop)
    best_ranks_numba = numba.njit(**numba_default)(_best_ranks_loop)
else:  # pragma: no cover
    target_ranks_numba = None
    best_ranks_numba = None


def target_ranks(sim, targets):
    if USE_NUMBA:
        return target_ranks_numba(
            np.ascontiguousarray(sim, dtype=np.float64),
            np.ascontiguousarray(targets, dtype=np.int64),
        )
    return target_ranks_numpy(sim, targets)


def best_ranks(sim, valid):
    if USE_NUMBA:
        return best_ranks_numba(
            np.ascontiguousarray(sim, dtype=np.float64),
            np.ascontiguousarray(valid, dtype=np.int64),
        )
    return best_ranks_numpy(sim, valid)


def rank_order(scores):
    """Gallery ids sorted by descending score, ascending id on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.shape[0]), -scores))
