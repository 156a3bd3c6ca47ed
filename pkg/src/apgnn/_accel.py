"""Hot loops used by the model, the graph builder and the evaluator.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with the same contract.  Set ``APGNN_DISABLE_NUMBA=1`` (or run on a
machine without numba) to route the public names to the numpy versions.
Both variants stay importable as ``*_numba`` / ``*_numpy`` so they can be
compared against each other.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

NUMBA_ENABLED = _HAVE_NUMBA and os.environ.get("APGNN_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")


def _njit(fn):
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------- scatter-add


def scatter_add_rows_numpy(out, idx, src):
    """``out[idx[k]] += src[k]`` for every k, accumulating duplicates."""
    np.add.at(out, idx, src)
    return out


@_njit
def scatter_add_rows_numba(out, idx, src):
    d = out.shape[1]
    for k in range(idx.shape[0]):
        r = idx[k]
        for j in range(d):
            out[r, j] += src[k, j]
    return out


# ---------------------------------------------------------- transition counts


def count_transitions_numpy(flat, offsets, n):
    """Count adjacent pairs inside each segment ``flat[offsets[s]:offsets[s+1]]``.

    Pairs that straddle a segment boundary are not counted.
    """
    counts = np.zeros((n, n), dtype=np.int64)
    if flat.shape[0] < 2:
        return counts
    src = flat[:-1]
    dst = flat[1:]
    keep = np.ones(src.shape[0], dtype=bool)
    # position p pairs flat[p] with flat[p+1]; drop p == end-of-segment - 1
    ends = offsets[1:-1] - 1
    keep[ends[(ends >= 0) & (ends < keep.shape[0])]] = False
    np.add.at(counts, (src[keep], dst[keep]), 1)
    return counts


@_njit
def count_transitions_numba(flat, offsets, n):
    counts = np.zeros((n, n), dtype=np.int64)
    for s in range(offsets.shape[0] - 1):
        for p in range(offsets[s], offsets[s + 1] - 1):
            counts[flat[p], flat[p + 1]] += 1
    return counts


# ------------------------------------------------------------ masked max-pool


def masked_max_numpy(x, mask):
    """Max over axis 1 of ``x`` (G, L, d) restricted to ``mask`` (G, L).

    Returns ``(values, argmax)``; ties resolve to the first index, fully
    masked groups yield value 0 and argmax -1.
    """
    neg = np.where(mask[:, :, None], x, -np.inf)
    arg = np.argmax(neg, axis=1)
    vals = np.take_along_axis(neg, arg[:, None, :], axis=1)[:, 0, :]
    empty = ~mask.any(axis=1)
    if empty.any():
        vals[empty] = 0.0
        arg[empty] = -1
    return vals.astype(x.dtype, copy=False), arg.astype(np.int64, copy=False)


@_njit
def masked_max_numba(x, mask):
    g, L, d = x.shape
    vals = np.zeros((g, d), dtype=x.dtype)
    arg = np.full((g, d), -1, dtype=np.int64)
    for i in range(g):
        for l in range(L):
            if not mask[i, l]:
                continue
            for j in range(d):
                if arg[i, j] < 0 or x[i, l, j] > vals[i, j]:
                    vals[i, j] = x[i, l, j]
                    arg[i, j] = l
    return vals, arg


# ---------------------------------------------------------------------- ranks


def label_ranks_numpy(scores, labels):
    """1-based rank of each label; ties go to the lower item index."""
    rows = np.arange(scores.shape[0])
    target = scores[rows, labels][:, None]
    higher = (scores > target).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == target) & (cols < labels[:, None])).sum(axis=1)
    return (1 + higher + tied_before).astype(np.int64)


@_njit
def label_ranks_numba(scores, labels):
    b, v = scores.shape
    out = np.empty(b, dtype=np.int64)
    for i in range(b):
        lab = labels[i]
        t = scores[i, lab]
        r = 1
        for j in range(v):
            s = scores[i, j]
            if s > t or (s == t and j < lab):
                r += 1
        out[i] = r
    return out


if NUMBA_ENABLED:
    scatter_add_rows = scatter_add_rows_numba
    count_transitions = count_transitions_numba
    masked_max = masked_max_numba
    label_ranks = label_ranks_numba
else:
    scatter_add_rows = scatter_add_rows_numpy
    count_transitions = count_transitions_numpy
    masked_max = masked_max_numpy
    label_ranks = label_ranks_numpy

__all__ = [
    "NUMBA_ENABLED",
    "scatter_add_rows",
    "count_transitions",
    "masked_max",
    "label_ranks",
]
