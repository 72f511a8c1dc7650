"""Quantization of a sparse decision layer to ternary (or n_Q-level) values.

The threshold keeps exactly ``n_w`` entries: the ``n_w`` largest
magnitudes, with ties at the threshold resolved by ascending flat
(row, col) index.  Kept entries become ``sign(w) * alpha`` where alpha is
their mean magnitude.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class Quantized(NamedTuple):
    Wq: np.ndarray
    alpha: float
    kept: np.ndarray  # flat indices, ascending
    epsilon: float


class MultiLevel(NamedTuple):
    Wq: np.ndarray
    levels: list
    kept: np.ndarray
    epsilon: float


def _magnitude_order(W):
    mags = np.abs(np.asarray(W, dtype=np.float64)).ravel()
    return mags, np.argsort(-mags, kind="stable")


def threshold(W, n_w: int) -> float:
    """The ``n_w``-th largest absolute entry of ``W``."""
    mags, order = _magnitude_order(W)
    if n_w < 1:
        raise ValueError("n_w must be >= 1")
    if n_w > mags.size:
        raise ValueError(f"n_w={n_w} exceeds the {mags.size} entries of W")
    return float(mags[order[n_w - 1]])


def _kept(W, n_w):
    mags, order = _magnitude_order(W)
    if n_w < 1:
        raise ValueError("n_w must be >= 1")
    nonzero = np.count_nonzero(mags)
    if nonzero < n_w:
        raise ValueError(f"only {nonzero} nonzero entries, cannot keep n_w={n_w}")
    kept = np.sort(order[:n_w])
    return mags, kept, float(mags[order[n_w - 1]])


def _mean_magnitude(m):
    # exact when all magnitudes agree, so quantizing a ternary matrix is a fixed point
    if np.all(m == m[0]):
        return float(m[0])
    return math.fsum(m.tolist()) / len(m)


def quantize_ternary(W, n_w: int) -> Quantized:
    W = np.asarray(W, dtype=np.float64)
    mags, kept, eps = _kept(W, n_w)
    alpha = _mean_magnitude(mags[kept])
    Wq = np.zeros(W.size)
    Wq[kept] = np.sign(W.ravel()[kept]) * alpha
    return Quantized(Wq.reshape(W.shape), alpha, kept, eps)


def quantize_multilevel(W, n_w: int, n_q: int) -> MultiLevel:
    """Generalisation with ``n_q - 1`` magnitude levels.

    Kept magnitudes are split into ``n_q - 1`` equal-width bins over
    ``[epsilon, max|w|]`` (last bin closed); each entry takes the signed mean
    magnitude of its bin.  ``n_q == 2`` is exactly :func:`quantize_ternary`.
    """
    if n_q < 2:
        raise ValueError("n_q must be >= 2")
    W = np.asarray(W, dtype=np.float64)
    if n_q == 2:
        q = quantize_ternary(W, n_w)
        return MultiLevel(q.Wq, [q.alpha], q.kept, q.epsilon)
    mags, kept, eps = _kept(W, n_w)
    m = mags[kept]
    top = m.max()
    n_bins = n_q - 1
    if top > eps:
        width = (top - eps) / n_bins
        bins = np.minimum(np.floor((m - eps) / width).astype(np.int64), n_bins - 1)
    else:
        bins = np.zeros(len(m), dtype=np.int64)
    values = np.empty(len(m))
    levels = []
    for k in range(n_bins):
        sel = bins == k
        if np.any(sel):
            level = _mean_magnitude(m[sel])
            values[sel] = level
            levels.append(level)
    Wq = np.zeros(W.size)
    Wq[kept] = np.sign(W.ravel()[kept]) * values
    return MultiLevel(Wq.reshape(W.shape), levels, kept, eps)


def changed_fraction(Wq_old, Wq_new) -> float:
    """Share of the new nonzero assignments that differ from the old ones.

    An assignment is a (class, feature) pair with its sign; new entries and
    sign flips both count as changed.
    """
    old, new = np.sign(Wq_old), np.sign(Wq_new)
    active = new != 0
    if not np.any(active):
        return 0.0
    return float(np.count_nonzero(old[active] != new[active]) / np.count_nonzero(active))
