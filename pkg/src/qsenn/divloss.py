"""Spatial softmax, the Loc@k diversity measure and the diversity loss.

Feature maps are arrays of shape ``(..., h, w)``.  Loc@k for one sample
takes the k feature maps with the largest head weight for a class, turns
each into a spatial distribution with a softmax and sums the cell-wise
maximum over those k distributions, divided by k.  The diversity loss used
in training is ``1 - Loc@k`` on the ground-truth class, averaged over the
batch.
"""
from __future__ import annotations

import numpy as np


class EmptyClassError(ValueError):
    """A class has no nonzero weight, so Loc@k is undefined for it."""


def spatial_softmax(maps):
    m = np.asarray(maps, dtype=np.float64)
    flat = m.reshape(m.shape[:-2] + (-1,))
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(m.shape)


def top_features(weights_row, k):
    """Indices of the (up to) k largest |w| among nonzero entries; ties by index."""
    w = np.abs(np.asarray(weights_row, dtype=np.float64))
    order = np.argsort(-w, kind="stable")
    order = order[w[order] > 0]
    if len(order) == 0:
        raise EmptyClassError("class has no nonzero weights")
    return order[:k]


def class_top_features(head, k):
    """Per-class top-k feature lists, ranked by weight on the raw features.

    Classes without any nonzero weight map to ``None``.
    """
    eff = head.effective_weights()
    tops = []
    for row in eff:
        try:
            tops.append(top_features(row, k))
        except EmptyClassError:
            tops.append(None)
    return tops


def _loc_value(S, best):
    """Loc from softmaxes ``S`` (..., k, cells) and their cell-wise maximum.

    Written as ``(1 + sum(best - S_first)) / k``, equal to ``sum(best) / k``
    because every softmax sums to one, but exact when all maps coincide and
    never below ``1 / k``.
    """
    k = S.shape[-2]
    return (1.0 + np.sum(best - S[..., 0, :], axis=-1)) / k


def _loc_from_selected(sel):
    """sel: (k, h, w) maps. Returns Loc value and the argmax map per cell."""
    S = spatial_softmax(sel)
    k = S.shape[0]
    flat = S.reshape(k, -1)
    winner = flat.argmax(axis=0)  # ties go to the lowest map index
    return _loc_value(flat, flat[winner, np.arange(flat.shape[1])]), S, winner


def loc_at_k(maps, head, predicted_class, k=5):
    """Loc@k of one sample's feature maps (n_f, h, w) for a class."""
    idx = top_features(head.effective_weights()[predicted_class], k)
    value, _, _ = _loc_from_selected(np.asarray(maps, dtype=np.float64)[idx])
    return float(value)


def feature_diversity_loss(maps, head, labels, k=5, skip_empty=False):
    """Mean of ``1 - Loc@k`` over a batch, with its gradient w.r.t. ``maps``.

    maps: (B, n_f, h, w).  The max over maps is differentiated at the
    winning map of each cell.  With ``skip_empty`` samples whose class has no
    nonzero weight contribute zero instead of raising.
    """
    M = np.asarray(maps, dtype=np.float64)
    labels = np.asarray(labels)
    B = M.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    grad = np.zeros_like(M)
    tops = class_top_features(head, k)
    total = 0.0
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        idx = tops[c]
        if idx is None:
            if skip_empty:
                continue
            raise EmptyClassError(f"class {c} has no nonzero weights")
        kk = len(idx)
        sel = M[rows][:, idx]  # (r, kk, h, w)
        r = len(rows)
        flat = sel.reshape(r, kk, -1)
        flat = flat - flat.max(axis=-1, keepdims=True)
        e = np.exp(flat)
        S = e / e.sum(axis=-1, keepdims=True)
        winner = S.argmax(axis=1)  # (r, cells)
        best = np.take_along_axis(S, winner[:, None, :], axis=1)[:, 0, :]
        loc = _loc_value(S, best)
        total += np.sum(1.0 - loc)
        # d(1 - loc)/dS is -1/kk at winners; push through the softmax Jacobian
        gS = np.zeros_like(S)
        np.put_along_axis(gS, winner[:, None, :], -1.0 / kk, axis=1)
        gU = S * (gS - np.sum(gS * S, axis=-1, keepdims=True))
        g = np.zeros((r,) + M.shape[1:])
        g[:, idx] = gU.reshape(sel.shape)
        grad[rows] += g / B
    return total / B, grad


def cross_entropy(logits, labels):
    """Mean cross-entropy with gradient w.r.t. the logits."""
    Z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B = Z.shape[0]
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    S = E.sum(axis=1, keepdims=True)
    loss = np.mean(np.log(S[:, 0]) - Z[np.arange(B), labels])
    G = E / S
    G[np.arange(B), labels] -= 1.0
    return float(loss), G / B


def combined_loss(logits, labels, maps, head, lambda_fd, k=5, skip_empty=False):
    """``CE + lambda_fd * L_FD``; returns (loss, d/dlogits, d/dmaps, parts)."""
    if lambda_fd < 0:
        raise ValueError("lambda_fd must be non-negative")
    ce, g_logits = cross_entropy(logits, labels)
    if lambda_fd == 0:
        return ce, g_logits, np.zeros_like(np.asarray(maps, dtype=np.float64)), (ce, 0.0)
    fd, g_maps = feature_diversity_loss(maps, head, labels, k, skip_empty)
    return ce + lambda_fd * fd, g_logits, lambda_fd * g_maps, (ce, fd)
