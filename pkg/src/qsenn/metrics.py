"""Fidelity / diversity / grounding measurements."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .divloss import EmptyClassError, loc_at_k, top_features


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    loc5_mean: float
    gamma: float
    alignment_r: float
    binary_fraction: float
    binary_fraction_strict: float
    correlation_at_5: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in shape")
    return float(np.mean(p == y))


def predict_from_logits(logits):
    return np.argmax(logits, axis=1)  # first maximum, i.e. lowest class on ties


def dependence_gamma(head, features) -> float:
    """Mean share of the predicted class's evidence carried by its top feature.

    The effect of feature j is ``|w_cj * z_j|`` with ``w`` the weights acting
    on raw features (the standardization shift folds into the bias).
    Samples without any effect count as uniform, ``1/d``.
    """
    z = np.asarray(features, dtype=np.float64)
    if z.shape[0] < 1:
        raise ValueError("need at least one sample")
    pred = predict_from_logits(head.logits(z))
    effects = np.abs(head.effective_weights()[pred] * z)
    total = effects.sum(axis=1)
    share = np.divide(effects.max(axis=1), total, out=np.full(len(z), 1.0 / z.shape[1]), where=total > 0)
    return float(share.mean())


def attribute_alignment(features, attributes):
    """Mean feature value with the attribute present minus with it absent.

    Returns an ``n_attr x d`` matrix; rows of attributes that are always or
    never present are NaN.
    """
    z = np.asarray(features, dtype=np.float64)
    A = np.asarray(attributes).astype(bool)
    pos = A.sum(axis=0)
    neg = len(A) - pos
    out = np.full((A.shape[1], z.shape[1]), np.nan)
    ok = (pos > 0) & (neg > 0)
    Af = A[:, ok].astype(np.float64)
    out[ok] = (Af.T @ z) / pos[ok, None] - ((1.0 - Af).T @ z) / neg[ok, None]
    return out


class AlignmentTerms(NamedTuple):
    r: float
    terms: np.ndarray
    constant: np.ndarray


def alignment_terms(a_gt, features) -> AlignmentTerms:
    z = np.asarray(features, dtype=np.float64)
    n = z.shape[0]
    spread = (z - z.min(axis=0)).sum(axis=0)
    constant = spread <= 1e-12 * np.maximum(1.0, np.abs(z).max(axis=0))
    defined = ~np.all(np.isnan(a_gt), axis=0)
    best = np.where(defined, np.nanmax(np.where(np.isnan(a_gt), -np.inf, a_gt), axis=0), 0.0)
    terms = np.where(constant | ~defined, 0.0, n / np.where(constant, 1.0, spread) * best)
    return AlignmentTerms(float(terms.mean()), terms, constant)


def alignment_r(a_gt, features) -> float:
    """Average over features of the best attribute gap, normalised by the
    feature's mean activation above its minimum."""
    return alignment_terms(a_gt, features).r


# ---------------------------------------------------------------------------
# mean shift


class MeanShiftResult(NamedTuple):
    n_clusters: int
    labels: np.ndarray
    centers: np.ndarray
    bandwidth: float


def default_bandwidth(values, quantile=0.3):
    """Mean distance from each point to its k-th nearest neighbour (itself
    included), ``k = floor(quantile * n)``.

    In one dimension the k nearest neighbours of a point form a contiguous
    run of the sorted values, so the run is found by bisection.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = len(x)
    k = max(1, int(n * quantile))
    i = np.arange(n)
    lo = np.maximum(0, i - k + 1)
    hi = np.minimum(i, n - k)
    # smallest run start j whose right reach is at least its left reach
    while np.any(open_ := lo < hi):
        mid = (lo + hi) // 2
        right_heavy = x[mid + k - 1] - x >= x - x[mid]
        hi = np.where(open_ & right_heavy, mid, hi)
        lo = np.where(open_ & ~right_heavy, mid + 1, lo)
    j = lo
    best = np.maximum(x - x[j], x[j + k - 1] - x)
    prev = np.maximum(j - 1, np.maximum(0, i - k + 1))
    best = np.minimum(best, np.maximum(x - x[prev], x[prev + k - 1] - x))
    return float(best.mean())


def mean_shift_1d(values, bandwidth=None, max_iter=5000) -> MeanShiftResult:
    """Flat-kernel mean shift on the real line.

    Every point seeds a climb; converged modes closer than bandwidth/2 are
    merged.  The default bandwidth is :func:`default_bandwidth`.  Depends only on the multiset of values, not their order.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < 2:
        raise ValueError("mean shift needs at least two values")
    order = np.argsort(v, kind="stable")
    x = v[order]
    if x[0] == x[-1]:
        return MeanShiftResult(1, np.zeros(len(v), dtype=np.int64), np.array([x[0]]), 0.0)
    bw = default_bandwidth(x) if bandwidth is None else float(bandwidth)

    if bw <= 0:
        uniq, inv = np.unique(x, return_inverse=True)
        labels = np.empty(len(v), dtype=np.int64)
        labels[order] = inv
        return MeanShiftResult(len(uniq), labels, uniq, bw)

    csum = np.concatenate([[0.0], np.cumsum(x)])
    seeds, seed_of = np.unique(x, return_inverse=True)
    m = seeds.copy()
    for _ in range(max_iter):
        lo = np.searchsorted(x, m - bw, side="left")
        hi = np.searchsorted(x, m + bw, side="right")
        new = (csum[hi] - csum[lo]) / (hi - lo)
        # a flat kernel reaches its fixed point once no window changes; a
        # small-shift stop would strand seeds on the shoulders of a mode
        if np.array_equal(new, m):
            break
        m = new

    mode_order = np.argsort(m, kind="stable")
    sorted_modes = m[mode_order]
    group = np.concatenate([[0], np.cumsum(np.diff(sorted_modes) > bw / 2)])
    cluster_of_seed = np.empty(len(m), dtype=np.int64)
    cluster_of_seed[mode_order] = group
    labels_sorted = cluster_of_seed[seed_of]
    labels = np.empty(len(v), dtype=np.int64)
    labels[order] = labels_sorted
    n_clusters = int(group[-1]) + 1
    centers = np.array([x[labels_sorted == c].mean() for c in range(n_clusters)])
    return MeanShiftResult(n_clusters, labels, centers, bw)


class BinaryFeatures(NamedTuple):
    fraction: float
    strict_fraction: float
    active_flags: np.ndarray
    n_clusters: np.ndarray


def binary_fraction(features, labels) -> BinaryFeatures:
    """Share of features whose training distribution has exactly two modes.

    strict: both clusters hold at least the mean number of samples per class.
    active flag: the higher-mean cluster is larger than the biggest class.
    """
    z = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    class_counts = np.bincount(labels)
    class_counts = class_counts[class_counts > 0]
    per_class = len(labels) / len(class_counts)
    d = z.shape[1]
    two = np.zeros(d, dtype=bool)
    strict = np.zeros(d, dtype=bool)
    active = np.zeros(d, dtype=bool)
    n_clusters = np.zeros(d, dtype=np.int64)
    for j in range(d):
        ms = mean_shift_1d(z[:, j])
        n_clusters[j] = ms.n_clusters
        if ms.n_clusters != 2:
            continue
        two[j] = True
        sizes = np.bincount(ms.labels, minlength=2)
        strict[j] = sizes.min() >= per_class
        active[j] = sizes[int(np.argmax(ms.centers))] > class_counts.max()
    return BinaryFeatures(float(two.mean()), float(strict.mean()), active, n_clusters)


def correlation_at_k(features, head, k=5) -> float:
    """Mean absolute Pearson correlation among each class's top-k features,
    averaged over classes.  Constant features are left out."""
    z = np.asarray(features, dtype=np.float64)
    if z.shape[0] < 2:
        raise ValueError("need at least two samples")
    std = z.std(axis=0)
    usable = std > 1e-12 * np.maximum(1.0, np.abs(z).max(axis=0))
    per_class = []
    for row in head.effective_weights():
        try:
            idx = top_features(row, k)
        except EmptyClassError:
            continue
        idx = idx[usable[idx]]
        if len(idx) < 2:
            continue
        C = np.corrcoef(z[:, idx], rowvar=False)
        iu = np.triu_indices(len(idx), 1)
        per_class.append(np.abs(C[iu]).mean())
    return float(np.mean(per_class)) if per_class else float("nan")


def correlation_at_5(features, head) -> float:
    return correlation_at_k(features, head, 5)


def loc_mean(maps, head, predictions, k=5) -> float:
    """Mean Loc@k over samples; samples of classes without weights are skipped."""
    values = []
    for m, c in zip(maps, predictions):
        try:
            values.append(loc_at_k(m, head, int(c), k))
        except EmptyClassError:
            continue
    return float(np.mean(values)) if values else float("nan")
