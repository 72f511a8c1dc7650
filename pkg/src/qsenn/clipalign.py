"""Annotation-free alignment of learned features with text concepts.

Inputs are precomputed embedding matrices: one row per training image and one
row per prompt.  Each feature is weighted against each prompt by how strongly
images that activate the feature resemble the prompt.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TEMPLATES = {
    "adjective": "This is a photo of a {expression} {type} of a bird.",
    "noun": "This is a photo of a {expression}-like {type} of a bird.",
}


class AlignmentError(ValueError):
    pass


def _unit_rows(M, what):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise AlignmentError(f"{what} must be a matrix")
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise AlignmentError(f"{what} has a zero row")
    return M / norms


@dataclass(frozen=True)
class EmbeddingBundle:
    """Image and prompt embeddings; rows are L2-normalised on construction."""

    image_embeddings: np.ndarray
    prompt_embeddings: np.ndarray
    prompts: tuple
    prompt_types: tuple

    def __post_init__(self):
        img = _unit_rows(self.image_embeddings, "image embeddings")
        txt = _unit_rows(self.prompt_embeddings, "prompt embeddings")
        if img.shape[1] != txt.shape[1]:
            raise AlignmentError(f"embedding widths differ: {img.shape[1]} vs {txt.shape[1]}")
        if not len(self.prompts) == len(self.prompt_types) == txt.shape[0]:
            raise AlignmentError("one prompt string and one type per prompt row required")
        object.__setattr__(self, "image_embeddings", img)
        object.__setattr__(self, "prompt_embeddings", txt)
        object.__setattr__(self, "prompts", tuple(self.prompts))
        object.__setattr__(self, "prompt_types", tuple(self.prompt_types))


def build_prompts(attr_meta) -> list:
    """One prompt per attribute.  An attribute listed under two types is rejected."""
    seen = {}
    prompts = []
    for m in attr_meta:
        if not m.expression:
            raise AlignmentError(f"attribute {m.attr_id}: empty expression")
        if not m.type_id:
            raise AlignmentError(f"attribute {m.attr_id}: empty type")
        if m.template_kind not in TEMPLATES:
            raise AlignmentError(f"attribute {m.attr_id}: unknown template kind {m.template_kind!r}")
        if seen.setdefault(m.attr_id, m.type_id) != m.type_id:
            raise AlignmentError(f"attribute {m.attr_id} belongs to more than one type")
        prompts.append(TEMPLATES[m.template_kind].format(expression=m.expression, type=m.type_id))
    return prompts


def similarity(bundle: EmbeddingBundle):
    """Cosine similarity between every image and every prompt (n x n_p)."""
    return bundle.image_embeddings @ bundle.prompt_embeddings.T


def feature_weighting(features):
    """Column z-scores (population std).  Returns ``(V, constant_flags)``."""
    z = np.asarray(features, dtype=np.float64)
    if z.shape[0] < 2:
        raise AlignmentError("need at least two samples")
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    V = np.where(constant, 0.0, (z - mean) / np.where(constant, 1.0, std))
    return V, constant


def alignment_clip(V, S):
    V, S = np.asarray(V, dtype=np.float64), np.asarray(S, dtype=np.float64)
    if V.shape[0] != S.shape[0]:
        raise AlignmentError(f"{V.shape[0]} feature rows vs {S.shape[0]} similarity rows")
    return V.T @ S


class PositionMetrics(NamedTuple):
    pos_full: np.ndarray
    pos_pred: np.ndarray
    pos_pred_rel: np.ndarray
    defined: np.ndarray  # False where the A^gt row is undefined


def _rank_of(row, target):
    """1-based position of ``target`` in the descending order of ``row``;
    ties go to the lower index."""
    order = np.argsort(-row, kind="stable")
    return int(np.flatnonzero(order == target)[0]) + 1


def position_metrics(a_clip, a_gt, types) -> PositionMetrics:
    """Where does the clip-preferred attribute sit in the ground-truth ranking?

    ``a_clip`` and ``a_gt`` are ``d x n_attr`` (one row per feature).  Rows of
    ``a_gt`` containing NaN are excluded (metrics NaN, ``defined`` False).
    """
    a_clip = np.asarray(a_clip, dtype=np.float64)
    a_gt = np.asarray(a_gt, dtype=np.float64)
    types = np.asarray(types)
    if a_clip.shape != a_gt.shape or types.shape != (a_gt.shape[1],):
        raise AlignmentError("alignment matrices and type list do not conform")
    d = a_gt.shape[0]
    full = np.full(d, np.nan)
    pred = np.full(d, np.nan)
    rel = np.full(d, np.nan)
    defined = ~np.any(np.isnan(a_gt), axis=1)
    for j in np.flatnonzero(defined):
        p = int(np.argmax(a_clip[j]))
        full[j] = _rank_of(a_gt[j], p)
        members = np.flatnonzero(types == types[p])
        pred[j] = _rank_of(a_gt[j, members], int(np.flatnonzero(members == p)[0]))
        n_type = len(members)
        rel[j] = 1.0 if n_type == 1 else (n_type - pred[j]) / (n_type - 1)
    return PositionMetrics(full, pred, rel, defined)


def static_ordering(a_gt):
    """Attributes sorted by ascending mean ground-truth position over features."""
    a_gt = np.asarray(a_gt, dtype=np.float64)
    rows = a_gt[~np.any(np.isnan(a_gt), axis=1)]
    if len(rows) == 0:
        raise AlignmentError("no defined ground-truth rows")
    order = np.argsort(-rows, axis=1, kind="stable")
    positions = np.empty_like(order)
    np.put_along_axis(positions, order, np.arange(1, rows.shape[1] + 1)[None, :], axis=1)
    return np.argsort(positions.mean(axis=0), kind="stable")


def static_baseline(a_gt, types):
    """Predict the same attribute (the best on average) for every feature.

    Returns ``(ordering, PositionMetrics)``.
    """
    a_gt = np.asarray(a_gt, dtype=np.float64)
    ordering = static_ordering(a_gt)
    n_attr = a_gt.shape[1]
    # a score row whose argmax is ordering[0] and whose ranking follows ordering
    score = np.empty(n_attr)
    score[ordering] = np.arange(n_attr, 0, -1, dtype=np.float64)
    a_fixed = np.tile(score, (a_gt.shape[0], 1))
    return ordering, position_metrics(a_fixed, a_gt, types)


def random_positions(a_gt, types, draws=10_000, seed=0) -> dict:
    """Mean pos_full, pos_pred and pos_pred_rel when the predicted attribute
    is drawn uniformly for a uniformly drawn feature."""
    a_gt = np.asarray(a_gt, dtype=np.float64)
    types = np.asarray(types)
    rows = np.flatnonzero(~np.any(np.isnan(a_gt), axis=1))
    if len(rows) == 0:
        raise AlignmentError("no defined ground-truth rows")
    rng = np.random.default_rng(seed)
    n_attr = a_gt.shape[1]
    js = rows[rng.integers(0, len(rows), draws)]
    ps = rng.integers(0, n_attr, draws)
    full = np.empty(draws)
    pred = np.empty(draws)
    rel = np.empty(draws)
    for t, (j, p) in enumerate(zip(js, ps)):
        members = np.flatnonzero(types == types[p])
        n_type = len(members)
        full[t] = _rank_of(a_gt[j], p)
        pred[t] = _rank_of(a_gt[j, members], int(np.flatnonzero(members == p)[0]))
        rel[t] = 1.0 if n_type == 1 else (n_type - pred[t]) / (n_type - 1)
    return {"pos_full": float(full.mean()), "pos_pred": float(pred.mean()), "pos_pred_rel": float(rel.mean())}


def random_baseline(a_gt, types, draws=10_000, seed=0) -> float:
    """Mean pos_pred_rel when the predicted attribute is drawn uniformly."""
    return random_positions(a_gt, types, draws, seed)["pos_pred_rel"]


class CertaintyBins(NamedTuple):
    bin_of_feature: np.ndarray
    medians: np.ndarray
    quartiles: np.ndarray  # 4 x 2: (25th, 75th) per bin


def certainty_bins(a_clip, pos_pred_rel, n_bins=4) -> CertaintyBins:
    """Split features into equal-size bins by their maximal clip alignment.

    Bin 0 holds the least certain features; remainders go to the lower bins.
    """
    a_clip = np.asarray(a_clip, dtype=np.float64)
    rel = np.asarray(pos_pred_rel, dtype=np.float64)
    d = a_clip.shape[0]
    if d < n_bins:
        raise AlignmentError(f"need at least {n_bins} features, got {d}")
    order = np.argsort(a_clip.max(axis=1), kind="stable")
    base, extra = divmod(d, n_bins)
    sizes = [base + (1 if b < extra else 0) for b in range(n_bins)]
    bins = np.empty(d, dtype=np.int64)
    start = 0
    for b, size in enumerate(sizes):
        bins[order[start:start + size]] = b
        start += size
    medians = np.full(n_bins, np.nan)
    quartiles = np.full((n_bins, 2), np.nan)
    for b in range(n_bins):
        vals = rel[(bins == b) & ~np.isnan(rel)]
        if len(vals):
            medians[b] = np.median(vals)
            quartiles[b] = np.percentile(vals, [25, 75])
    return CertaintyBins(bins, medians, quartiles)


def _nanmean(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.nanmean(a)) if np.any(~np.isnan(a)) else float("nan")


def _position_summary(pm: PositionMetrics) -> dict:
    return {"pos_full": _nanmean(pm.pos_full), "pos_pred": _nanmean(pm.pos_pred),
            "pos_pred_rel": _nanmean(pm.pos_pred_rel)}


_NAN_ROW = {"pos_full": float("nan"), "pos_pred": float("nan"), "pos_pred_rel": float("nan")}


@dataclass(frozen=True)
class AlignmentReport:
    a_clip: np.ndarray
    argmax_prompt: np.ndarray
    pos_full: np.ndarray
    pos_pred: np.ndarray
    pos_pred_rel: np.ndarray
    bin_of_feature: np.ndarray
    bin_medians: np.ndarray
    static: dict  # mean position measures of the static baseline
    random: dict  # ... and of uniformly drawn predictions

    @property
    def static_pos_pred_rel(self) -> float:
        return self.static["pos_pred_rel"]

    @property
    def random_pos_pred_rel(self) -> float:
        return self.random["pos_pred_rel"]

    def summary(self) -> dict:
        proposed = _position_summary(PositionMetrics(self.pos_full, self.pos_pred, self.pos_pred_rel, None))
        return {"proposed": proposed, "static": dict(self.static), "random": dict(self.random)}

    def to_json(self) -> str:
        out = self.summary()
        out["argmax_prompt"] = [int(p) for p in self.argmax_prompt]
        out["bin_of_feature"] = [int(b) for b in self.bin_of_feature]
        out["bin_medians"] = [None if np.isnan(m) else float(m) for m in self.bin_medians]
        out["pos_pred_rel_per_feature"] = [None if np.isnan(v) else float(v) for v in self.pos_pred_rel]
        return json.dumps(out, sort_keys=True)


def align(features, bundle: EmbeddingBundle, a_gt=None, seed=0) -> AlignmentReport:
    """Full alignment: A^clip plus, when ground truth is given, the position
    metrics against it and both baselines.

    ``a_gt`` is the ``n_attr x d`` matrix from
    :func:`qsenn.metrics.attribute_alignment`; attributes whose row is
    undefined are left out of every ranking.
    """
    S = similarity(bundle)
    V, _ = feature_weighting(features)
    a_clip = alignment_clip(V, S)
    d = a_clip.shape[0]
    nan = np.full(d, np.nan)
    if a_gt is None:
        pm = PositionMetrics(nan, nan, nan, np.zeros(d, dtype=bool))
        static, rand = dict(_NAN_ROW), dict(_NAN_ROW)
    else:
        gt = np.asarray(a_gt, dtype=np.float64)
        if gt.shape != (a_clip.shape[1], d):
            raise AlignmentError(f"ground truth shape {gt.shape} != {(a_clip.shape[1], d)}")
        keep = ~np.any(np.isnan(gt), axis=1)
        types = np.asarray(bundle.prompt_types)[keep]
        gt = gt[keep].T
        pm = position_metrics(a_clip[:, keep], gt, types)
        static = _position_summary(static_baseline(gt, types)[1])
        rand = random_positions(gt, types, seed=seed)
    if d >= 4:
        bins = certainty_bins(a_clip, pm.pos_pred_rel)
    else:
        bins = CertaintyBins(np.zeros(d, dtype=np.int64), np.full(4, np.nan), np.full((4, 2), np.nan))
    return AlignmentReport(a_clip, np.argmax(a_clip, axis=1), pm.pos_full, pm.pos_pred, pm.pos_pred_rel,
                           bins.bin_of_feature, bins.medians, static, rand)
