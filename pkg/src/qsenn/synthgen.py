"""Seeded synthetic data with a known sparse ternary answer.

Each of the ``d_total`` input channels is a concept living on its own cell of
an ``h x w`` grid.  The first ``d_informative`` concepts carry the class:
class ``c`` owns ``concepts_per_class`` consecutive concepts (wrapping), so
neighbouring classes share some.  The remaining concepts are coin flips.
A present concept puts ``1 + noise`` on its cell, an absent one ``0 + noise``.

The spurious variant adds a background: ``background_channels`` channels
per class spread over the cells no concept uses, each only weakly tied to its
class but strong together.
In the training split the background always belongs to the sample's class;
in the test split it belongs to a random class.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .clipalign import EmbeddingBundle, build_prompts
from .metrics import attribute_alignment
from .tensorstore import AttributeMeta, Dataset, dump_config, coerce_fields

_PART_TYPES = ("wing", "crown", "tail", "breast", "bill-shape", "eye")
_EXPRESSIONS = ("red", "blue", "striped", "spotted", "needle", "yellow", "hooked", "plain",
                "grey", "cone", "olive", "dagger", "buff", "curved", "black", "white",
                "crested", "brown", "orange", "pointed", "rufous", "pale", "barred", "notched")
_NOUN_EXPRESSIONS = {"needle", "cone", "dagger"}


@dataclass(frozen=True)
class PlantedSpec:
    n_classes: int = 6
    d_total: int = 20
    d_informative: int = 12
    concepts_per_class: int = 4
    n_train_per_class: int = 200
    n_test_per_class: int = 200
    sigma: float = 0.3
    flip_prob: float = 0.03  # chance that a concept's presence disagrees with its class
    height: int = 5
    width: int = 5
    n_types: int = 4
    spurious: bool = False
    background_channels: int = 4
    background_level: float = 0.2
    background_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.d_informative <= self.d_total:
            raise ValueError("need 0 < d_informative <= d_total")
        if self.d_total > self.height * self.width:
            raise ValueError(f"{self.d_total} concepts do not fit on a {self.height}x{self.width} grid")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 1 <= self.concepts_per_class <= self.d_informative:
            raise ValueError("concepts_per_class must lie in [1, d_informative]")
        if self.sigma < 0 or self.background_sigma < 0 or not 0 <= self.flip_prob <= 0.5:
            raise ValueError("noise levels must be non-negative and flip_prob <= 0.5")
        if not 2 <= self.n_types <= self.d_total // 2:
            raise ValueError("every attribute type needs at least two attributes")
        if self.background_channels < 1:
            raise ValueError("need at least one background channel per class")
        if self.spurious and self.d_total >= self.height * self.width:
            raise ValueError("the spurious variant needs grid cells left over for the background")
        if min(self.n_train_per_class, self.n_test_per_class) < 1:
            raise ValueError("need at least one sample per class and split")

    @classmethod
    def from_mapping(cls, values: dict) -> "PlantedSpec":
        return cls(**coerce_fields(cls, values))

    def replace(self, **changes) -> "PlantedSpec":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return dump_config(self)

    @property
    def n_channels(self) -> int:
        return self.d_total + (self.n_classes * self.background_channels if self.spurious else 0)


class GroundTruth(NamedTuple):
    w_star: np.ndarray  # n_classes x d_total, entries in {0, 1}
    concept_cell: np.ndarray  # flat grid cell of each concept
    attribute_feature: np.ndarray  # attribute a is read off input channel attribute_feature[a]
    test_background: np.ndarray | None  # background class per test sample (spurious only)


def class_concepts(spec: PlantedSpec, c: int) -> np.ndarray:
    stride = max(1, spec.d_informative // spec.n_classes)
    return (stride * c + np.arange(spec.concepts_per_class)) % spec.d_informative


def planted_weights(spec: PlantedSpec) -> np.ndarray:
    w = np.zeros((spec.n_classes, spec.d_total))
    for c in range(spec.n_classes):
        w[c, class_concepts(spec, c)] = 1.0
    return w


def attribute_metadata(spec: PlantedSpec) -> tuple:
    metas = []
    for a in range(spec.d_total):
        expr = _EXPRESSIONS[a % len(_EXPRESSIONS)]
        if a >= len(_EXPRESSIONS):
            expr = f"{expr}{a // len(_EXPRESSIONS)}"
        kind = "noun" if expr.rstrip("0123456789") in _NOUN_EXPRESSIONS else "adjective"
        metas.append(AttributeMeta(a, _PART_TYPES[a % spec.n_types], expr, kind))
    return tuple(metas)


def _split(spec: PlantedSpec, w_star, cells, rng, n_per_class, split, background_random):
    n_c, d = spec.n_classes, spec.d_total
    labels = rng.permutation(np.repeat(np.arange(n_c), n_per_class))
    n = len(labels)
    class_has = w_star[labels] > 0
    present = np.where(class_has, rng.random((n, d)) >= spec.flip_prob, rng.random((n, d)) < spec.flip_prob)
    present[:, spec.d_informative:] = rng.random((n, d - spec.d_informative)) < 0.5
    x = np.zeros((n, spec.n_channels, spec.height * spec.width))
    x[:, np.arange(d), cells] = present + spec.sigma * rng.standard_normal((n, d))
    background = None
    if spec.spurious:
        background = rng.integers(0, n_c, n) if background_random else labels.copy()
        m = spec.background_channels
        owner = np.repeat(np.arange(n_c), m)  # class each background channel belongs to
        level = np.where(owner[None, :] == background[:, None], spec.background_level, 0.0)
        # per-image strength of every background channel, spread over all cells
        amplitude = level + spec.background_sigma * rng.standard_normal((n, n_c * m))
        free = np.setdiff1d(np.arange(spec.height * spec.width), cells)
        noise = spec.background_sigma * rng.standard_normal((n, n_c * m, len(free)))
        x[:, d:, free] = amplitude[:, :, None] + noise
    ds = Dataset(x.reshape(n, spec.n_channels, spec.height, spec.width), labels, n_c,
                 present.astype(np.int64), attribute_metadata(spec), split)
    return ds, background


def _generate(spec: PlantedSpec):
    rng = np.random.default_rng(spec.seed)
    w_star = planted_weights(spec)
    cells = np.arange(spec.d_total)  # concept j sits on flat cell j
    train, _ = _split(spec, w_star, cells, rng, spec.n_train_per_class, "train", False)
    test, background = _split(spec, w_star, cells, rng, spec.n_test_per_class, "test", True)
    return train, test, GroundTruth(w_star, cells, np.arange(spec.d_total), background)


def gen_planted(spec: PlantedSpec):
    """``(train, test, ground_truth)`` for a spec without background channels."""
    if spec.spurious:
        raise ValueError("spec has the spurious flag set; use gen_spurious")
    return _generate(spec)


def gen_spurious(spec: PlantedSpec):
    """Like :func:`gen_planted` plus class-named background channels that only
    hold in the training split."""
    if not spec.spurious:
        raise ValueError("gen_spurious needs spec.spurious = True")
    return _generate(spec)


def gen_embedding_bundle(spec: PlantedSpec, attributes, sigma=0.0, seed=None, extra_dims=4):
    """Image and prompt embeddings consistent with planted attributes.

    Prompt ``a`` is the unit vector on axis ``a``.  Image ``i`` is its
    attribute vector plus a shared offset axis (so no row is zero) plus
    Gaussian noise of scale ``sigma`` on every axis, then normalised.
    """
    A = np.asarray(attributes, dtype=np.float64)
    n, n_attr = A.shape
    dim = n_attr + 1 + extra_dims
    rng = np.random.default_rng(spec.seed + 1 if seed is None else seed)
    img = np.zeros((n, dim))
    img[:, :n_attr] = A
    img[:, n_attr] = 1.0
    img += sigma * rng.standard_normal((n, dim))
    prompts_emb = np.zeros((n_attr, dim))
    prompts_emb[np.arange(n_attr), np.arange(n_attr)] = 1.0
    metas = attribute_metadata(spec)[:n_attr]
    return EmbeddingBundle(img, prompts_emb, tuple(build_prompts(metas)), tuple(m.type_id for m in metas))


def concept_of_feature(features, concepts):
    """Concept each feature aligns with best (argmax of the attribute gap)."""
    gap = attribute_alignment(features, concepts)
    return np.argmax(np.where(np.isnan(gap), -np.inf, gap), axis=0)


def support_recovery(head, w_star, feature_concept) -> float:
    """Share of planted (class, concept) entries reproduced with the right sign
    by at least one feature mapped to that concept."""
    W = np.asarray(head.W)
    hits = total = 0
    for c, j in zip(*np.nonzero(w_star)):
        total += 1
        cols = np.flatnonzero(feature_concept == j)
        if np.any(np.sign(W[c, cols]) == np.sign(w_star[c, j])):
            hits += 1
    return hits / total
