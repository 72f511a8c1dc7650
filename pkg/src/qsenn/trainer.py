"""Desk-scale model and the iterative sparse-ternary training pipeline.

The model is a pointwise linear map from ``c_in`` input channels to ``n_f``
feature channels at every cell of an ``h x w`` grid, a ReLU, and a spatial
mean giving the feature vector ``z``.  A :class:`SparseHead` maps the
standardized ``z`` to class logits.  Gradients are derived by hand.

Pipeline (:func:`qsenn_fit`): train densely with cross-entropy plus the
diversity loss, keep the ``n_f_selected`` features an elastic-net fit uses
most, then alternate between computing a sparse ternary head on the current
features and fine-tuning the extractor under that frozen head.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize

from .divloss import combined_loss, cross_entropy
from .glmpath import SolverSettings, fit_path, pick_least_regularized, pick_solution, select_features, standardize
from .metrics import (
    MetricsReport,
    accuracy,
    alignment_r,
    attribute_alignment,
    binary_fraction,
    correlation_at_5,
    dependence_gamma,
    loc_mean,
)
from .quantizer import changed_fraction, quantize_multilevel, quantize_ternary
from .tensorstore import Dataset, RunConfig, SparseHead, read_tensor, write_tensor

log = logging.getLogger(__name__)

_STAGE_CODES = {"dense": 0, "final": 999}


class TrainingError(RuntimeError):
    """A stage failed; ``stage`` and ``epoch`` locate it."""

    def __init__(self, message, stage=None, epoch=None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch


@dataclass
class DeskModel:
    A: np.ndarray  # n_f x c_in
    a0: np.ndarray  # n_f
    head: SparseHead
    seed: int = 0
    feature_ids: np.ndarray | None = None  # indices into the original extractor rows

    @property
    def n_features(self) -> int:
        return self.A.shape[0]

    def copy(self) -> "DeskModel":
        return DeskModel(self.A.copy(), self.a0.copy(), self.head, self.seed,
                         None if self.feature_ids is None else self.feature_ids.copy())

    def save(self, directory, stage="final", config_digest="") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(self.A, d / "extractor_A.qstf")
        write_tensor(self.a0, d / "extractor_bias.qstf")
        ids = np.arange(self.n_features) if self.feature_ids is None else self.feature_ids
        write_tensor(np.asarray(ids, dtype=np.int64), d / "feature_ids.qstf")
        self.head.save(d, "head")
        manifest = {"config_hash": config_digest, "stage": stage, "seed": self.seed,
                    "head_digest": self.head.digest()}
        (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, directory) -> "DeskModel":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        return cls(read_tensor(d / "extractor_A.qstf"), read_tensor(d / "extractor_bias.qstf"),
                   SparseHead.load(d, "head"), int(manifest["seed"]), read_tensor(d / "feature_ids.qstf"))


class ForwardResult(NamedTuple):
    maps: np.ndarray  # B x n_f x h x w
    z: np.ndarray
    logits: np.ndarray


@dataclass
class TrainStageReport:
    stage: str
    ce: list = field(default_factory=list)
    fd: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.ce)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "ce": self.ce, "fd": self.fd, "accuracy": self.accuracy, "lr": self.lr}


def _check_inputs(model: DeskModel, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != model.A.shape[1]:
        raise ValueError(f"expected inputs (B, {model.A.shape[1]}, h, w), got {x.shape}")
    return x


def _maps(A, a0, xf):
    """xf: B x c_in x cells -> (pre-activation, maps) both B x n_f x cells."""
    pre = A @ xf + a0[None, :, None]
    return pre, np.maximum(pre, 0.0)


def forward(model: DeskModel, x) -> ForwardResult:
    x = _check_inputs(model, x)
    B, c, h, w = x.shape
    _, maps = _maps(model.A, model.a0, x.reshape(B, c, h * w))
    z = maps.mean(axis=2)
    return ForwardResult(maps.reshape(B, -1, h, w), z, model.head.logits(z))


def features(model: DeskModel, x, batch=512):
    x = _check_inputs(model, x)
    return np.concatenate([forward(model, x[i:i + batch]).z for i in range(0, len(x), batch)]) \
        if len(x) else np.zeros((0, model.n_features))


def predict(model: DeskModel, x):
    """Class with the largest logit; ties go to the lowest index."""
    return np.argmax(model.head.logits(features(model, x)), axis=1)


# ---------------------------------------------------------------------------
# loss and gradients


class StepResult(NamedTuple):
    loss: float
    ce: float
    fd: float
    logits: np.ndarray
    gA: np.ndarray
    ga0: np.ndarray
    gW: np.ndarray
    gb: np.ndarray


def loss_and_grads(A, a0, head: SparseHead, x, y, lambda_fd, k=5, dropout_mask=None) -> StepResult:
    """Cross-entropy plus ``lambda_fd`` times the diversity loss on one batch.

    ``dropout_mask`` (B x n_f, already scaled by 1/keep) multiplies the
    standardized features.  Gradients are exact for the given mask; the
    top-k selection inside the diversity loss is treated as constant.
    """
    B, c, h, w = x.shape
    xf = x.reshape(B, c, h * w)
    pre, maps = _maps(A, a0, xf)
    z = maps.mean(axis=2)
    zs = (z - head.feat_mean) / head.feat_std
    if dropout_mask is not None:
        zs = zs * dropout_mask
    logits = zs @ head.W.T + head.bias
    loss, g_logits, g_maps, (ce, fd) = combined_loss(logits, y, maps.reshape(B, -1, h, w), head, lambda_fd, k,
                                                     skip_empty=True)
    gW = g_logits.T @ zs
    gb = g_logits.sum(axis=0)
    g_zs = g_logits @ head.W
    if dropout_mask is not None:
        g_zs = g_zs * dropout_mask
    g_z = g_zs / head.feat_std
    g_m = g_maps.reshape(B, -1, h * w) + g_z[:, :, None] / (h * w)
    g_pre = np.where(pre > 0, g_m, 0.0)
    n_f = A.shape[0]
    gA = g_pre.transpose(1, 0, 2).reshape(n_f, -1) @ xf.transpose(1, 0, 2).reshape(c, -1).T
    ga0 = g_pre.sum(axis=(0, 2))
    return StepResult(loss, ce, fd, logits, gA, ga0, gW, gb)


def _stage_rng(seed, stage, epoch):
    code = _STAGE_CODES.get(stage)
    if code is None:
        code = 1 + int(stage.split("_")[1])  # iter_k
    return np.random.default_rng([seed, code, epoch])


def _run_stage(model: DeskModel, x, y, *, stage, epochs, lrs, head_lr_scale, momentum, dropout,
               weight_decay, batch_size, lambda_fd, k, train_head):
    """SGD with momentum.  ``lrs`` gives the extractor learning rate per epoch."""
    A, a0, head = model.A.copy(), model.a0.copy(), model.head
    W, b = head.W.copy(), head.bias.copy()
    vA, va0, vW, vb = np.zeros_like(A), np.zeros_like(a0), np.zeros_like(W), np.zeros_like(b)
    report = TrainStageReport(stage)
    n = len(y)
    for epoch in range(epochs):
        lr = float(lrs[epoch])
        rng = _stage_rng(model.seed, stage, epoch)
        order = rng.permutation(n)
        ce_sum = fd_sum = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            mask = None
            if dropout > 0:
                mask = (rng.random((len(idx), A.shape[0])) >= dropout) / (1.0 - dropout)
            cur = head.replace(W=W, bias=b) if train_head else head
            r = loss_and_grads(A, a0, cur, x[idx], y[idx], lambda_fd, k, mask)
            if not np.isfinite(r.loss):
                raise TrainingError(f"{stage}: loss became non-finite in epoch {epoch}", stage, epoch)
            ce_sum += r.ce * len(idx)
            fd_sum += r.fd * len(idx)
            correct += int(np.sum(np.argmax(r.logits, axis=1) == y[idx]))
            vA = momentum * vA + r.gA + weight_decay * A
            va0 = momentum * va0 + r.ga0
            A = A - lr * vA
            a0 = a0 - lr * va0
            if train_head:
                vW = momentum * vW + r.gW + weight_decay * W
                vb = momentum * vb + r.gb
                W = W - lr * head_lr_scale * vW
                b = b - lr * head_lr_scale * vb
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(W))):
            raise TrainingError(f"{stage}: parameters became non-finite in epoch {epoch}", stage, epoch)
        report.ce.append(ce_sum / n)
        report.fd.append(fd_sum / n)
        report.accuracy.append(correct / n)
        report.lr.append(lr)
    new_head = head.replace(W=W, bias=b) if train_head else head
    return DeskModel(A, a0, new_head, model.seed, model.feature_ids), report


def step_schedule(lr, epochs, every, factor):
    return [lr * factor ** (e // every) for e in range(epochs)]


# ---------------------------------------------------------------------------
# stages


def init_model(c_in, n_classes, config: RunConfig, x=None) -> DeskModel:
    """Near-identity extractor (each feature starts as one input channel).

    When ``x`` is given the dense head's standardization is taken from the
    initial features on ``x``.
    """
    n_f = config.n_features or c_in
    rng = np.random.default_rng([config.seed, 12345])
    A = np.eye(n_f, c_in) + config.init_noise * rng.standard_normal((n_f, c_in))
    a0 = np.zeros(n_f)
    mean, std = np.zeros(n_f), np.ones(n_f)
    model = DeskModel(A, a0, SparseHead(np.zeros((n_classes, n_f)), np.zeros(n_classes), mean, std, "dense"),
                      config.seed, np.arange(n_f))
    if x is not None and len(x):
        _, mean, std, _ = standardize(features(model, x))
        model.head = model.head.replace(feat_mean=mean, feat_std=std)
    return model


def train_dense(data: Dataset, config: RunConfig, model: DeskModel | None = None):
    """Train extractor and dense head together on CE + lambda_fd * L_FD."""
    if data.split != "train":
        raise ValueError("train_dense needs the training split")
    x = np.asarray(data.inputs, dtype=np.float64)
    if model is None:
        model = init_model(x.shape[1], data.n_classes, config, x)
    lrs = step_schedule(config.dense_lr, config.dense_epochs, config.dense_lr_step_every,
                        config.dense_lr_step_factor)
    return _run_stage(model, x, np.asarray(data.labels), stage="dense", epochs=config.dense_epochs, lrs=lrs,
                      head_lr_scale=config.dense_head_lr / config.dense_lr, momentum=config.dense_momentum,
                      dropout=config.dense_dropout, weight_decay=config.weight_decay,
                      batch_size=config.batch_size, lambda_fd=config.lambda_fd, k=config.k_loc, train_head=True)


def finetune_fixed_head(model: DeskModel, head: SparseHead, data: Dataset, config: RunConfig, *, epochs, lr,
                        stage="final", step_every=None, step_factor=1.0, allow_nonternary=False):
    """Fine-tune only the extractor under a frozen head."""
    if head.kind != "ternary" and not allow_nonternary:
        raise ValueError(f"expected a ternary head, got {head.kind!r}")
    if head.n_features != model.n_features:
        raise ValueError("head and extractor disagree on the number of features")
    lrs = step_schedule(lr, epochs, step_every or max(epochs, 1), step_factor)
    start = DeskModel(model.A, model.a0, head, model.seed, model.feature_ids)
    x = np.asarray(data.inputs, dtype=np.float64)
    return _run_stage(start, x, np.asarray(data.labels), stage=stage, epochs=epochs, lrs=lrs, head_lr_scale=0.0,
                      momentum=config.finetune_momentum, dropout=config.finetune_dropout,
                      weight_decay=config.weight_decay, batch_size=config.batch_size,
                      lambda_fd=config.lambda_fd, k=config.k_loc, train_head=False)


def refit_bias(head: SparseHead, z, y) -> SparseHead:
    """Re-optimise the bias alone (W frozen); a smooth convex problem."""
    base = head.logits(z) - head.bias
    y = np.asarray(y)

    def f(b):
        loss, g = cross_entropy(base + b, y)
        return loss, g.sum(axis=0)

    res = minimize(f, head.bias.copy(), jac=True, method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 1e-15,
                                                                            "maxiter": 1000})
    b = res.x - res.x.mean()  # softmax is shift-invariant; pin the free constant
    return head.replace(bias=b)


def solver_settings(config: RunConfig) -> SolverSettings:
    return SolverSettings(alpha_elastic=config.alpha_elastic, path_len=config.path_len,
                          lambda_min_ratio=config.lambda_min_ratio, tol=config.solver_tol,
                          max_epochs=config.solver_max_epochs, lookbehind=config.lookbehind)


def sparse_head(model: DeskModel, data: Dataset, config: RunConfig) -> SparseHead:
    """Head computed from the current features: regularization path, then
    quantization to ``per_class_budget * n_classes`` weights (or, without
    quantization, the path entry within the per-class budget)."""
    z = features(model, data.inputs)
    Zs, mean, std, _ = standardize(z)
    path = fit_path(Zs, data.labels, solver_settings(config), data.n_classes, mean, std)
    if not config.quantize:
        head, flagged = pick_solution(path, config.per_class_budget)
        if flagged:
            log.warning("no path entry within %s weights per class", config.per_class_budget)
    else:
        dense = pick_least_regularized(path)
        n_w = config.per_class_budget * data.n_classes
        nnz = int(np.count_nonzero(dense.W))
        if nnz < n_w:
            # the budget is an upper bound; a sparser least-regularized fit is kept whole
            log.warning("least-regularized fit has %d nonzeros, below n_w=%d", nnz, n_w)
            n_w = max(nnz, 1)
        if config.n_q == 2:
            q = quantize_ternary(dense.W, n_w)
            head = dense.replace(W=q.Wq, kind="ternary", alpha_q=q.alpha)
        else:
            q = quantize_multilevel(dense.W, n_w, config.n_q)
            head = dense.replace(W=q.Wq, kind="sparse")
    return refit_bias(head, z, data.labels)


def restrict(model: DeskModel, keep) -> DeskModel:
    keep = np.asarray(keep)
    h = model.head
    head = SparseHead(h.W[:, keep], h.bias, h.feat_mean[keep], h.feat_std[keep], "dense")
    ids = keep if model.feature_ids is None else model.feature_ids[keep]
    return DeskModel(model.A[keep].copy(), model.a0[keep].copy(), head, model.seed, ids)


@dataclass
class QSennResult:
    model: DeskModel
    reports: list
    iteration_deltas: list
    final_delta: float
    heads: list  # head of every iteration, in order

    @property
    def support_stability(self) -> float:
        return 1.0 - self.final_delta


def _stage(tag, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except TrainingError:
        raise
    except (ArithmeticError, RuntimeError, ValueError) as err:
        raise TrainingError(f"{tag}: {err}", tag) from err


def qsenn_fit(data: Dataset, config: RunConfig, dense=None) -> QSennResult:
    """Dense training, feature selection, then ``n_iterations`` rounds of
    (sparse head, fine-tune).  The last round's fine-tune is the long one.

    ``dense`` may pass a precomputed ``(model, report)`` from
    :func:`train_dense` with the same config.
    """
    model, dense_report = dense if dense is not None else _stage("dense", train_dense, data, config)
    reports = [dense_report]

    z = features(model, data.inputs)
    Zs, _, _, _ = standardize(z)
    d_red = min(config.n_f_selected, model.n_features)
    keep = _stage("select", select_features, Zs, data.labels, d_red, solver_settings(config), data.n_classes,
                  config.select_alpha, config.select_lambda_divisor)
    model = restrict(model, np.sort(keep))

    final_dense_lr = config.dense_lr * config.dense_lr_step_factor ** max(
        0, (config.dense_epochs - 1) // config.dense_lr_step_every)
    base_lr = config.finetune_lr or 100.0 * final_dense_lr
    heads, deltas = [], []
    N = config.n_iterations
    for it in range(N):
        tag = "final" if it == N - 1 else f"iter_{it}"
        head = _stage(tag, sparse_head, model, data, config)
        if heads:
            deltas.append(changed_fraction(heads[-1].W, head.W))
        heads.append(head)
        lr = base_lr * config.iteration_lr_decay ** it
        if it == N - 1:
            model, rep = _stage(tag, finetune_fixed_head, model, head, data, config, epochs=config.final_epochs,
                                lr=lr, stage=tag, step_every=config.final_lr_step_every,
                                step_factor=config.final_lr_step_factor, allow_nonternary=True)
        else:
            model, rep = _stage(tag, finetune_fixed_head, model, head, data, config, epochs=config.finetune_epochs,
                                lr=lr, stage=tag, allow_nonternary=True)
        reports.append(rep)
    probe = _stage("probe", sparse_head, model, data, config)
    return QSennResult(model, reports, deltas, changed_fraction(heads[-1].W, probe.W), heads)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model: DeskModel, train: Dataset, test: Dataset, k=5) -> MetricsReport:
    z_train = features(model, train.inputs)
    out = forward(model, test.inputs)
    pred = np.argmax(out.logits, axis=1)
    if train.attributes is not None:
        r = alignment_r(attribute_alignment(z_train, train.attributes), z_train)
    else:
        r = float("nan")
    bf = binary_fraction(z_train, train.labels)
    return MetricsReport(
        accuracy=accuracy(pred, test.labels),
        loc5_mean=loc_mean(out.maps, model.head, pred, k),
        gamma=dependence_gamma(model.head, out.z),
        alignment_r=r,
        binary_fraction=bf.fraction,
        binary_fraction_strict=bf.strict_fraction,
        correlation_at_5=correlation_at_5(out.z, model.head),
    )
