"""Multinomial logistic regression with an elastic-net penalty.

Minimises, for standardized features ``X`` (n x d) and labels ``y``::

    (1/n) sum_i CE(softmax(W x_i + b), y_i) + lam * (a * |W|_1 + (1 - a)/2 * |W|_2^2)

with an unpenalised bias, using accelerated proximal gradient with
backtracking and adaptive restart.  Convergence is certified by the
subgradient (KKT) residual, which does not depend on the solver.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorstore import PathEntry, RegPath, SparseHead


class ConvergenceError(RuntimeError):
    """Raised when a fit misses its KKT tolerance; carries the best iterate."""

    def __init__(self, message, W=None, bias=None, residual=float("nan"), lam_index=None):
        super().__init__(message)
        self.W = W
        self.bias = bias
        self.residual = residual
        self.lam_index = lam_index


@dataclass(frozen=True)
class SolverSettings:
    alpha_elastic: float = 0.99
    path_len: int = 20
    lambda_min_ratio: float = 1e-4
    tol: float = 1e-6
    max_epochs: int = 20000
    lookbehind: int = 5
    check_every: int = 10

    def __post_init__(self):
        if not 0 < self.alpha_elastic <= 1:
            raise ValueError("alpha_elastic must lie in (0, 1]")
        if self.path_len < 1:
            raise ValueError("path_len must be >= 1")
        if not 0 < self.lambda_min_ratio < 1:
            raise ValueError("lambda_min_ratio must lie in (0, 1)")
        if self.tol <= 0 or self.max_epochs < 1 or self.lookbehind < 1:
            raise ValueError("tol, max_epochs and lookbehind must be positive")


@dataclass(frozen=True)
class FitResult:
    head: SparseHead
    kkt_residual: float
    objective: float
    epochs: int


def standardize(features):
    """Column-wise z-scoring with the population std.

    Returns ``(Z, mean, std, constant)``; constant columns get ``std = 1``
    (so they map to zeros) and are flagged in the boolean ``constant``.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("standardize needs an n x d matrix with n >= 2")
    mean = X.mean(axis=0)
    centered = X - mean
    std = np.sqrt((centered**2).mean(axis=0))
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(constant, 1.0, std)
    Z = centered / std
    Z[:, constant] = 0.0
    return Z, mean, std, constant


def _one_hot(y, n_classes):
    Y = np.zeros((len(y), n_classes))
    Y[np.arange(len(y)), y] = 1.0
    return Y


def _check_labels(y, n_classes):
    y = np.asarray(y, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    counts = np.bincount(y, minlength=n_classes)
    if np.count_nonzero(counts) < 2:
        raise ValueError("need at least two classes")
    if np.any(counts == 0):
        raise ValueError(f"classes without samples: {np.flatnonzero(counts == 0).tolist()}")
    return y, n_classes, counts


def log_frequencies(y, n_classes=None):
    y, n_classes, counts = _check_labels(y, n_classes)
    return np.log(counts / len(y))


def lambda_max(X, y, alpha_elastic=1.0, n_classes=None):
    """Smallest penalty at which ``W = 0`` is optimal."""
    X = np.asarray(X, dtype=np.float64)
    y, n_classes, counts = _check_labels(y, n_classes)
    R0 = _one_hot(y, n_classes) - counts / len(y)
    G = R0.T @ X / len(y)
    lmax = np.abs(G).max() / alpha_elastic
    if not lmax > 0:
        raise ValueError("degenerate problem: lambda_max is zero (features carry no signal)")
    return float(lmax)


def _smooth(W, b, X, Y, l2):
    """Mean cross-entropy plus the ridge part; returns value and gradients."""
    Z = X @ W.T + b
    Z -= Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    S = E.sum(axis=1, keepdims=True)
    n = X.shape[0]
    ce = (np.log(S[:, 0]) - (Z * Y).sum(axis=1)).mean()
    G = (E / S - Y) / n
    gW = G.T @ X + l2 * W
    gb = G.sum(axis=0)
    return ce + 0.5 * l2 * np.sum(W * W), gW, gb


def objective(W, b, X, y, lam, alpha_elastic, n_classes=None):
    X = np.asarray(X, dtype=np.float64)
    y, n_classes, _ = _check_labels(y, n_classes)
    f, _, _ = _smooth(W, b, X, _one_hot(y, n_classes), lam * (1 - alpha_elastic))
    return f + lam * alpha_elastic * np.abs(W).sum()


def kkt_residual(W, b, X, y, lam, alpha_elastic, n_classes=None):
    """Largest violation of the subgradient optimality conditions."""
    X = np.asarray(X, dtype=np.float64)
    y, n_classes, _ = _check_labels(y, n_classes)
    _, gW, gb = _smooth(W, b, X, _one_hot(y, n_classes), lam * (1 - alpha_elastic))
    return _kkt(W, gW, gb, lam * alpha_elastic)


def _kkt(W, gW, gb, l1):
    nz = W != 0
    r_nz = np.abs(gW + l1 * np.sign(W))
    r_z = np.maximum(np.abs(gW) - l1, 0.0)
    res = np.where(nz, r_nz, r_z).max(initial=0.0)
    return float(max(res, np.abs(gb).max(initial=0.0)))


def _soft(V, t):
    return np.sign(V) * np.maximum(np.abs(V) - t, 0.0) + 0.0  # +0.0 folds -0.0


def _make_head(W, b, mean, std, kind="sparse"):
    return SparseHead(W=W, bias=b, feat_mean=mean, feat_std=std, kind=kind)


def fit_at(X, y, lam, settings: SolverSettings = SolverSettings(), n_classes=None,
           W0=None, b0=None, feat_mean=None, feat_std=None) -> FitResult:
    """Solve the penalised problem at a single ``lam``.

    ``W0``/``b0`` warm-start the solver.  ``feat_mean``/``feat_std`` are only
    carried into the returned head (``X`` must already be standardized).
    """
    X = np.asarray(X, dtype=np.float64)
    y, n_classes, counts = _check_labels(y, n_classes)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    n, d = X.shape
    a = settings.alpha_elastic
    mean = np.zeros(d) if feat_mean is None else np.asarray(feat_mean, dtype=np.float64)
    std = np.ones(d) if feat_std is None else np.asarray(feat_std, dtype=np.float64)
    Y = _one_hot(y, n_classes)
    l1, l2 = lam * a, lam * (1 - a)

    # Closed form above lambda_max: W = 0 with the intercept-only bias.
    G0 = (Y - counts / n).T @ X / n
    if np.abs(G0).max() <= l1:
        W = np.zeros((n_classes, d))
        b = np.log(counts / n)
        f, gW, gb = _smooth(W, b, X, Y, l2)
        return FitResult(_make_head(W, b, mean, std), _kkt(W, gW, gb, l1), f, 0)

    W = np.zeros((n_classes, d)) if W0 is None else np.array(W0, dtype=np.float64)
    b = np.log(counts / n) if b0 is None else np.array(b0, dtype=np.float64)

    f, gW, gb = _smooth(W, b, X, Y, l2)
    F = f + l1 * np.abs(W).sum()
    best = (F, W, b)
    F_seen, res_seen, stale = F, np.inf, 0
    # Lipschitz guess for the smooth part; backtracking corrects it.
    L = 0.5 * (np.linalg.norm(X, 2) ** 2 / n + 1.0) + l2
    Wy, by, fy, gWy, gby = W, b, f, gW, gb
    t_mom = 1.0
    res = _kkt(W, gW, gb, l1)
    for epoch in range(1, settings.max_epochs + 1):
        while True:
            step = 1.0 / L
            Wn = _soft(Wy - step * gWy, step * l1)
            bn = by - step * gby
            fn, gWn, gbn = _smooth(Wn, bn, X, Y, l2)
            dW, db = Wn - Wy, bn - by
            # local Lipschitz test on the gradient; immune to the cancellation
            # that breaks the function-value test near the optimum
            dd = np.sum(dW * dW) + np.sum(db * db)
            if np.sum((gWn - gWy) * dW) + np.sum((gbn - gby) * db) <= L * dd:
                break
            L *= 2.0
        Fn = fn + l1 * np.abs(Wn).sum()
        if Fn > F and t_mom > 1.0:
            # function-value restart: drop momentum and retry from the last iterate
            t_mom = 1.0
            Wy, by, fy, gWy, gby = W, b, f, gW, gb
            continue
        # gradient restart: the step opposes the momentum direction
        if np.sum((Wy - Wn) * (Wn - W)) + np.sum((by - bn) * (bn - b)) > 0:
            t_mom = 1.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        beta = (t_mom - 1.0) / t_next
        Wy = Wn + beta * (Wn - W)
        by = bn + beta * (bn - b)
        W, b, f, gW, gb, F = Wn, bn, fn, gWn, gbn, Fn
        t_mom = t_next
        if beta != 0.0:
            fy, gWy, gby = _smooth(Wy, by, X, Y, l2)
        else:
            fy, gWy, gby = f, gW, gb
        L *= 0.9  # let the step grow back
        if F < best[0]:
            best = (F, W, b)
        if epoch % settings.check_every == 0:
            res = _kkt(W, gW, gb, l1)
            if res <= settings.tol:
                return FitResult(_make_head(W, b, mean, std), res, F, epoch)
            # patience: count checks where neither the objective nor the
            # best residual improved
            if F < F_seen or res < res_seen:
                stale = 0
            else:
                stale += 1
                if stale >= settings.lookbehind:
                    break
            F_seen, res_seen = min(F, F_seen), min(res, res_seen)
    res = _kkt(W, gW, gb, l1)
    if res <= settings.tol:
        return FitResult(_make_head(W, b, mean, std), res, F, epoch)
    _, Wb, bb = best
    raise ConvergenceError(f"no convergence at lambda={lam:.4g}: KKT residual {res:.3g} > tol {settings.tol:.3g}",
                           W=Wb, bias=bb, residual=res)


def lambda_grid(lmax, settings: SolverSettings):
    if settings.path_len == 1:
        return np.array([lmax])
    return lmax * np.geomspace(1.0, settings.lambda_min_ratio, settings.path_len)


def fit_path(X, y, settings: SolverSettings = SolverSettings(), n_classes=None,
             feat_mean=None, feat_std=None) -> RegPath:
    """Warm-started path from ``lambda_max`` down to ``lambda_max * lambda_min_ratio``."""
    X = np.asarray(X, dtype=np.float64)
    y, n_classes, _ = _check_labels(y, n_classes)
    lmax = lambda_max(X, y, settings.alpha_elastic, n_classes)
    entries = []
    W0 = b0 = None
    for k, lam in enumerate(lambda_grid(lmax, settings)):
        try:
            r = fit_at(X, y, lam, settings, n_classes, W0, b0, feat_mean, feat_std)
        except ConvergenceError as err:
            err.lam_index = k
            err.args = (f"path entry {k}: {err.args[0]}",)
            raise
        W0, b0 = r.head.W, r.head.bias
        entries.append(PathEntry(float(lam), r.head, r.head.nnz_per_class(), r.kkt_residual, r.objective))
    return RegPath(tuple(entries), settings.alpha_elastic, lmax)


def rank_features(W):
    """Feature order by descending sum_c |W_cj|; ties keep ascending index."""
    score = np.abs(np.asarray(W)).sum(axis=0)
    return np.argsort(-score, kind="stable")


def select_features(X, y, d_red, settings: SolverSettings = SolverSettings(), n_classes=None,
                    alpha_elastic=0.8, lambda_divisor=90.0):
    """Indices of the ``d_red`` most used features of one elastic-net fit.

    The fit uses mixing ``alpha_elastic`` at ``lambda_max / lambda_divisor``.
    Returned in rank order.
    """
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= d_red <= X.shape[1]:
        raise ValueError(f"d_red={d_red} must lie in [1, {X.shape[1]}]")
    sel = SolverSettings(alpha_elastic=alpha_elastic, path_len=1, lambda_min_ratio=settings.lambda_min_ratio,
                         tol=settings.tol, max_epochs=settings.max_epochs, lookbehind=settings.lookbehind,
                         check_every=settings.check_every)
    lam = lambda_max(X, y, alpha_elastic, n_classes) / lambda_divisor
    r = fit_at(X, y, lam, sel, n_classes)
    return rank_features(r.head.W)[:d_red]


def pick_solution(path: RegPath, q: float):
    """Least-regularised entry with at most ``q`` nonzeros per class on average.

    Returns ``(head, flagged)``; ``flagged`` is True when no entry qualifies
    and the most regularised one is returned instead.
    """
    if not len(path):
        raise ValueError("empty path")
    ok = [e for e in path.entries if e.nnz_per_class <= q]
    if not ok:
        return path.entries[0].head, True
    return ok[-1].head, False


def pick_least_regularized(path: RegPath) -> SparseHead:
    if not len(path):
        raise ValueError("empty path")
    return path.entries[-1].head
