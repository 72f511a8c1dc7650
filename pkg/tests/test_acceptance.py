"""Acceptance gate: one PASS/FAIL line per criterion, printed even when the
check passes.  Thresholds are fixed here and never tuned to the outcome."""
import json
import time

import numpy as np
import pytest

from oracles import elastic_net_oracle, loc_brute, tiny_instance
from qsenn.cli import run
from qsenn.clipalign import align, certainty_bins
from qsenn.divloss import combined_loss, cross_entropy, feature_diversity_loss, loc_at_k
from qsenn.glmpath import SolverSettings, fit_at, kkt_residual, lambda_max
from qsenn.metrics import alignment_r, attribute_alignment, dependence_gamma, mean_shift_1d
from qsenn.quantizer import quantize_ternary
from qsenn.synthgen import (
    PlantedSpec,
    concept_of_feature,
    gen_embedding_bundle,
    gen_planted,
    gen_spurious,
    support_recovery,
)
from qsenn.tensorstore import RunConfig, SparseHead
from qsenn.trainer import evaluate_model, features, predict, qsenn_fit, train_dense

SEEDS = range(5)
# feature extractor starts far from the concept basis so the head has to move
ENTANGLED = dict(init_noise=1.0, dense_epochs=5, finetune_lr=0.005, n_f_selected=12)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail, started):
        with capsys.disabled():
            print(f"\ncriterion {n:>2} {'PASS' if ok else 'FAIL'} ({time.time() - started:.1f}s): {detail}")
        assert ok, detail

    return emit


def head_of(W):
    W = np.asarray(W, dtype=np.float64)
    c, d = W.shape
    return SparseHead(W, np.zeros(c), np.zeros(d), np.ones(d), "sparse")


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def num_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def test_criterion_01_quantization_exactness(verdict):
    t = time.time()
    rng = np.random.default_rng(0)
    failures = []
    for trial in range(1000):
        W = rng.standard_normal((rng.integers(2, 20), rng.integers(2, 40)))
        n_w = int(rng.integers(1, W.size + 1))
        q = quantize_ternary(W, n_w)
        kept = q.Wq != 0
        ok = np.count_nonzero(q.Wq) == n_w
        ok &= set(np.unique(q.Wq)) <= {-q.alpha, 0.0, q.alpha}
        ok &= abs(q.alpha - np.abs(W[kept]).mean()) <= 1e-12
        ok &= np.array_equal(quantize_ternary(q.Wq, n_w).Wq, q.Wq)
        c = 2.0 ** int(rng.integers(-8, 9))
        ok &= np.array_equal(quantize_ternary(c * W, n_w).Wq, c * q.Wq)
        if not ok:
            failures.append(trial)
    verdict(1, not failures and time.time() - t < 5,
            f"1000 matrices, failures={failures[:5]}", t)


def test_criterion_02_solver_correctness(verdict):
    t = time.time()
    X, y, c = tiny_instance(40, 6, 3, seed=1)
    lmax = lambda_max(X, y, 0.99)
    worst_gap = worst_kkt = 0.0
    for ratio in (0.5, 0.1, 0.02):
        lam = ratio * lmax
        r = fit_at(X, y, lam, SolverSettings(tol=1e-8), c)
        _, _, f_o = elastic_net_oracle(X, y, c, lam, 0.99)
        worst_gap = max(worst_gap, abs(r.objective - f_o))
        worst_kkt = max(worst_kkt, kkt_residual(r.head.W, r.head.bias, X, y, lam, 0.99, c))
    zero = all(not fit_at(X, y, m * lmax, SolverSettings(tol=1e-8), c).head.W.any() for m in (1.0, 1.5, 10.0))
    ok = worst_gap <= 1e-6 and worst_kkt <= 1e-6 and zero and time.time() - t < 10
    verdict(2, ok, f"objective gap {worst_gap:.2e}, KKT {worst_kkt:.2e}, W=0 above lambda_max: {zero}", t)


def test_criterion_03_loc_bounds_and_oracle(verdict):
    t = time.time()
    rng = np.random.default_rng(3)
    worst_dev = 0.0
    in_bounds = True
    for _ in range(10_000):
        k = int(rng.integers(1, 8))
        maps = rng.standard_normal((8, 3, 3)) * rng.uniform(0.1, 20)
        row = rng.standard_normal(8) * (rng.random(8) < 0.8)
        row[rng.integers(0, 8)] = 1.0
        v = loc_at_k(maps, head_of(row[None]), 0, k)
        kk = min(k, np.count_nonzero(row))
        in_bounds &= 1 / kk - 1e-12 <= v <= 1 + 1e-12
        worst_dev = max(worst_dev, abs(v - loc_brute(maps, row, k)))
    same = np.repeat(rng.standard_normal((1, 4, 4)), 6, axis=0)
    identical = all(loc_at_k(same, head_of(np.ones((1, 6))), 0, k) == 1 / k for k in (1, 2, 4, 5))
    ok = in_bounds and identical and worst_dev <= 1e-12 and time.time() - t < 10
    verdict(3, ok, f"bounds hold: {in_bounds}, identical maps 1/k: {identical}, brute-force dev {worst_dev:.1e}", t)


def test_criterion_04_gradient_checks(verdict):
    t = time.time()
    rng = np.random.default_rng(4)
    worst = {"fd": 0.0, "ce": 0.0, "combined": 0.0}
    for _ in range(100):
        maps = rng.standard_normal((2, 5, 2, 2))
        logits = rng.standard_normal((2, 3))
        head = head_of(rng.standard_normal((3, 5)))
        y = rng.integers(0, 3, 2)
        _, g = feature_diversity_loss(maps, head, y, 3)
        worst["fd"] = max(worst["fd"], rel_err(g, num_grad(lambda m: feature_diversity_loss(m, head, y, 3)[0],
                                                              maps.copy())))
        _, g = cross_entropy(logits, y)
        worst["ce"] = max(worst["ce"], rel_err(g, num_grad(lambda z: cross_entropy(z, y)[0], logits.copy())))
        _, gl, gm, _ = combined_loss(logits, y, maps, head, 0.196, 3)
        worst["combined"] = max(
            worst["combined"],
            rel_err(gl, num_grad(lambda z: combined_loss(z, y, maps, head, 0.196, 3)[0], logits.copy())),
            rel_err(gm, num_grad(lambda m: combined_loss(logits, y, m, head, 0.196, 3)[0], maps.copy())))
    ok = max(worst.values()) <= 1e-4 and time.time() - t < 30
    verdict(4, ok, "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), t)


def test_criterion_05_support_recovery(verdict):
    t = time.time()
    recov, accs = [], []
    for s in SEEDS:
        spec = PlantedSpec(seed=s)
        train, test, gt = gen_planted(spec)
        res = qsenn_fit(train, RunConfig(seed=s, n_f_selected=12))
        fc = concept_of_feature(features(res.model, train.inputs), train.attributes)
        recov.append(support_recovery(res.model.head, gt.w_star, fc))
        accs.append(float(np.mean(predict(res.model, test.inputs) == test.labels)))
    ok = min(recov) >= 0.9 and min(accs) >= 0.95 and time.time() - t < 300
    verdict(5, ok, f"support recovery {np.round(recov, 3).tolist()}, test accuracy {np.round(accs, 3).tolist()}", t)


def test_criterion_06_spurious_robustness(verdict):
    t = time.time()
    gains = []
    for s in SEEDS:
        train, test, _ = gen_spurious(PlantedSpec(seed=s, spurious=True))
        cfg = RunConfig(seed=s, n_f_selected=12)
        dense = train_dense(train, cfg)
        res = qsenn_fit(train, cfg, dense=dense)
        acc_dense = np.mean(predict(dense[0], test.inputs) == test.labels)
        acc_q = np.mean(predict(res.model, test.inputs) == test.labels)
        gains.append(float(acc_q - acc_dense))
    mean_gain = float(np.mean(gains))
    ok = mean_gain >= 0.10 and time.time() - t < 300
    verdict(6, ok, f"mean gain {100 * mean_gain:.1f} pp over dense (per seed {np.round(100 * np.array(gains), 1).tolist()})",
            t)


def test_criterion_07_ablation_ordering(verdict):
    t = time.time()
    rows = {"full": [], "noq": [], "noit": []}
    for s in SEEDS:
        train, test, _ = gen_planted(PlantedSpec(seed=s))
        base = RunConfig(seed=s, **ENTANGLED)
        dense = train_dense(train, base)
        for name, cfg in (("full", base), ("noq", base.replace(quantize=False)),
                          ("noit", base.replace(n_iterations=1))):
            res = qsenn_fit(train, cfg, dense=dense)
            rep = evaluate_model(res.model, train, test)
            rows[name].append((rep.binary_fraction, rep.loc5_mean, res.support_stability))
    m = {k: np.mean(v, axis=0) for k, v in rows.items()}
    checks = {"binary": bool(m["full"][0] > m["noq"][0]), "loc5": bool(m["full"][1] > m["noq"][1]),
              "stability": bool(m["full"][2] > m["noit"][2])}
    ok = all(checks.values()) and time.time() - t < 600
    detail = (f"binary {m['full'][0]:.3f} vs {m['noq'][0]:.3f}, Loc@5 {m['full'][1]:.4f} vs {m['noq'][1]:.4f}, "
              f"stability {m['full'][2]:.3f} vs {m['noit'][2]:.3f}; {checks}")
    verdict(7, ok, detail, t)


def test_criterion_08_iteration_convergence(verdict):
    t = time.time()
    traces = []
    for s in range(3):
        train, _, _ = gen_planted(PlantedSpec(seed=s))
        res = qsenn_fit(train, RunConfig(seed=s, n_iterations=8, **ENTANGLED))
        traces.append(np.round(res.iteration_deltas, 4).tolist())
    ok = all(tr[0] > tr[-1] for tr in traces) and time.time() - t < 600
    verdict(8, ok, f"changed fractions per iteration {traces}", t)


def test_criterion_09_alignment_validation(verdict):
    t = time.time()
    spec = PlantedSpec(seed=0, n_train_per_class=100)
    train, _, _ = gen_planted(spec)
    pooled = train.inputs.reshape(len(train), spec.n_channels, -1).mean(-1)
    rng = np.random.default_rng(9)
    # features: each leans on one concept with a random admixture of the others
    mix = np.eye(spec.d_total) + rng.uniform(0, 0.6, (spec.d_total, spec.d_total))
    z = np.maximum(pooled @ mix, 0)
    a_gt = attribute_alignment(z, train.attributes)
    results = {}
    for sigma in (0.0, 0.25, 0.5, 1.0, 2.0):
        rep = align(z, gen_embedding_bundle(spec, train.attributes, sigma=sigma, seed=1), a_gt, seed=2)
        bins = certainty_bins(rep.a_clip, rep.pos_pred_rel)
        results[sigma] = (float(np.nanmean(rep.pos_pred_rel)), rep.static_pos_pred_rel, rep.random_pos_pred_rel,
                          bins.medians[-1] >= bins.medians[0])
    ok = results[0.0][0] >= 0.95
    ok &= all(p > s for p, s, _, _ in results.values())
    ok &= all(abs(r - 0.5) <= 0.02 for _, _, r, _ in results.values())
    ok &= all(b for *_, b in results.values())
    ok &= time.time() - t < 60
    detail = "; ".join(f"sigma {k}: proposed {p:.3f} static {s:.3f} random {r:.3f} top>=bottom {b}"
                       for k, (p, s, r, b) in results.items())
    verdict(9, ok, detail, t)


def test_criterion_10_metric_degenerate_cases(verdict):
    t = time.time()
    d = 9
    uniform = dependence_gamma(head_of(np.ones((1, d))), np.ones((4, d))) == 1 / d
    z = np.zeros((4, d))
    z[:, 2] = 3.0
    one_hot = dependence_gamma(head_of(np.ones((1, d))), z) == 1.0
    rng = np.random.default_rng(10)
    feats = rng.random((60, 6))
    attrs = rng.random((60, 8)) < 0.5
    r1 = alignment_r(attribute_alignment(feats, attrs), feats)
    r2 = alignment_r(attribute_alignment(37.5 * feats, attrs), 37.5 * feats)
    scale = abs(r1 - r2) <= 1e-10
    r = np.random.default_rng(9)
    bimodal = mean_shift_1d(np.concatenate([r.normal(-5, 0.3, 250), r.normal(5, 0.3, 250)])).n_clusters
    unimodal = mean_shift_1d(np.random.default_rng(9).normal(size=500)).n_clusters
    ok = uniform and one_hot and scale and bimodal == 2 and unimodal == 1 and time.time() - t < 30
    verdict(10, ok, f"gamma uniform {uniform}, one-hot {one_hot}, r scale diff {abs(r1 - r2):.1e}, "
                    f"mean shift clusters bimodal {bimodal} unimodal {unimodal}", t)


def test_criterion_11_determinism(verdict, tmp_path):
    t = time.time()
    (tmp_path / "spec.cfg").write_text("seed = 11\n")
    digests = []
    for name in ("a", "b"):
        root = tmp_path / name
        assert run(["synth", "--config", str(tmp_path / "spec.cfg"), "--out", str(root / "data")]) == 0
        assert run(["train", "--data", str(root / "data"), "--features", "12", "--seed", "11",
                    "--out", str(root / "run")]) == 0
        assert run(["eval", "--data", str(root / "data"), "--model", str(root / "run/model"),
                    "--out", str(root / "run")]) == 0
        files = {}
        for f in sorted(root.rglob("*")):
            if f.is_file():
                rel = str(f.relative_to(root))
                if f.name == "manifest.json":
                    m = json.loads(f.read_text())
                    m["inputs"] = sorted(m.get("inputs", {}).values())  # paths differ, content must not
                    files[rel] = json.dumps(m, sort_keys=True)
                else:
                    files[rel] = f.read_bytes()
        digests.append(files)
    differ = sorted(k for k in digests[0] if digests[0][k] != digests[1].get(k))
    ok = not differ and digests[0].keys() == digests[1].keys() and time.time() - t < 600
    verdict(11, ok, f"{len(digests[0])} files compared, differing: {differ}", t)
