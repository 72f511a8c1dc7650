import numpy as np
import pytest

from qsenn.synthgen import PlantedSpec, gen_planted
from qsenn.tensorstore import RunConfig, SparseHead, encode_tensor
from qsenn.trainer import (
    DeskModel,
    TrainingError,
    evaluate_model,
    features,
    finetune_fixed_head,
    forward,
    init_model,
    loss_and_grads,
    qsenn_fit,
    refit_bias,
    restrict,
    sparse_head,
    step_schedule,
    train_dense,
)

FAST = RunConfig(dense_epochs=4, finetune_epochs=2, final_epochs=3, n_iterations=2, n_f_selected=12,
                 path_len=10)


@pytest.fixture(scope="module")
def data():
    return gen_planted(PlantedSpec(n_train_per_class=40, n_test_per_class=40, seed=4))


def _model(rng, c_in=3, n_f=4, n_c=3):
    A = rng.standard_normal((n_f, c_in))
    a0 = rng.standard_normal(n_f) * 0.1
    head = SparseHead(rng.standard_normal((n_c, n_f)), rng.standard_normal(n_c), rng.standard_normal(n_f),
                      rng.random(n_f) + 0.5, "sparse")
    return A, a0, head


def test_forward_pools_relu_maps(rng):
    A, a0, head = _model(rng)
    x = rng.standard_normal((5, 3, 2, 3))
    out = forward(DeskModel(A, a0, head), x)
    pre = np.einsum("fc,bchw->bfhw", A, x) + a0[None, :, None, None]
    np.testing.assert_allclose(out.maps, np.maximum(pre, 0))
    np.testing.assert_allclose(out.z, out.maps.mean(axis=(2, 3)))
    np.testing.assert_allclose(out.logits, head.logits(out.z))


def test_gradients_match_finite_differences(rng):
    A, a0, head = _model(rng)
    x = rng.standard_normal((6, 3, 2, 2))
    y = np.array([0, 1, 2, 0, 1, 2])
    mask = (rng.random((6, 4)) > 0.2) / 0.8
    res = loss_and_grads(A, a0, head, x, y, 0.3, 2, mask)

    def f(A_, a0_, W_, b_):
        return loss_and_grads(A_, a0_, head.replace(W=W_, bias=b_), x, y, 0.3, 2, mask).loss

    h = 1e-6
    for name, arr, g in (("A", A, res.gA), ("a0", a0, res.ga0), ("W", head.W, res.gW), ("b", head.bias, res.gb)):
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            args = {"A": A.copy(), "a0": a0.copy(), "W": head.W.copy(), "b": head.bias.copy()}
            args[name][i] += h
            fp = f(args["A"], args["a0"], args["W"], args["b"])
            args[name][i] -= 2 * h
            fm = f(args["A"], args["a0"], args["W"], args["b"])
            num[i] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-7, err_msg=name)


def test_init_model_is_near_identity(data):
    train, _, _ = data
    m = init_model(20, 6, RunConfig(init_noise=0.0), train.inputs)
    np.testing.assert_array_equal(m.A, np.eye(20))
    z = features(m, train.inputs)
    np.testing.assert_allclose(m.head.feat_mean, z.mean(0))


def test_step_schedule():
    assert step_schedule(1.0, 5, 2, 0.5) == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_refit_bias_is_optimal(rng):
    z = rng.standard_normal((50, 3))
    y = rng.integers(0, 3, 50)
    head = SparseHead(rng.standard_normal((3, 3)), np.zeros(3), np.zeros(3), np.ones(3), "sparse")
    h2 = refit_bias(head, z, y)
    P = np.exp(h2.logits(z) - h2.logits(z).max(1, keepdims=True))
    P /= P.sum(1, keepdims=True)
    np.testing.assert_allclose(P.mean(0), np.bincount(y, minlength=3) / 50, atol=1e-7)
    assert abs(h2.bias.sum()) < 1e-12


def test_dense_then_sparse_head(data):
    train, test, _ = data
    model, rep = train_dense(train, FAST)
    assert rep.epochs == 4 and rep.ce[-1] < rep.ce[0]
    head = sparse_head(model, train, FAST.replace(per_class_budget=3))
    assert head.kind == "ternary" and np.count_nonzero(head.W) <= 18
    with pytest.raises(ValueError):
        finetune_fixed_head(model, head.replace(kind="sparse", alpha_q=None), train, FAST, epochs=1, lr=0.01)
    with pytest.raises(ValueError):
        train_dense(test, FAST)


def test_restrict_keeps_rows(data):
    train, _, _ = data
    m = init_model(20, 6, FAST, train.inputs)
    r = restrict(m, np.array([3, 1]))
    np.testing.assert_array_equal(r.A, m.A[[3, 1]])
    np.testing.assert_array_equal(r.feature_ids, [3, 1])
    np.testing.assert_allclose(features(r, train.inputs), features(m, train.inputs)[:, [3, 1]])


def test_pipeline_is_deterministic_and_roundtrips(data, tmp_path):
    train, test, _ = data
    a = qsenn_fit(train, FAST)
    b = qsenn_fit(train, FAST)
    assert encode_tensor(a.model.A) == encode_tensor(b.model.A)
    assert a.model.head.digest() == b.model.head.digest()
    assert a.model.n_features == 12 and a.model.head.kind == "ternary"
    assert len(a.iteration_deltas) == 1 and len(a.heads) == 2
    a.model.save(tmp_path, "final", FAST.digest())
    back = DeskModel.load(tmp_path)
    np.testing.assert_array_equal(back.A, a.model.A)
    assert back.head.digest() == a.model.head.digest()
    rep = evaluate_model(back, train, test)
    assert rep == evaluate_model(a.model, train, test)
    assert 0 <= rep.accuracy <= 1 and 0.2 <= rep.loc5_mean <= 1


def test_ablation_modes(data):
    train, _, _ = data
    noq = qsenn_fit(train, FAST.replace(quantize=False))
    assert noq.model.head.kind == "sparse"
    noit = qsenn_fit(train, FAST.replace(n_iterations=1))
    assert noit.iteration_deltas == [] and len(noit.heads) == 1


def test_divergence_is_reported(data):
    train, _, _ = data
    with pytest.raises((TrainingError, FloatingPointError)) as info:
        with np.errstate(all="ignore"):
            qsenn_fit(train, FAST.replace(dense_lr=1e6, dense_head_lr=1e6))
    if isinstance(info.value, TrainingError):
        assert info.value.stage == "dense"
