import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qsenn.tensorstore import (
    AttributeMeta,
    BadMagicError,
    Dataset,
    DatasetError,
    PathEntry,
    RegPath,
    RunConfig,
    SparseHead,
    TensorFormatError,
    TruncatedError,
    UnsupportedDtypeError,
    decode_tensor,
    encode_tensor,
    load_dataset,
    parse_config_text,
    read_tensor,
    save_dataset,
    write_tensor,
)

shapes = hnp.array_shapes(min_dims=1, max_dims=4, min_side=0, max_side=5)


@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64]), shapes))
def test_encode_decode_roundtrip(a):
    b = decode_tensor(encode_tensor(a))
    assert b.dtype == a.dtype.newbyteorder("<")
    assert b.shape == a.shape
    assert encode_tensor(b) == encode_tensor(a)


def test_header_magic_and_errors():
    buf = encode_tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert buf[:4] == b"QSTF"
    with pytest.raises(BadMagicError):
        decode_tensor(b"XXXX" + buf[4:])
    with pytest.raises(TruncatedError):
        decode_tensor(buf[:-1])
    with pytest.raises(TruncatedError):
        decode_tensor(buf[:14])  # header intact, dims cut
    with pytest.raises(TensorFormatError):
        decode_tensor(buf + b"\0")
    with pytest.raises(TensorFormatError):
        encode_tensor(np.float64(1.0))
    with pytest.raises(UnsupportedDtypeError):
        encode_tensor(np.zeros(3, dtype=np.complex128))


def test_file_roundtrip(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 4, 2))
    write_tensor(a, tmp_path / "a.qstf")
    np.testing.assert_array_equal(read_tensor(tmp_path / "a.qstf"), a)


def _head(rng, kind="dense"):
    W = rng.standard_normal((3, 4))
    return SparseHead(W, rng.standard_normal(3), rng.standard_normal(4), rng.random(4) + 0.5, kind)


def test_head_validation(rng):
    h = _head(rng)
    with pytest.raises(ValueError):
        h.replace(feat_std=np.zeros(4))
    with pytest.raises(ValueError):
        h.replace(kind="ternary", alpha_q=0.5)  # entries not in {-a, 0, a}
    t = h.replace(W=np.sign(h.W) * 0.5, kind="ternary", alpha_q=0.5)
    assert t.kind == "ternary"


def test_head_logits_and_effective_weights(rng):
    h = _head(rng)
    z = rng.standard_normal((5, 4))
    expected = ((z - h.feat_mean) / h.feat_std) @ h.W.T + h.bias
    np.testing.assert_allclose(h.logits(z), expected)
    # effective weights act on raw features up to a per-class constant
    diff = h.logits(z) - z @ h.effective_weights().T
    np.testing.assert_allclose(diff - diff[0], 0.0, atol=1e-12)


def test_head_and_path_save_load(tmp_path, rng):
    h = _head(rng)
    h.save(tmp_path, "x")
    h2 = SparseHead.load(tmp_path, "x")
    assert h2.digest() == h.digest()
    path = RegPath((PathEntry(2.0, h, 4.0, 1e-7, 0.3), PathEntry(1.0, h, 4.0, 1e-7, 0.2)), 0.99, 2.0)
    path.save(tmp_path / "p")
    p2 = RegPath.load(tmp_path / "p")
    assert [e.lam for e in p2.entries] == [2.0, 1.0]
    assert p2.alpha_elastic == 0.99
    with pytest.raises(ValueError):
        RegPath((PathEntry(1.0, h, 4.0, 0.0), PathEntry(2.0, h, 4.0, 0.0)), 0.99)


def test_dataset_roundtrip(tmp_path, rng):
    metas = (AttributeMeta(0, "wing", "red", "adjective"), AttributeMeta(1, "bill", "cone", "noun"))
    ds = Dataset(rng.standard_normal((4, 2, 3, 3)), np.array([0, 1, 2, 1]), 3,
                 np.array([[0, 1], [1, 1], [0, 0], [1, 0]]), metas, "test")
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.attributes, ds.attributes)
    assert back.attr_meta == metas and back.split == "test" and back.n_classes == 3


def test_dataset_rejects_bad_labels(rng):
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 1, 1)), np.array([0, 5]), 3)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 1, 1)), np.array([0]), 3)


def test_load_dataset_missing(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_config_text_roundtrip():
    cfg = RunConfig(seed=7, lambda_fd=0.25, quantize=False)
    back = RunConfig.from_mapping(parse_config_text(cfg.to_text()))
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert RunConfig(seed=8).digest() != cfg.digest()


@pytest.mark.parametrize("text", ["seed 3", "= 3", "seed = 1\nseed = 2"])
def test_config_parse_errors(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ValueError):
        RunConfig.from_mapping({"nonsense": "1"})
    with pytest.raises(ValueError):
        RunConfig(n_q=1)
    with pytest.raises(ValueError):
        RunConfig.from_mapping({"quantize": "maybe"})
    assert json.loads(json.dumps(RunConfig().to_text()))


def test_one_by_one_file_size(tmp_path):
    # 12-byte fixed header + 2 dims x 8 bytes + one f32
    write_tensor(np.array([[42.0]], dtype=np.float32), tmp_path / "t.qstf")
    assert (tmp_path / "t.qstf").stat().st_size == 32
