"""Shared domain types and on-disk formats.

Tensors are stored in a minimal little-endian binary format::

    magic "QSTF" | version u32 | dtype u8 | ndim u8 | reserved u16 | ndim x u64 dims | payload

dtype codes: 0 = f32, 1 = f64, 2 = i64.  In memory a tensor is just a
C-contiguous ``numpy.ndarray`` of one of those dtypes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"QSTF"
VERSION = 1
_HEADER = struct.Struct("<4sIBBH")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class DatasetError(ValueError):
    pass


def _dtype_code(dtype):
    try:
        return _CODES[np.dtype(dtype).newbyteorder("<")]
    except KeyError:
        raise UnsupportedDtypeError(f"unsupported dtype {dtype}") from None


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if not 1 <= a.ndim <= 4:
        raise TensorFormatError(f"tensor must have 1-4 dims, got {a.ndim}")
    code = _dtype_code(a.dtype)
    header = _HEADER.pack(MAGIC, VERSION, code, a.ndim, 0)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
    return header + dims + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size or buf[:4] != MAGIC:
        raise BadMagicError("bad magic")
    _, version, code, ndim, _ = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype code {code}")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"bad ndim {ndim}")
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise TruncatedError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dt = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - off < nbytes:
        raise TruncatedError(f"truncated payload: need {nbytes} bytes, have {len(buf) - off}")
    if len(buf) - off > nbytes:
        raise TensorFormatError("trailing bytes after payload")
    return np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()


def write_tensor(array, path) -> None:
    data = encode_tensor(array)
    Path(path).write_bytes(data)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# heads and paths


@dataclass(frozen=True)
class SparseHead:
    """Linear decision layer acting on standardized features.

    ``logits = W @ ((z - feat_mean) / feat_std) + bias``
    """

    W: np.ndarray
    bias: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    kind: str = "dense"
    alpha_q: float | None = None

    def __post_init__(self):
        if self.kind not in ("dense", "sparse", "ternary"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        n_c, d = self.W.shape
        if self.bias.shape != (n_c,) or self.feat_mean.shape != (d,) or self.feat_std.shape != (d,):
            raise ValueError("head component shapes do not conform")
        if np.any(self.feat_std <= 0):
            raise ValueError("feat_std must be strictly positive")
        if self.kind == "ternary":
            if self.alpha_q is None or not self.alpha_q > 0:
                raise ValueError("ternary head needs a positive alpha_q")
            if not np.all(np.isin(self.W, (-self.alpha_q, 0.0, self.alpha_q))):
                raise ValueError("ternary head has entries outside {-a, 0, +a}")

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    def effective_weights(self) -> np.ndarray:
        """Weights acting on the raw (unstandardized) features."""
        return self.W / self.feat_std

    def logits(self, z) -> np.ndarray:
        return ((np.asarray(z) - self.feat_mean) / self.feat_std) @ self.W.T + self.bias

    def nnz_per_class(self) -> float:
        return np.count_nonzero(self.W) / self.n_classes

    def replace(self, **changes) -> "SparseHead":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.W, self.bias, self.feat_mean, self.feat_std):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(f"{self.kind}:{self.alpha_q!r}".encode())
        return h.hexdigest()

    def save(self, directory, prefix="head") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("W", "bias", "feat_mean", "feat_std"):
            write_tensor(np.asarray(getattr(self, name), dtype=np.float64), d / f"{prefix}_{name}.qstf")
        meta = {"kind": self.kind, "alpha_q": self.alpha_q}
        (d / f"{prefix}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory, prefix="head") -> "SparseHead":
        d = Path(directory)
        meta = json.loads((d / f"{prefix}.json").read_text())
        arrays = {name: read_tensor(d / f"{prefix}_{name}.qstf") for name in ("W", "bias", "feat_mean", "feat_std")}
        return cls(**arrays, kind=meta["kind"], alpha_q=meta["alpha_q"])


@dataclass(frozen=True)
class PathEntry:
    lam: float
    head: SparseHead
    nnz_per_class: float
    kkt_residual: float
    objective: float = float("nan")


@dataclass(frozen=True)
class RegPath:
    entries: tuple
    alpha_elastic: float
    lambda_max: float = float("nan")

    def __post_init__(self):
        lams = [e.lam for e in self.entries]
        if any(lam <= 0 for lam in lams):
            raise ValueError("path lambdas must be positive")
        if any(b >= a for a, b in zip(lams, lams[1:])):
            raise ValueError("path lambdas must be strictly decreasing")

    def __len__(self):
        return len(self.entries)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, e in enumerate(self.entries):
            prefix = f"entry{i:03d}"
            e.head.save(d, prefix)
            lines.append(json.dumps({
                "lambda": e.lam,
                "nnz_per_class": e.nnz_per_class,
                "kkt_residual": e.kkt_residual,
                "objective": e.objective,
                "file": f"{prefix}_W.qstf",
            }, sort_keys=True))
        (d / "path.jsonl").write_text("\n".join(lines) + "\n")
        meta = {"alpha_elastic": self.alpha_elastic, "lambda_max": self.lambda_max}
        (d / "path_meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "RegPath":
        d = Path(directory)
        entries = []
        for line in (d / "path.jsonl").read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            prefix = rec["file"].removesuffix("_W.qstf")
            entries.append(PathEntry(rec["lambda"], SparseHead.load(d, prefix), rec["nnz_per_class"],
                                     rec["kkt_residual"], rec.get("objective", float("nan"))))
        meta_file = d / "path_meta.json"
        meta = json.loads(meta_file.read_text()) if meta_file.exists() else {"alpha_elastic": float("nan")}
        return cls(tuple(entries), meta["alpha_elastic"], meta.get("lambda_max", float("nan")))


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class AttributeMeta:
    attr_id: int
    type_id: str
    expression: str
    template_kind: str


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    attributes: np.ndarray | None = None
    attr_meta: tuple | None = None
    split: str = "train"

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or len(labels) != self.inputs.shape[0]:
            raise DatasetError(f"{len(labels)} labels for {self.inputs.shape[0]} samples")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise DatasetError(f"class index outside [0, {self.n_classes})")
        if self.attributes is not None:
            if self.attributes.ndim != 2 or self.attributes.shape[0] != len(labels):
                raise DatasetError("attribute matrix rows do not match samples")
            if self.attr_meta is not None and len(self.attr_meta) != self.attributes.shape[1]:
                raise DatasetError("attribute metadata does not match attribute columns")
        if self.split not in ("train", "test"):
            raise DatasetError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.labels)


def _read_csv_rows(path, expected_header=None):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    if expected_header is not None and rows[0] != expected_header:
        raise DatasetError(f"{path}: header {rows[0]} != {expected_header}")
    return rows[0], rows[1:]


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(ds.inputs, d / "inputs.qstf")
    _write_csv(d / "labels.csv", ["index", "label"], [[i, int(y)] for i, y in enumerate(ds.labels)])
    if ds.attributes is not None:
        n_attr = ds.attributes.shape[1]
        _write_csv(d / "attributes.csv", ["index"] + [f"attr_{a}" for a in range(n_attr)],
                   [[i] + [int(v) for v in row] for i, row in enumerate(ds.attributes)])
    if ds.attr_meta is not None:
        _write_csv(d / "attributes_meta.csv", ["attr_id", "type_id", "expression", "template_kind"],
                   [[m.attr_id, m.type_id, m.expression, m.template_kind] for m in ds.attr_meta])
    meta = {"n_classes": ds.n_classes, "split": ds.split}
    (d / "dataset.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_labels(path) -> np.ndarray:
    _, rows = _read_csv_rows(path, ["index", "label"])
    labels = np.empty(len(rows), dtype=np.int64)
    for k, row in enumerate(rows):
        if len(row) != 2 or int(row[0]) != k:
            raise DatasetError(f"{path}: bad row {k}: {row}")
        labels[k] = int(row[1])
    return labels


def read_attr_meta(path) -> tuple:
    _, rows = _read_csv_rows(path, ["attr_id", "type_id", "expression", "template_kind"])
    metas = []
    for k, row in enumerate(rows):
        if len(row) != 4:
            raise DatasetError(f"{path}: bad row {k}: {row}")
        metas.append(AttributeMeta(int(row[0]), row[1], row[2], row[3]))
    return tuple(metas)


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not (d / "inputs.qstf").exists() or not (d / "labels.csv").exists():
        raise DatasetError(f"{d}: missing inputs.qstf or labels.csv")
    inputs = read_tensor(d / "inputs.qstf")
    labels = read_labels(d / "labels.csv")
    if len(labels) != inputs.shape[0]:
        raise DatasetError(f"{len(labels)} labels for {inputs.shape[0]} samples")
    meta = json.loads((d / "dataset.json").read_text()) if (d / "dataset.json").exists() else {}
    n_classes = int(meta.get("n_classes", labels.max() + 1 if len(labels) else 0))
    split = meta.get("split", "test" if d.name == "test" else "train")

    attributes = None
    if (d / "attributes.csv").exists():
        header, rows = _read_csv_rows(d / "attributes.csv")
        if not header or header[0] != "index" or any(h != f"attr_{a}" for a, h in enumerate(header[1:])):
            raise DatasetError("attributes.csv: bad header")
        n_attr = len(header) - 1
        attributes = np.zeros((len(rows), n_attr), dtype=np.int64)
        for k, row in enumerate(rows):
            if len(row) != n_attr + 1:
                raise DatasetError(f"attributes.csv: row {k} has {len(row) - 1} attributes, expected {n_attr}")
            attributes[k] = [int(v) for v in row[1:]]
    attr_meta = read_attr_meta(d / "attributes_meta.csv") if (d / "attributes_meta.csv").exists() else None
    return Dataset(inputs, labels, n_classes, attributes, attr_meta, split)


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # architecture / selection
    n_features: int = 0  # extractor width; 0 means "same as input channels"
    n_f_selected: int = 50
    per_class_budget: int = 5
    n_iterations: int = 4
    n_q: int = 2
    init_noise: float = 0.01
    # dense stage
    dense_epochs: int = 30
    dense_lr: float = 0.005
    dense_head_lr: float = 0.01
    dense_lr_step_every: int = 10
    dense_lr_step_factor: float = 0.4
    dense_momentum: float = 0.9
    dense_dropout: float = 0.2
    # fine-tuning stages
    finetune_epochs: int = 10
    finetune_lr: float = 0.002  # 0 means 100x the final dense learning rate
    iteration_lr_decay: float = 0.9
    final_epochs: int = 40
    final_lr_step_every: int = 10
    final_lr_step_factor: float = 0.4
    finetune_momentum: float = 0.95
    finetune_dropout: float = 0.1
    weight_decay: float = 5e-4
    batch_size: int = 16
    lambda_fd: float = 0.196
    k_loc: int = 5
    # sparse head solver
    alpha_elastic: float = 0.99
    path_len: int = 20
    lambda_min_ratio: float = 1e-2
    solver_tol: float = 1e-5
    solver_max_epochs: int = 20000
    lookbehind: int = 5
    select_alpha: float = 0.8
    select_lambda_divisor: float = 90.0
    # ablations
    quantize: bool = True

    def __post_init__(self):
        counts = ("n_f_selected", "per_class_budget", "n_iterations", "batch_size", "k_loc",
                  "path_len", "solver_max_epochs", "lookbehind", "dense_lr_step_every", "final_lr_step_every")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_q < 2:
            raise ValueError("n_q must be >= 2")
        if not 0 <= self.seed < 2**32:
            raise ValueError("seed must fit in an unsigned 32-bit integer")
        if self.solver_tol <= 0:
            raise ValueError("solver_tol must be positive")
        if not 0 < self.alpha_elastic <= 1 or not 0 < self.select_alpha <= 1:
            raise ValueError("elastic-net mixing must lie in (0, 1]")
        if not 0 < self.lambda_min_ratio < 1:
            raise ValueError("lambda_min_ratio must lie in (0, 1)")
        for name in ("dense_epochs", "finetune_epochs", "final_epochs", "n_features"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        return cls(**coerce_fields(cls, values))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return dump_config(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def read_config(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _coerce(value, typ):
    if not isinstance(value, str):
        return value
    if typ is bool or typ == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ is int or typ == "int":
        return int(value)
    if typ is float or typ == "float":
        return float(value)
    return value


def coerce_fields(cls, values: dict) -> dict:
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    return {k: _coerce(v, fields[k]) for k, v in values.items()}


def dump_config(obj) -> str:
    lines = [f"# {type(obj).__name__}"]
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
