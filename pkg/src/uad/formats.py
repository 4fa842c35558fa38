"""On-disk formats: model checkpoints, logit matrices and datasets.

Binary layouts (all little-endian):

``UADM`` checkpoint
    magic(4) version:u16 n_layers:u32 dims:u32*(n_layers+1), then for each
    layer W (row-major, in x out) followed by b, as f64.
``UADL`` logits
    magic(4) version:u16 n:u32 K:u32, then n*K f64 row-major.
``UADD`` dataset
    magic(4) n:u32 d:u32 K:u32, features n*d f64 row-major, labels n u32.
"""
import csv
import json
import struct
from pathlib import Path

import numpy as np

from uad.errors import InvalidInput, UADIOError
from uad.trainer import LabeledDataset, MlpClassifier

CHECKPOINT_MAGIC = b"UADM"
LOGITS_MAGIC = b"UADL"
DATASET_MAGIC = b"UADD"
CHECKPOINT_VERSION = 1
LOGITS_VERSION = 1


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UADIOError(f"cannot read {path}: {exc}") from exc


def _write(path, data):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise UADIOError(f"cannot write {path}: {exc}") from exc


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def sidecar_path(path):
    return Path(path).with_suffix(Path(path).suffix + ".json")


def dump_json(obj, path):
    _write(path, (json.dumps(obj, indent=2) + "\n").encode())


def save_checkpoint(model, path, meta=None):
    """Write ``path`` (binary) and ``path.json`` (config/seed metadata)."""
    n_layers = len(model.weights)
    buf = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, n_layers)]
    buf.append(struct.pack(f"<{n_layers + 1}I", *model.layer_dims))
    for w, b in zip(model.weights, model.biases):
        buf += [_f64(w), _f64(b)]
    _write(path, b"".join(buf))
    dump_json({"layer_dims": list(model.layer_dims), **(meta or {})}, sidecar_path(path))


def load_checkpoint(path):
    """Return (model, metadata); metadata is {} if the sidecar is missing."""
    raw = _read(path)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise InvalidInput(f"{path}: not a UADM checkpoint")
    version, n_layers = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidInput(f"{path}: unsupported checkpoint version {version}")
    off = 10
    dims = list(struct.unpack_from(f"<{n_layers + 1}I", raw, off))
    off += 4 * (n_layers + 1)
    ws, bs = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, "<f8", a * b, off).reshape(a, b).astype(np.float64)
        off += 8 * a * b
        bias = np.frombuffer(raw, "<f8", b, off).astype(np.float64)
        off += 8 * b
        ws.append(w)
        bs.append(bias)
    if off != len(raw):
        raise InvalidInput(f"{path}: {len(raw) - off} trailing bytes")
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    return MlpClassifier(dims, ws, bs), meta


def save_logits(logits, path):
    """Binary UADL unless ``path`` ends in .csv."""
    a = np.asarray(logits, dtype=np.float64)
    if Path(path).suffix.lower() == ".csv":
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"logit_{k}" for k in range(a.shape[1])])
                w.writerows([[repr(float(v)) for v in row] for row in a])
        except OSError as exc:
            raise UADIOError(f"cannot write {path}: {exc}") from exc
        return
    n, k = a.shape
    _write(path, LOGITS_MAGIC + struct.pack("<HII", LOGITS_VERSION, n, k) + _f64(a))


def load_logits(path):
    if Path(path).suffix.lower() == ".csv":
        try:
            return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
        except OSError as exc:
            raise UADIOError(f"cannot read {path}: {exc}") from exc
    raw = _read(path)
    if raw[:4] != LOGITS_MAGIC:
        raise InvalidInput(f"{path}: not a UADL logit file")
    version, n, k = struct.unpack_from("<HII", raw, 4)
    if version != LOGITS_VERSION:
        raise InvalidInput(f"{path}: unsupported logit file version {version}")
    if len(raw) != 14 + 8 * n * k:
        raise InvalidInput(f"{path}: size does not match header ({n} x {k})")
    return np.frombuffer(raw, "<f8", n * k, 14).reshape(n, k).astype(np.float64)


def save_dataset(data, path, n_classes=None):
    """CSV with columns f0..f{d-1},label, or binary UADD for a .uadd suffix."""
    x, y = data.features, data.labels
    n, d = x.shape
    if Path(path).suffix.lower() == ".uadd":
        k = int(n_classes or data.n_classes)
        head = DATASET_MAGIC + struct.pack("<III", n, d, k)
        _write(path, head + _f64(x) + np.ascontiguousarray(y, dtype="<u4").tobytes())
        return
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{j}" for j in range(d)] + ["label"])
            for row, lab in zip(x, y):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])
    except OSError as exc:
        raise UADIOError(f"cannot write {path}: {exc}") from exc


def load_dataset(path):
    if Path(path).suffix.lower() == ".uadd":
        raw = _read(path)
        if raw[:4] != DATASET_MAGIC:
            raise InvalidInput(f"{path}: not a UADD dataset")
        n, d, _k = struct.unpack_from("<III", raw, 4)
        if len(raw) != 16 + 8 * n * d + 4 * n:
            raise InvalidInput(f"{path}: size does not match header")
        x = np.frombuffer(raw, "<f8", n * d, 16).reshape(n, d).astype(np.float64)
        y = np.frombuffer(raw, "<u4", n, 16 + 8 * n * d).astype(np.int64)
        return LabeledDataset(x, y)
    try:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except (OSError, StopIteration) as exc:
        raise UADIOError(f"cannot read {path}: {exc}") from exc
    if header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(len(header) - 1)]:
        raise InvalidInput(f"{path}: expected columns f0..f{{d-1}},label")
    return LabeledDataset(table[:, :-1], table[:, -1].astype(np.int64))
