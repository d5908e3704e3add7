"""Artifacts: binary model-bank snapshots, run logs and report tables.

Bank layout (all integers and reals little-endian)::

    magic   8 bytes  b"MODIADBK"
    version u16
    count   u32      number of classes
    per class:
        class_id u32, model version i64, activation u8
        two mappers (2D->3D, then 3D->2D), each:
            depth u32, depth+1 dims u32, then every weight (row-major f64), then every bias
        adapter flag u8; when 1, for each mapper and layer:
            present u8; when 1: rank u32, H (d_out x r), J (r x d_in)
          then bias flag u8; when 1 every bias delta
    crc32   u32      over everything before it
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import CorruptionError
from .lora import ClassAdapter, LoraAdapter
from .nn import ACTIVATIONS, ClassModel, MapperNet

BANK_MAGIC = b"MODIADBK"
BANK_VERSION = 1


def atomic_write(path, data) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else bytes(data)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- bank snapshots ------------------------------------------------------------


def _pack_array(out: list, a) -> None:
    out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _pack_net(out: list, net: MapperNet) -> None:
    dims = [net.input_dim] + [w.shape[0] for w in net.weights]
    out.append(struct.pack("<I", net.depth))
    out.append(struct.pack(f"<{len(dims)}I", *dims))
    for w in net.weights:
        _pack_array(out, w)
    for b in net.biases:
        _pack_array(out, b)


def _pack_adapter(out: list, adapter: LoraAdapter) -> None:
    for h, j in zip(adapter.h, adapter.j):
        if h is None:
            out.append(b"\x00")
            continue
        out.append(b"\x01" + struct.pack("<I", h.shape[1]))
        _pack_array(out, h)
        _pack_array(out, j)
    if adapter.bias_delta is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        for b in adapter.bias_delta:
            _pack_array(out, b)


def serialize_bank(bank) -> bytes:
    out = [BANK_MAGIC, struct.pack("<HI", BANK_VERSION, len(bank.models))]
    for c in sorted(bank.models):
        model: ClassModel = bank.models[c]
        act = ACTIVATIONS.index(model.map_2d_to_3d.activation)
        out.append(struct.pack("<IqB", model.class_id, model.version, act))
        _pack_net(out, model.map_2d_to_3d)
        _pack_net(out, model.map_3d_to_2d)
        adapter = bank.adapters.get(c)
        if adapter is None:
            out.append(b"\x00")
        else:
            out.append(b"\x01")
            _pack_adapter(out, adapter.fwd)
            _pack_adapter(out, adapter.bwd)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptionError(f"stream truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def flag(self) -> bool:
        (v,) = self.unpack("<B")
        if v not in (0, 1):
            raise CorruptionError(f"bad flag byte {v} at {self.pos - 1}")
        return bool(v)

    def array(self, *shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def _read_net(r: _Reader, activation: str) -> MapperNet:
    (depth,) = r.unpack("<I")
    if depth < 1 or depth > 64:
        raise CorruptionError(f"implausible mapper depth {depth}")
    dims = r.unpack(f"<{depth + 1}I")
    if min(dims) < 1:
        raise CorruptionError("zero layer dimension")
    weights = tuple(r.array(dims[l + 1], dims[l]) for l in range(depth))
    biases = tuple(r.array(dims[l + 1]) for l in range(depth))
    return MapperNet(weights, biases, activation)


def _read_adapter(r: _Reader, net: MapperNet) -> LoraAdapter:
    h, j = [], []
    for w in net.weights:
        if not r.flag():
            h.append(None)
            j.append(None)
            continue
        (rank,) = r.unpack("<I")
        if rank < 1 or rank > min(w.shape):
            raise CorruptionError(f"adapter rank {rank} does not fit a {w.shape} layer")
        h.append(r.array(w.shape[0], rank))
        j.append(r.array(rank, w.shape[1]))
    bias = tuple(r.array(b.shape[0]) for b in net.biases) if r.flag() else None
    return LoraAdapter(tuple(h), tuple(j), bias)


def deserialize_bank(data: bytes):
    """Inverse of ``serialize_bank``; any inconsistency raises CorruptionError."""
    from .protocol import ModelBank

    data = bytes(data)
    if len(data) < len(BANK_MAGIC) + 10:
        raise CorruptionError("stream too short for a bank header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if not body.startswith(BANK_MAGIC):
        raise CorruptionError("bad magic bytes")
    if zlib.crc32(body) != crc:
        raise CorruptionError("checksum mismatch (truncated or corrupted stream)")
    r = _Reader(body)
    r.take(len(BANK_MAGIC))
    version, count = r.unpack("<HI")
    if version != BANK_VERSION:
        raise CorruptionError(f"unsupported bank format version {version}")
    models, adapters = {}, {}
    try:
        for _ in range(count):
            class_id, model_version, act = r.unpack("<IqB")
            if act >= len(ACTIVATIONS):
                raise CorruptionError(f"unknown activation code {act}")
            fwd = _read_net(r, ACTIVATIONS[act])
            bwd = _read_net(r, ACTIVATIONS[act])
            if class_id in models:
                raise CorruptionError(f"class {class_id} appears twice")
            models[class_id] = ClassModel(class_id, fwd, bwd, model_version)
            if r.flag():
                adapters[class_id] = ClassAdapter(_read_adapter(r, fwd), _read_adapter(r, bwd))
    except CorruptionError:
        raise
    except ValueError as exc:
        raise CorruptionError(f"inconsistent bank contents: {exc}") from exc
    if r.pos != len(body):
        raise CorruptionError(f"{len(body) - r.pos} trailing bytes after the last class")
    return ModelBank(models, adapters)


# --- run logs and reports --------------------------------------------------------


def _num(x) -> str:
    return repr(float(x))


def jsonl_text(records) -> str:
    return "".join(json.dumps(rec.to_record(), sort_keys=True) + "\n" for rec in records)


def round_csv_text(records, n_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "policy"] + [f"q_{c}" for c in range(n_classes)]
               + ["mean_q", "selected", "modes", "uplink", "downlink", "train_param_steps",
                  "cum_uplink", "cum_downlink", "cum_train_param_steps"])
    for rec in records:
        w.writerow([rec.round, rec.policy] + [_num(q) for q in rec.q] + [
            _num(rec.mean_q),
            " ".join(f"{k}:{c}" for k, c in rec.selected),
            " ".join(rec.modes),
            rec.cost.uplink, rec.cost.downlink, rec.cost.train_param_steps,
            rec.cumulative.uplink, rec.cumulative.downlink, rec.cumulative.train_param_steps,
        ])
    return buf.getvalue()


def report_csv_text(report: dict) -> str:
    """Per-class metric table followed by a ``mean`` row."""
    keys = list(report["mean"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class"] + keys)
    for c, row in sorted(report["classes"].items()):
        w.writerow([c] + [_num(row[k]) for k in keys])
    w.writerow(["mean"] + [_num(report["mean"][k]) for k in keys])
    return buf.getvalue()
