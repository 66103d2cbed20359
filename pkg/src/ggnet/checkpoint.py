"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GGNT" | u32 version | u32 record count
    record: u32 name length | name (utf-8) | u8 dtype tag | u32 rank | rank × u64 extents | raw values

Record names are namespaced: ``param/``, ``buffer/``, ``momentum/`` and
``meta/`` (epoch, step, and the model config as JSON bytes).
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from pathlib import Path

import numpy as np

from .backbone import EncoderConfig
from .errors import FormatError
from .network import GGNetParams, ModelConfig
from .params import ParamTable

MAGIC = b"GGNT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
TAGS = {v: k for k, v in DTYPES.items()}


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
    if dt not in TAGS:
        raise FormatError(f"cannot store dtype {arr.dtype} for {name!r}")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BI", TAGS[dt], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(dt, copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FormatError("truncated checkpoint")
    return b


def _read_record(fh) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    tag, rank = struct.unpack("<BI", _read_exact(fh, 5))
    if tag not in DTYPES:
        raise FormatError(f"unknown dtype tag {tag} for {name!r}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dt = DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt).reshape(shape)
    return name, arr.astype(dt.newbyteorder("="))


def config_to_json(cfg: ModelConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True)


def config_from_json(text: str) -> ModelConfig:
    d = json.loads(text)
    d["encoder"] = EncoderConfig(**d["encoder"])
    return ModelConfig(**d)


def to_bytes(params: GGNetParams) -> bytes:
    records: list[tuple[str, np.ndarray]] = []
    records += [(f"param/{k}", t.data) for k, t in params.table.items()]
    records += [(f"buffer/{k}", v) for k, v in params.table.buffers.items()]
    records += [(f"momentum/{k}", v) for k, v in params.momentum.items()]
    records.append(("meta/epoch", np.array([params.epoch], dtype=np.int64)))
    records.append(("meta/step", np.array([params.step], dtype=np.int64)))
    records.append(("meta/config", np.frombuffer(config_to_json(params.cfg).encode("utf-8"), dtype=np.uint8)))
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(records)))
    for name, arr in records:
        _write_record(fh, name, arr)
    return fh.getvalue()


def from_bytes(blob: bytes) -> GGNetParams:
    fh = io.BytesIO(blob)
    if fh.read(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    records = dict(_read_record(fh) for _ in range(count))
    if fh.read(1):
        raise FormatError("trailing bytes after last record")
    try:
        cfg = config_from_json(records.pop("meta/config").tobytes().decode("utf-8"))
        epoch = int(records.pop("meta/epoch")[0])
        step = int(records.pop("meta/step")[0])
    except KeyError as e:
        raise FormatError(f"checkpoint lacks {e.args[0]}") from None
    params_ = {k[6:]: v for k, v in records.items() if k.startswith("param/")}
    if not params_:
        raise FormatError("checkpoint holds no parameters")
    dtype = next(iter(params_.values())).dtype
    table = ParamTable(dtype)
    for k, v in params_.items():
        table.add(k, v)
    for k, v in records.items():
        if k.startswith("buffer/"):
            table.add_buffer(k[7:], v)
    out = GGNetParams(cfg, table)
    for k, v in records.items():
        if k.startswith("momentum/"):
            out.momentum[k[9:]] = v.copy()
    out.epoch, out.step = epoch, step
    return out


def save(params: GGNetParams, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load(path: str | Path) -> GGNetParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return from_bytes(path.read_bytes())
