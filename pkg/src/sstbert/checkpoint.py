"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MBRT"                 magic
    u16                     format version
    u32 + bytes             config block: UTF-8 "key=value" lines, sorted keys
    u32                     number of index entries
    per entry: u16 name length, name bytes, u8 ndim, u32 * ndim shape, u64 byte offset
    float32 data            concatenated parameter arrays; offsets are relative to the data start

The config block holds the encoder config plus head/metadata keys prefixed
with ``meta.``. Loading re-derives the expected parameter count from that
config and refuses files that disagree.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, Model, count_parameters, parse_kv
from .tensor import Parameter

MAGIC = b"MBRT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path: str | Path, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.update(num_classes=model.num_classes, mlm=int(model.mlm), nsp=int(model.nsp),
                head_dropout=repr(float(model.head_dropout)), seed=model.seed)
    text = model.config.to_text() + "".join(f"meta.{k}={v}\n" for k, v in sorted(meta.items()))
    block = text.encode("utf-8")
    index = bytearray()
    chunks = []
    offset = 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        raw_name = name.encode("utf-8")
        index += struct.pack("<H", len(raw_name)) + raw_name
        index += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        index += struct.pack("<Q", offset)
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        fh.write(struct.pack("<I", len(model.params)))
        fh.write(bytes(index))
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_meta(path: str | Path) -> tuple[EncoderConfig, dict[str, str]]:
    with open(path, "rb") as fh:
        head = fh.read(10)
        _check_header(head, path)
        (n,) = struct.unpack_from("<I", head, 6)
        text = fh.read(n).decode("utf-8")
    return _split_config(text)


def _check_header(buf: bytes, path) -> None:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an MBRT checkpoint")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")


def _split_config(text: str):
    kv = parse_kv(text)
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    cfg = EncoderConfig.from_dict({k: v for k, v in kv.items() if not k.startswith("meta.")})
    return cfg, meta


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[Model, dict[str, str]]:
    buf = Path(path).read_bytes()
    _check_header(buf, path)
    pos = 6
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    cfg, meta = _split_config(buf[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        entries.append((name, shape, off))
    params = {}
    for name, shape, off in entries:
        size = int(np.prod(shape)) if shape else 1
        start = pos + off
        if start + 4 * size > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=start).reshape(shape).astype(dtype)
        params[name] = Parameter(name, arr)
    num_classes = int(meta.get("num_classes", 0))
    mlm, nsp = meta.get("mlm") == "1", meta.get("nsp") == "1"
    expected = count_parameters(cfg, num_classes, mlm, nsp)
    found = sum(p.size for p in params.values())
    if found != expected:
        raise CheckpointError(f"{path}: holds {found} parameters but its config implies {expected}")
    head_dropout = float(meta["head_dropout"]) if "head_dropout" in meta else None
    model = Model(cfg, params, int(meta.get("seed", 0)), num_classes, mlm, nsp, head_dropout)
    return model, meta
