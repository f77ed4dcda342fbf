"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    b"C2FW" | u32 format_version | u64 manifest_len | manifest (UTF-8 JSON) | payload

The manifest holds ``{"config": ..., "tensors": [{"name", "dtype", "shape"}, ...]}``
and the payload is the raw little-endian bytes of every tensor in manifest
order. JSON is written with sorted keys and no whitespace so save/load/save
is byte-stable.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .architecture import Model, ModelConfig, build_model
from .config import model_config_from_dict
from .errors import ConfigError, FormatError

MAGIC = b"C2FW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def encode(m: Model) -> bytes:
    records, chunks = [], []
    for name, t in m.named_parameters().items():
        tag = _DTYPE_TAGS[t.dtype]
        records.append({"name": name, "dtype": tag, "shape": list(t.shape)})
        chunks.append(np.ascontiguousarray(t.data, dtype=_DTYPES[tag]).tobytes())
    manifest = json.dumps({"config": m.config.to_dict(), "tensors": records},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)) + manifest + b"".join(chunks)


def decode(blob: bytes) -> Model:
    if len(blob) < _HEADER.size:
        raise FormatError("file too short for a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version} (expected {FORMAT_VERSION})")
    start = _HEADER.size
    if start + mlen > len(blob):
        raise FormatError("truncated manifest")
    try:
        manifest = json.loads(blob[start : start + mlen].decode("utf-8"))
        cfg = model_config_from_dict(manifest["config"])
        records = manifest["tensors"]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"invalid manifest: {exc}") from None
    try:
        dtypes = {r["dtype"] for r in records}
        if not dtypes <= set(_DTYPES):
            raise FormatError(f"unknown dtype tags {sorted(dtypes - set(_DTYPES))}")
        dtype = _DTYPES[records[0]["dtype"]] if records else np.dtype("<f4")
        model = build_model(cfg, None, dtype=dtype.newbyteorder("="))
    except (ConfigError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid manifest: {exc}") from None
    params = model.named_parameters()
    if [r.get("name") for r in records] != list(params):
        raise FormatError("manifest tensor list does not match the configured model")
    offset = start + mlen
    arrays = []
    for r in records:
        t = params[r["name"]]
        shape = tuple(r["shape"])
        if shape != t.shape:
            raise FormatError(f"tensor {r['name']}: manifest shape {shape} != model shape {t.shape}")
        dt = _DTYPES[r["dtype"]]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(f"truncated payload at tensor {r['name']}")
        arrays.append(np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape))
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after payload")
    for r, arr in zip(records, arrays):
        params[r["name"]].data = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return model


def checkpoint_save(m: Model, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    blob = encode(m)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".c2fw-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_load(path) -> Model:
    with open(path, "rb") as fh:
        return decode(fh.read())


def manifest_of(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    _, _, mlen = _HEADER.unpack_from(blob)
    return json.loads(blob[_HEADER.size : _HEADER.size + mlen])
