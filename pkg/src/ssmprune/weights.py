"""Weight container: named tensors plus a config record, in text or binary form.

Text form is a JSON object (floats written with shortest round-trip repr, so
values survive exactly). Binary layout, all integers little-endian:

    offset 0   magic  b"SSMW"
    offset 4   u16    format version (1)
    offset 6   u16    reserved, 0
    offset 8   u64    header length H in bytes
    offset 16  H      UTF-8 JSON header, space-padded so 16 + H is a multiple of 64
    then       tensor data, each tensor starting on a 64-byte boundary

The header holds ``config``, ``metadata`` and ``tensors``: a list of
``{name, dtype, shape, offset, nbytes}`` with ``offset`` counted from the
start of the data section. Data is C-order, dtype "<f4", "<f8" or "|b1".
"""

from __future__ import annotations

import json
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import LayerParams, Model, ModelConfig
from .errors import FormatError

MAGIC = b"SSMW"
VERSION = 1
ALIGN = 64
TEXT_FORMAT = "ssmprune-weights"
_PREFIX = struct.Struct("<4sHHQ")
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "|b1": np.bool_}


def _dtype_tag(arr: np.ndarray) -> str:
    tag = arr.dtype.newbyteorder("<").str if arr.dtype != np.bool_ else "|b1"
    if tag not in _DTYPES:
        raise FormatError(f"unsupported tensor dtype {arr.dtype}")
    return tag


def model_tensors(model: Model) -> dict[str, np.ndarray]:
    out = {}
    if model.embedding is not None:
        out["embedding"] = model.embedding
    if model.final_norm is not None:
        out["final_norm"] = model.final_norm
    for i, layer in enumerate(model.layers):
        for name, arr in layer.arrays().items():
            out[f"layers.{i}.{name}"] = arr
    return out


def _build(config: dict, metadata: dict, tensors: dict[str, np.ndarray]) -> Model:
    try:
        cfg = ModelConfig.from_dict(config)
    except TypeError as exc:
        raise FormatError(f"bad config record: {exc}") from exc
    layer_fields = {f.name for f in fields(LayerParams)}
    per_layer: list[dict] = [{} for _ in range(cfg.n_layers)]
    top = {}
    for name, arr in tensors.items():
        parts = name.split(".")
        if len(parts) == 3 and parts[0] == "layers":
            i = int(parts[1])
            if not 0 <= i < cfg.n_layers or parts[2] not in layer_fields:
                raise FormatError(f"unexpected tensor {name!r}")
            per_layer[i][parts[2]] = arr
        elif name in ("embedding", "final_norm"):
            top[name] = arr
        else:
            raise FormatError(f"unexpected tensor {name!r}")
    try:
        layers = tuple(LayerParams(**kw) for kw in per_layer)
    except TypeError as exc:
        raise FormatError(f"incomplete layer record: {exc}") from exc
    return Model(cfg, layers, top.get("embedding"), top.get("final_norm"), dict(metadata))


# text form


def to_text(model: Model) -> str:
    tensors = []
    for name, arr in model_tensors(model).items():
        tensors.append({
            "name": name,
            "dtype": _dtype_tag(arr),
            "shape": list(arr.shape),
            "data": arr.ravel().tolist(),
        })
    doc = {
        "format": TEXT_FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "metadata": model.metadata,
        "tensors": tensors,
    }
    return json.dumps(doc, indent=1) + "\n"


def from_text(text: str) -> Model:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"weights file is not valid JSON: {exc}") from exc
    if doc.get("format") != TEXT_FORMAT:
        raise FormatError("not a weights file")
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported weights version {doc.get('version')}")
    tensors = {}
    for t in doc["tensors"]:
        dtype = _DTYPES.get(t["dtype"])
        if dtype is None:
            raise FormatError(f"unsupported tensor dtype {t['dtype']}")
        arr = np.array(t["data"], dtype=dtype)
        if arr.size != int(np.prod(t["shape"], dtype=np.int64)):
            raise FormatError(f"tensor {t['name']!r}: data does not match shape")
        tensors[t["name"]] = arr.reshape(t["shape"])
    return _build(doc["config"], doc.get("metadata", {}), tensors)


# binary form


def _pad(n: int) -> int:
    return -n % ALIGN


def to_bytes(model: Model) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in model_tensors(model).items():
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr, dtype=np.dtype(tag)).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data + b"\0" * _pad(len(data)))
        offset += len(data) + _pad(len(data))
    header = json.dumps({
        "config": model.config.to_dict(),
        "metadata": model.metadata,
        "tensors": entries,
    }, separators=(",", ":")).encode()
    header += b" " * _pad(_PREFIX.size + len(header))
    return _PREFIX.pack(MAGIC, VERSION, 0, len(header)) + header + b"".join(blobs)


def from_bytes(buf: bytes) -> Model:
    if len(buf) < _PREFIX.size:
        raise FormatError("weights file truncated")
    magic, version, _, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError("bad magic: not a binary weights file")
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version}")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise FormatError("weights header truncated")
    try:
        header = json.loads(buf[_PREFIX.size:start])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad weights header: {exc}") from exc
    tensors = {}
    for t in header["tensors"]:
        dtype = _DTYPES.get(t["dtype"])
        if dtype is None:
            raise FormatError(f"unsupported tensor dtype {t['dtype']}")
        lo = start + t["offset"]
        hi = lo + t["nbytes"]
        if hi > len(buf):
            raise FormatError(f"tensor {t['name']!r} runs past end of file")
        arr = np.frombuffer(buf, dtype=np.dtype(t["dtype"]), count=t["nbytes"] // np.dtype(t["dtype"]).itemsize,
                            offset=lo)
        tensors[t["name"]] = arr.astype(dtype).reshape(t["shape"])
    return _build(header["config"], header.get("metadata", {}), tensors)


def save_model(model: Model, path, fmt: str | None = None) -> Path:
    """Write ``model``; ``fmt`` is "text" or "binary" (default: by suffix, .json is text)."""
    path = Path(path)
    fmt = fmt or ("text" if path.suffix == ".json" else "binary")
    if fmt == "text":
        path.write_text(to_text(model))
    elif fmt == "binary":
        path.write_bytes(to_bytes(model))
    else:
        raise FormatError(f"unknown weights format {fmt!r}")
    return path


def load_model(path) -> Model:
    buf = Path(path).read_bytes()
    if buf[:4] == MAGIC:
        return from_bytes(buf)
    return from_text(buf.decode("utf-8"))


def models_equal(a: Model, b: Model, *, metadata: bool = True) -> bool:
    """Same config, same tensor names, bit-identical tensor data (and metadata)."""
    if a.config != b.config or (metadata and a.metadata != b.metadata):
        return False
    ta, tb = model_tensors(a), model_tensors(b)
    if ta.keys() != tb.keys():
        return False
    return all(
        ta[k].dtype == tb[k].dtype and ta[k].shape == tb[k].shape and ta[k].tobytes() == tb[k].tobytes()
        for k in ta
    )
