"""Binary checkpoint format.

Layout: magic b"TEQF", u32 little-endian version (1), u64 little-endian
header byte length, UTF-8 JSON header, payload. The header lists tensors
as {name, dtype (f32|i32), shape, offset}; offsets are payload-relative,
4-byte aligned, and payload values are little-endian. Model config and
per-tensor quantization metadata (n_bits, group_size, scales tensor
name) also live in the header. Serialization is canonical (sorted keys,
fixed separators) so identical state produces identical bytes.

The same container stores full-precision models, quantized models
(integer codes + scale tensors) and standalone scale sets.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelGraph, _layer_records
from .quant import QuantizedTensor, QuantSpec

MAGIC = b"TEQF"
VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.int32:
        return "i32"
    raise FormatError(f"unsupported dtype {arr.dtype}")


def _align4(n: int) -> int:
    return (n + 3) & ~3


def _write(path, kind: str, tensors: dict, meta: dict) -> None:
    entries = []
    offset = 0
    names = sorted(tensors)
    for name in names:
        arr = tensors[name]
        entries.append(
            {
                "name": name,
                "dtype": _dtype_tag(arr),
                "shape": list(arr.shape),
                "offset": offset,
            }
        )
        offset = _align4(offset + arr.nbytes)
    header = dict(meta)
    header["kind"] = kind
    header["tensors"] = entries
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    payload = bytearray(offset if names else 0)
    for entry, name in zip(entries, names):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.astype(_DTYPES[entry["dtype"]], copy=False).tobytes()
        payload[entry["offset"] : entry["offset"] + len(raw)] = raw

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def _read(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: format version {version}, expected {VERSION}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + hlen > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    payload = raw[16 + hlen :]

    expected = 0
    for entry in header.get("tensors", []):
        size = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        expected = max(expected, entry["offset"] + size)
    if len(payload) < expected:
        raise FormatError(
            f"{path}: truncated payload: expected {expected} bytes, got {len(payload)}"
        )

    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise FormatError(f"{path}: unknown dtype {entry['dtype']!r}")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
    return header, tensors


def save_checkpoint(model: ModelGraph, path) -> None:
    """Write a model (float or quantized) losslessly."""
    tensors: dict[str, np.ndarray] = {}
    quant_meta: dict[str, dict] = {}
    for name, arr in model.params.items():
        if name in model.quantized:
            qt = model.quantized[name]
            tensors[name] = qt.q.astype(np.int32)
            tensors[name + ".scales"] = qt.scales.astype(np.float32)
            quant_meta[name] = {
                "n_bits": qt.spec.n_bits,
                "group_size": qt.spec.group_size,
                "axis": qt.spec.axis,
                "scales": name + ".scales",
            }
        else:
            tensors[name] = arr
    meta = {"config": model.config.to_dict()}
    if quant_meta:
        meta["quant"] = quant_meta
    _write(path, "model", tensors, meta)


def load_checkpoint(path) -> ModelGraph:
    """Read a model checkpoint; quantized tensors are dequantized into params."""
    header, tensors = _read(path)
    if header.get("kind") != "model":
        raise FormatError(f"{path}: expected a model checkpoint, got {header.get('kind')!r}")
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad model config: {exc}") from exc

    quant_meta = header.get("quant", {})
    params: dict[str, np.ndarray] = {}
    quantized: dict[str, QuantizedTensor] = {}
    scale_names = {m["scales"] for m in quant_meta.values()}
    from .quant import dequantize

    for name, arr in tensors.items():
        if name in scale_names:
            continue
        if name in quant_meta:
            m = quant_meta[name]
            spec = QuantSpec(n_bits=m["n_bits"], group_size=m["group_size"], axis=m["axis"])
            qt = QuantizedTensor(q=arr, scales=tensors[m["scales"]], spec=spec)
            quantized[name] = qt
            params[name] = dequantize(qt)
        else:
            params[name] = arr

    model = ModelGraph(config, params, _layer_records(config))
    model.quantized = quantized
    return model


def save_scales(scales: dict, path) -> None:
    """Write a scale set (site_id -> float32 vector)."""
    _write(path, "scales", {k: np.asarray(v, dtype=np.float32) for k, v in scales.items()}, {})


def load_scales(path) -> dict:
    header, tensors = _read(path)
    if header.get("kind") != "scales":
        raise FormatError(f"{path}: expected a scales file, got {header.get('kind')!r}")
    return tensors
