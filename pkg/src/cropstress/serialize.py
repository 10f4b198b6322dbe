"""Single-file model serialization.

Layout: an 8-byte little-endian unsigned length, the JSON header of exactly
that many bytes, then the raw tensor payload. The header records the format
version, the architecture config, and an ordered tensor directory of
``{name, dtype, shape, offset, length}`` entries; offsets are byte positions
relative to the start of the payload section. Tensor bytes are little-endian
IEEE-754 floats in store order, so save -> load -> save round-trips to the
identical byte string.
"""

import json
import struct

import numpy as np

from .errors import FormatError
from .model import ArchitectureConfig, Model, build_model

FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}
_CODE_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_CODE_NATIVE = {"f4": np.float32, "f8": np.float64}


def save_model(model: Model, path) -> None:
    directory = []
    chunks = []
    offset = 0
    for name, t, _trainable in model.store.items():
        code = _DTYPE_CODES.get(t.data.dtype)
        if code is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype {t.data.dtype}")
        raw = np.ascontiguousarray(t.data, dtype=_CODE_DTYPES[code]).tobytes()
        directory.append({
            "name": name,
            "dtype": code,
            "shape": [int(d) for d in t.shape],
            "offset": offset,
            "length": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in chunks:
            fh.write(raw)


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short to hold a header length")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')!r}")

    directory = header.get("tensors")
    if not isinstance(directory, list) or not directory:
        raise FormatError(f"{path}: missing tensor directory")
    model_dtype = _CODE_NATIVE.get(directory[0].get("dtype"))
    if model_dtype is None:
        raise FormatError(f"{path}: unknown tensor dtype {directory[0].get('dtype')!r}")

    config = ArchitectureConfig.from_dict(header.get("config", {}))
    model = build_model(config, seed=0, dtype=model_dtype)

    payload = blob[8 + header_len:]
    names_seen = set()
    for entry in directory:
        name = entry["name"]
        if name not in model.store:
            raise FormatError(f"{path}: tensor {name!r} not part of this architecture")
        names_seen.add(name)
        dt = _CODE_DTYPES.get(entry["dtype"])
        if dt is None:
            raise FormatError(f"{path}: unknown tensor dtype {entry['dtype']!r}")
        start, length = int(entry["offset"]), int(entry["length"])
        if start < 0 or start + length > len(payload):
            raise FormatError(f"{path}: tensor {name!r} points outside the payload")
        arr = np.frombuffer(payload[start:start + length], dtype=dt).reshape(entry["shape"])
        target = model.store[name]
        if tuple(arr.shape) != tuple(target.shape):
            raise FormatError(
                f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, architecture expects {tuple(target.shape)}"
            )
        target.data = arr.astype(_CODE_NATIVE[entry["dtype"]], copy=True)
    missing = set(model.store.names()) - names_seen
    if missing:
        raise FormatError(f"{path}: tensors missing from file: {sorted(missing)}")
    return model
