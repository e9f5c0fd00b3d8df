"""LBNZ v1 binary container for models and probe datasets.

Layout (all integers little-endian)::

    b"LBNZ" | u32 version (=1) | u64 manifest length | manifest (UTF-8 JSON)
    | tensor payloads, concatenated in manifest order | u32 CRC32

The CRC32 (zlib polynomial) covers every byte before it. Each tensor entry in
the manifest records ``offset`` and ``length`` (bytes, relative to the start of
the payload section), ``shape`` and ``dtype`` (``f32``, ``f64`` or ``i32``).
``f32`` payloads are widened to float64 on load.

Model manifests have ``kind = "model"``, ``input_shape``, ``metadata`` and a
``layers`` list; each layer lists its scalar attributes and a ``tensors``
mapping whose keys are drawn from ``weight``, ``bias``, ``bn_gamma``,
``bn_beta``, ``bn_mu`` and ``bn_sigma``. Dataset manifests have
``kind = "dataset"`` and a top-level ``tensors`` mapping holding ``inputs``
(``N x c x w x h``) and ``labels`` (``N``, int32).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagic, ChecksumMismatch, ShapeMismatch, TruncatedStream, UnsupportedVersion
from .network import BatchNormParams, Layer, NetworkModel

__all__ = [
    "MAGIC",
    "VERSION",
    "atomic_write",
    "deserialize",
    "deserialize_dataset",
    "load_dataset",
    "load_model",
    "save_dataset",
    "save_model",
    "serialize",
    "serialize_dataset",
]

MAGIC = b"LBNZ"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i32": np.dtype("<i4")}
_BN_KEYS = ("gamma", "beta", "mu", "sigma")


class _PayloadWriter:
    def __init__(self, dtype: str):
        self.dtype = dtype
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, arr, dtype: str | None = None) -> dict:
        dtype = dtype or self.dtype
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entry = {"dtype": dtype, "length": len(data), "offset": self.offset, "shape": list(np.shape(arr))}
        self.chunks.append(data)
        self.offset += len(data)
        return entry


def _pack(manifest: dict, chunks: list[bytes]) -> bytes:
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _unpack(data: bytes) -> tuple[dict, memoryview]:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not an LBNZ container")
    if len(data) < _HEADER.size + 4:
        raise TruncatedStream("stream ends inside the header")
    _, version, mlen = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"LBNZ version {version} is not supported (expected {VERSION})")
    if len(data) < _HEADER.size + mlen + 4:
        raise TruncatedStream("stream ends inside the manifest")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("CRC32 does not match container contents")
    manifest = json.loads(data[_HEADER.size : _HEADER.size + mlen].decode("utf-8"))
    payload = memoryview(data)[_HEADER.size + mlen : len(data) - 4]
    return manifest, payload


def _read_tensor(payload: memoryview, entry: dict) -> np.ndarray:
    dtype = _DTYPES.get(entry["dtype"])
    if dtype is None:
        raise ShapeMismatch(f"unsupported dtype {entry['dtype']!r}")
    start, length = int(entry["offset"]), int(entry["length"])
    if start + length > len(payload):
        raise TruncatedStream("tensor payload extends past the end of the stream")
    shape = tuple(entry["shape"])
    if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != length:
        raise ShapeMismatch(f"tensor of shape {shape} cannot occupy {length} bytes")
    arr = np.frombuffer(payload[start : start + length], dtype=dtype).reshape(shape)
    if entry["dtype"] == "i32":
        return arr.astype(np.int64)
    return arr.astype(np.float64)


def serialize(model: NetworkModel, dtype: str = "f64") -> bytes:
    """Encode ``model`` as LBNZ v1 bytes. ``dtype="f32"`` stores single precision."""
    if dtype not in ("f32", "f64"):
        raise ValueError("dtype must be 'f32' or 'f64'")
    writer = _PayloadWriter(dtype)
    layers = []
    for layer in model.layers:
        tensors = {}
        if layer.weight is not None:
            tensors["weight"] = writer.add(layer.weight)
        if layer.bias is not None:
            tensors["bias"] = writer.add(layer.bias)
        if layer.bn is not None:
            for key in _BN_KEYS:
                tensors[f"bn_{key}"] = writer.add(getattr(layer.bn, key))
        layers.append(
            {
                "activation": layer.activation,
                "bn": layer.bn is not None,
                "kernel": layer.kernel,
                "kind": layer.kind,
                "padding": layer.padding,
                "shape": list(layer.weight.shape) if layer.weight is not None else [],
                "stride": layer.stride,
                "tensors": tensors,
            }
        )
    manifest = {
        "input_shape": list(model.input_shape),
        "kind": "model",
        "layers": layers,
        "metadata": dict(sorted(model.metadata.items())),
    }
    return _pack(manifest, writer.chunks)


def deserialize(data: bytes) -> NetworkModel:
    manifest, payload = _unpack(data)
    if manifest.get("kind") != "model":
        raise ShapeMismatch(f"container holds a {manifest.get('kind')!r}, not a model")
    layers = []
    for spec in manifest["layers"]:
        tensors = {name: _read_tensor(payload, entry) for name, entry in spec["tensors"].items()}
        bn = None
        if spec.get("bn"):
            bn = BatchNormParams(*(tensors[f"bn_{key}"] for key in _BN_KEYS))
        layers.append(
            Layer(
                spec["kind"],
                weight=tensors.get("weight"),
                bias=tensors.get("bias"),
                bn=bn,
                activation=spec["activation"],
                stride=int(spec["stride"]),
                padding=int(spec["padding"]),
                kernel=int(spec["kernel"]),
            )
        )
    return NetworkModel(layers, manifest["input_shape"], manifest.get("metadata", {}))


def serialize_dataset(inputs, labels) -> bytes:
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
        raise ShapeMismatch("labels must be a vector with one entry per input")
    writer = _PayloadWriter("f64")
    tensors = {"inputs": writer.add(inputs), "labels": writer.add(labels, "i32")}
    return _pack({"kind": "dataset", "tensors": tensors}, writer.chunks)


def deserialize_dataset(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    manifest, payload = _unpack(data)
    if manifest.get("kind") != "dataset":
        raise ShapeMismatch(f"container holds a {manifest.get('kind')!r}, not a dataset")
    tensors = manifest["tensors"]
    return _read_tensor(payload, tensors["inputs"]), _read_tensor(payload, tensors["labels"])


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: NetworkModel, path, dtype: str = "f64") -> None:
    atomic_write(path, serialize(model, dtype))


def load_model(path) -> NetworkModel:
    return deserialize(Path(path).read_bytes())


def save_dataset(inputs, labels, path) -> None:
    atomic_write(path, serialize_dataset(inputs, labels))


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    return deserialize_dataset(Path(path).read_bytes())
