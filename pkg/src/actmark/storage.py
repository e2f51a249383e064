"""Bit-exact container files for models, secrets, centers and key sets.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"ACTMARK\\x00"
    8       4     u32 format version
    12      8     u64 manifest length L
    20      32    SHA-256 of the manifest bytes
    52      L     manifest: UTF-8 JSON, sorted keys
    52+L    ...   payload: raw array sections back to back

The manifest records the object kind, free-form metadata, and for every array
its name, dtype, shape, byte offset into the payload and SHA-256; it also
carries the SHA-256 of the whole payload. Arrays are stored row-major in
little-endian byte order. Files are written to a temporary sibling and
renamed into place, so readers never observe a partial file.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .blackbox import BlackboxKeySet
from .errors import CorruptionError, FormatError, UnsupportedVersionError
from .nn import MLP
from .whitebox import WhiteboxSecret

MAGIC = b"ACTMARK\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")
_DTYPES = {"f4": "<f4", "i8": "<i8", "u1": "|u1"}


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dtype_code(arr: np.ndarray) -> str:
    for code, spec in _DTYPES.items():
        if arr.dtype == np.dtype(spec):
            return code
    raise FormatError(f"unsupported array dtype {arr.dtype}")


def encode(kind: str, arrays: dict, meta: dict) -> bytes:
    sections, entries, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": _dtype_code(arr), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw), "sha256": _sha(raw)})
        sections.append(raw)
        offset += len(raw)
    payload = b"".join(sections)
    manifest = {"kind": kind, "version": VERSION, "meta": meta, "arrays": entries,
                "payload_sha256": _sha(payload)}
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, VERSION, len(text), hashlib.sha256(text).digest()) + text + payload


def decode(blob: bytes, kind: str | None = None):
    """Parse a container; returns ``(kind, arrays, meta)``."""
    if len(blob) < _HEADER.size:
        raise FormatError("file is shorter than the container header", offset=len(blob))
    magic, version, length, digest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("not an actmark container (bad magic)", offset=0)
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version}, this build reads {VERSION}",
                                      offset=8)
    start = _HEADER.size
    if start + length > len(blob):
        raise CorruptionError("manifest runs past the end of the file", offset=len(blob))
    text = blob[start:start + length]
    if hashlib.sha256(text).digest() != digest:
        raise CorruptionError("manifest checksum mismatch", offset=start)
    manifest = json.loads(text)
    if kind is not None and manifest["kind"] != kind:
        raise FormatError(f"expected a {kind} file, found {manifest['kind']}", offset=start)
    payload = blob[start + length:]
    if _sha(payload) != manifest["payload_sha256"]:
        bad = next((e for e in manifest["arrays"]
                    if _sha(payload[e["offset"]:e["offset"] + e["nbytes"]]) != e["sha256"]), None)
        where = start + length + (bad["offset"] if bad else 0)
        name = f" in array {bad['name']!r}" if bad else ""
        raise CorruptionError(f"payload checksum mismatch{name}", offset=where)
    arrays = {}
    for e in manifest["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return manifest["kind"], arrays, manifest["meta"]


def write_atomic(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read(path, kind):
    return decode(Path(path).read_bytes(), kind)


def save_model(model: MLP, path, meta: dict | None = None) -> Path:
    arrays = {f"w{i}": w.astype(np.float32) for i, w in enumerate(model.weights)}
    arrays.update({f"b{i}": b.astype(np.float32) for i, b in enumerate(model.biases)})
    info = {"layer_dims": model.layer_dims, **(meta or {})}
    return write_atomic(path, encode("model", arrays, info))


def load_model(path) -> MLP:
    _, arrays, meta = _read(path, "model")
    n = len(meta["layer_dims"]) - 1
    return MLP([arrays[f"w{i}"] for i in range(n)], [arrays[f"b{i}"] for i in range(n)])


def save_secret(secret: WhiteboxSecret, path) -> Path:
    arrays = {"carriers": secret.carriers.astype(np.int64),
              "projection": np.asarray(secret.projection, dtype=np.float32),
              "bits": secret.bits.astype(np.uint8)}
    meta = {"layer": secret.layer, "lambda1": secret.lambda1, "lambda2": secret.lambda2,
            "n_classes": secret.n_classes, "seed": secret.seed, "threshold": secret.threshold}
    return write_atomic(path, encode("secret", arrays, meta))


def load_secret(path) -> WhiteboxSecret:
    _, a, m = _read(path, "secret")
    return WhiteboxSecret(m["layer"], a["carriers"], a["projection"], a["bits"], m["lambda1"],
                          m["lambda2"], m["n_classes"], m["seed"], m["threshold"])


def save_centers(centers, path, layer: int = -1) -> Path:
    return write_atomic(path, encode("centers", {"centers": np.asarray(centers, dtype=np.float32)},
                                     {"layer": layer}))


def load_centers(path) -> np.ndarray:
    return _read(path, "centers")[1]["centers"]


def save_keyset(keyset: BlackboxKeySet, path) -> Path:
    arrays = {"inputs": keyset.inputs.astype(np.float32), "labels": keyset.labels.astype(np.int64)}
    meta = {"n_classes": keyset.n_classes, "n_candidates": keyset.n_candidates,
            "seed": keyset.seed, "info": keyset.meta}
    return write_atomic(path, encode("keyset", arrays, meta))


def load_keyset(path) -> BlackboxKeySet:
    _, a, m = _read(path, "keyset")
    return BlackboxKeySet(a["inputs"], a["labels"], m["n_classes"], m["n_candidates"], m["seed"],
                          m["info"])
