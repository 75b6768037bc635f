"""Flat binary tensor container and the named-tensor checkpoint archive.

Single-tensor container layout (all integers little-endian):

    bytes 0..3   magic "S2CT"
    bytes 4..5   format version, u16 (currently 1)
    bytes 6..7   rank, u16
    next rank*8  shape, u64 each
    rest         payload, little-endian float64, row-major

Checkpoints are ZIP archives (stored, fixed timestamps, sorted entries, so
identical contents give identical bytes) holding ``manifest.json`` plus one
container per named tensor under ``tensors/``.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile

import numpy as np

MAGIC = b"S2CT"
VERSION = 1

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64, order="C")
    header = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.astype("<f8").tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    version, rank = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported tensor container version {version}")
    shape = struct.unpack_from(f"<{rank}Q", data, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    payload = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    if payload.size != count:
        raise ValueError("truncated tensor payload")
    return payload.astype(np.float64).reshape(shape)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_archive(path, tensors: dict[str, np.ndarray], manifest: dict) -> None:
    """Write a named-tensor archive; `manifest` is stored as JSON."""
    doc = dict(manifest)
    doc["tensors"] = {name: list(tensors[name].shape) for name in sorted(tensors)}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_entry(zf, "manifest.json",
                     json.dumps(doc, sort_keys=True, indent=1).encode())
        for name in sorted(tensors):
            _write_entry(zf, f"tensors/{name}.s2ct", tensor_to_bytes(tensors[name]))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_archive(path, expected_shapes: dict[str, tuple] | None = None):
    """Read back (tensors, manifest); optionally validate names and shapes.

    With `expected_shapes`, every expected name must be present with the
    expected shape and no extra tensors are tolerated.
    """
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors = {}
        for name in manifest["tensors"]:
            tensors[name] = tensor_from_bytes(zf.read(f"tensors/{name}.s2ct"))
    if expected_shapes is not None:
        missing = sorted(set(expected_shapes) - set(tensors))
        extra = sorted(set(tensors) - set(expected_shapes))
        if missing or extra:
            raise ValueError(
                f"archive tensor names mismatch: missing={missing} extra={extra}")
        for name, shape in expected_shapes.items():
            if tuple(tensors[name].shape) != tuple(shape):
                raise ValueError(
                    f"archive tensor {name!r} has shape {tensors[name].shape}, "
                    f"expected {tuple(shape)}")
    return tensors, manifest


__all__ = [
    "tensor_to_bytes", "tensor_from_bytes",
    "save_tensor", "load_tensor",
    "save_archive", "load_archive",
]
