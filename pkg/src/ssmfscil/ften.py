"""FTEN tensor files and checkpoint archives.

A .ften file is a single dense tensor:

    bytes 0-3   magic "FTEN"
    byte 4      version, currently 1
    byte 5      dtype code: 1 = float32, 2 = float64
    byte 6      rank r
    byte 7      reserved, 0
    8..8+8r     r little-endian uint64 extents
    rest        row-major payload, little-endian

A checkpoint is a zip archive of "params/<name>.ften" entries plus a
"manifest.json" listing every parameter's name, shape and frozen flag.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile

import numpy as np

MAGIC = b"FTEN"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class FtenFormatError(ValueError):
    """Malformed FTEN payload."""


def dump_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = arr.copy(order="C")  # keeps rank-0 arrays rank-0
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise FtenFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FtenFormatError("rank exceeds format limit")
    head = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    return head + extents + payload


def load_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise FtenFormatError("truncated header")
    if blob[:4] != MAGIC:
        raise FtenFormatError("bad magic")
    version, code, rank, reserved = struct.unpack("<BBBB", blob[4:8])
    if version != VERSION:
        raise FtenFormatError(f"unsupported version {version}")
    if reserved != 0:
        raise FtenFormatError("reserved byte must be zero")
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise FtenFormatError(f"unsupported dtype code {code}")
    need = 8 + 8 * rank
    if len(blob) < need:
        raise FtenFormatError("truncated extents")
    shape = struct.unpack(f"<{rank}Q", blob[8:need]) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = need + count * dtype.itemsize
    if len(blob) != expected:
        raise FtenFormatError(
            f"truncated payload: expected {expected} bytes, got {len(blob)}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=need)
    return arr.reshape(shape).copy(order="C")


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_bytes(fh.read())


def save_checkpoint(path, named_arrays, frozen_names) -> None:
    """Write a checkpoint archive.

    named_arrays: iterable of (name, ndarray); frozen_names: set of names
    whose parameters are excluded from optimization.
    """
    named = sorted(named_arrays, key=lambda kv: kv[0])
    frozen = set(frozen_names)
    manifest = {
        "format": "ften-archive",
        "version": VERSION,
        "params": [
            {"name": name, "shape": list(arr.shape), "frozen": name in frozen}
            for name, arr in named
        ],
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, arr in named:
            zf.writestr(f"params/{name}.ften", dump_bytes(np.asarray(arr)))


def load_checkpoint(path):
    """Read a checkpoint archive: returns (dict name -> ndarray, manifest)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        params = {}
        for entry in manifest["params"]:
            name = entry["name"]
            arr = load_bytes(zf.read(f"params/{name}.ften"))
            if list(arr.shape) != entry["shape"]:
                raise FtenFormatError(f"shape mismatch for '{name}'")
            params[name] = arr
    return params, manifest
