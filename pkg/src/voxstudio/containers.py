"""On-disk containers: the CFVX voxel grid format and checkpoint archives.

CFVX is a 16-byte header (magic "CFVX", version, resolution, channels)
followed by row-major little-endian values. Version 1 stores float32,
version 2 stores float16 (the half-precision cache policy). Occupancy grids
and masks are single-channel; feature volumes use channels > 1.

Checkpoints are a single zip archive holding a manifest, one raw blob of
little-endian float32 per named parameter, the schedule constants, and a
config snapshot.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

CFVX_MAGIC = b"CFVX"
_HEADER = struct.Struct("<4sIII")  # magic, version, resolution, channels

_VERSION_DTYPES = {1: np.float32, 2: np.float16}


def write_volume(path, values: np.ndarray, half_precision: bool = False) -> None:
    """Write a (v,v,v) or (C,v,v,v) array as a CFVX file."""
    arr = np.asarray(values)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != arr.shape[2] or arr.shape[2] != arr.shape[3]:
        raise InvalidInputError(f"expected (C, v, v, v) values, got {arr.shape}")
    channels, v = arr.shape[0], arr.shape[1]
    version = 2 if half_precision else 1
    dtype = _VERSION_DTYPES[version]
    payload = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CFVX_MAGIC, version, v, channels))
        fh.write(payload.tobytes())


def read_volume(path) -> np.ndarray:
    """Read a CFVX file; returns float32 (C, v, v, v)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated CFVX header")
    magic, version, v, channels = _HEADER.unpack_from(raw)
    if magic != CFVX_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    if version not in _VERSION_DTYPES:
        raise InvalidInputError(f"{path}: unsupported CFVX version {version}")
    dtype = np.dtype(_VERSION_DTYPES[version]).newbyteorder("<")
    expect = channels * v * v * v * dtype.itemsize
    body = raw[_HEADER.size :]
    if len(body) != expect:
        raise InvalidInputError(f"{path}: payload is {len(body)} bytes, expected {expect}")
    arr = np.frombuffer(body, dtype=dtype).reshape(channels, v, v, v)
    return arr.astype(np.float32)


# ---------------------------------------------------------------------------
# Checkpoint archive


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, schedule: dict, config: dict, extra: dict | None = None) -> None:
    """params: name -> float32 ndarray; schedule/config: JSON-serializable."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {"shape": list(arr.shape), "blob": f"blobs/{i:05d}.f32"}
            for i, (name, arr) in enumerate(params.items())
        },
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        zf.writestr("schedule.json", json.dumps(schedule))
        zf.writestr("config.json", json.dumps(config, indent=2))
        for name, arr in params.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            zf.writestr(manifest["params"][name]["blob"], blob)


def load_checkpoint(path):
    """Returns (params dict, schedule dict, config dict, extra dict)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {manifest.get('version')}")
        schedule = json.loads(zf.read("schedule.json"))
        config = json.loads(zf.read("config.json"))
        params = {}
        for name, meta in manifest["params"].items():
            blob = zf.read(meta["blob"])
            params[name] = np.frombuffer(blob, dtype="<f4").reshape(meta["shape"]).copy()
    return params, schedule, config, manifest.get("extra", {})


def sha256_file(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
