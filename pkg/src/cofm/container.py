"""Binary container used for checkpoints and benchmark instances.

Layout::

    b"COFM"                      4 bytes magic
    version                      u32 little-endian
    header_len                   u64 little-endian
    header                       UTF-8 JSON, header_len bytes
    arrays                       raw little-endian float64, in index order

The header carries free-form metadata under ``"meta"`` and the array index
under ``"arrays"`` as a list of ``{"name", "shape", "offset"}`` (offset in
bytes from the start of the array block).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"COFM"
VERSION = 1


class ContainerError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "offset": offset, "shape": list(a.shape)})
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = _dumps({"arrays": index, "meta": meta})
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise ContainerError("not a COFM container (bad magic)")
    if len(data) < 16:
        raise ContainerError("container is truncated")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from None
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = base + entry["offset"]
        buf = data[start : start + 8 * count]
        if len(buf) != 8 * count:
            raise ContainerError(f"array {entry['name']!r} is truncated")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return header["meta"], arrays


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(meta, arrays))
    tmp.replace(path)
    return path


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
