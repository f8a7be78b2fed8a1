"""Binary checkpoint layout shared by the denoiser and MIL models.

magic (4 bytes) | u32 LE version | u32 LE header length | JSON header |
float32 LE tensors in the order listed under the header's "tensors" key.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError


def pack(magic: bytes, version: int, header: dict, tensors: list[np.ndarray]) -> bytes:
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in tensors)
    return magic + struct.pack("<II", version, len(hbytes)) + hbytes + body


def unpack(raw: bytes, magic: bytes, version: int) -> tuple[dict, memoryview]:
    if len(raw) < 12 or raw[:4] != magic:
        raise FormatError(f"not a {magic.decode()} checkpoint")
    ver, hlen = struct.unpack("<II", raw[4:12])
    if ver != version:
        raise FormatError(f"unsupported checkpoint version {ver}")
    if len(raw) < 12 + hlen:
        raise OSError("truncated checkpoint header")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    return header, memoryview(raw)[12 + hlen:]


def read_tensors(payload: memoryview, specs: list) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(payload):
            raise OSError(f"truncated checkpoint payload at {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).astype(np.float64)
        out[name] = arr.reshape(shape)
        off += 4 * count
    if off != len(payload):
        raise FormatError("trailing bytes after checkpoint payload")
    return out
