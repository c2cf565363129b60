"""Bit-exact little-endian tensor container and the indexed archive built on it.

TensorFile layout::

    b"DLTN" | u8 version=1 | u8 dtype | u8 ndim | ndim x u32 dims | payload

Archive layout::

    b"DLSA" | u32 count | count x (u32 name length | UTF-8 name | TensorFile blob)
"""

import io
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"DLTN"
ARCHIVE_MAGIC = b"DLSA"
VERSION = 1

_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4"), 3: np.dtype("u1")}
_KINDS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int32): 2,
          np.dtype(np.uint8): 3, np.dtype(np.bool_): 3}


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    code = _KINDS.get(arr.dtype)
    if code is None:
        if np.issubdtype(arr.dtype, np.integer):
            code = 2
        else:
            raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError(f"too many dimensions ({arr.ndim})")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    return header + payload


def _read_exact(stream, n, what, base):
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(buf)}",
                          offset=base + len(buf))
    return buf


def read_tensor(stream, base=None):
    """Decode one TensorFile blob from a binary stream positioned at its start."""
    start = stream.tell() if base is None else base
    magic = stream.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=start)
    version, code, ndim = struct.unpack("<BBB", _read_exact(stream, 3, "header", start + 4))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=start + 4)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", offset=start + 5)
    dims = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim, "dims", start + 7))
    dtype = _CODES[code]
    nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
    payload_at = start + 7 + 4 * ndim
    payload = _read_exact(stream, nbytes, "payload", payload_at)
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def decode_tensor(blob: bytes):
    stream = io.BytesIO(blob)
    arr = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after payload", offset=stream.tell() - 1)
    return arr


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_tensor(path, tensor):
    data = getattr(tensor, "data", tensor)
    _atomic_write(path, encode_tensor(data))


def load_tensor(path):
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def save_archive(path, entries):
    """Write ``{name: array}`` (insertion order kept) as a DLSA archive."""
    parts = [ARCHIVE_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(encode_tensor(getattr(arr, "data", arr)))
    _atomic_write(path, b"".join(parts))


def load_archive(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    stream = io.BytesIO(blob)
    if stream.read(4) != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: not a DLSA archive", offset=0)
    (count,) = struct.unpack("<I", _read_exact(stream, 4, "entry count", 4))
    entries = {}
    for _ in range(count):
        at = stream.tell()
        (n,) = struct.unpack("<I", _read_exact(stream, 4, "name length", at))
        name = _read_exact(stream, n, "name", at + 4).decode("utf-8")
        entries[name] = read_tensor(stream)
    if stream.read(1):
        raise FormatError(f"{path}: trailing bytes after {count} entries", offset=stream.tell() - 1)
    return entries
