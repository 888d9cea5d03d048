"""Binary parameter snapshots.

Layout (little-endian throughout)::

    magic      4 bytes  b"GNCK"
    version    u32
    config     32 bytes sha256 of the resolved run config
    count      u32      number of tensors
    per tensor:
        name_len u16, name utf-8
        dtype    u8     (0 = float32, 1 = float64)
        ndim     u8, then ndim x u32 dims
        data     prod(dims) values, row-major
"""

import hashlib
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"GNCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def config_hash(text):
    return hashlib.sha256(text.encode("utf-8")).digest()


def encode_checkpoint(params, cfg_hash):
    if len(cfg_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    out = [MAGIC, struct.pack("<I", VERSION), cfg_hash, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        if arr.dtype not in _CODES:
            raise ValueError(f"cannot store dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype(_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(out)


def decode_checkpoint(buf):
    """Return ``(params, config_hash)``."""
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("checkpoint truncated", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("not a checkpoint file", 0)
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    cfg_hash = take(32)
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        at = pos
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", at)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(size * dt.itemsize), dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", pos)
    return params, cfg_hash


def save_checkpoint(path, params, cfg_hash):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params, cfg_hash))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
