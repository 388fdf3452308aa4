"""The "LASW" weight file.

Layout, all little-endian::

    b"LASW"  u16 version
    u32 header length, then that many bytes of UTF-8 ``key=value`` lines
    repeated until EOF:
        u16 name length, UTF-8 name, u8 rank, rank x u32 extents, float32 data

The header carries the model spec plus integration metadata; parameter and
buffer names carry a component prefix (``lasan.``, ``fm.``, ``fusion.`` ...).
"""
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"LASW"
VERSION = 1


def _err(msg, source):
    return FormatError(f"{source}: {msg}", module="lasan")


def encode_checkpoint(meta, state):
    """Serialize ``meta`` (str -> str) and ``state`` (name -> array) to bytes."""
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v or not k:
            raise FormatError(f"header entry {k!r} cannot be written as a key=value line", module="lasan")
        lines.append(f"{k}={v}\n")
    header = "".join(lines).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", VERSION, len(header)), header]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise FormatError(f"entry {name!r} too large for the format", module="lasan")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(buf, source="<bytes>"):
    """Inverse of :func:`encode_checkpoint`: returns ``(meta, state)``."""
    buf = memoryview(buf)
    if len(buf) < 10 or bytes(buf[:4]) != MAGIC:
        raise _err("not a LASW checkpoint", source)
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise _err(f"unsupported version {version}", source)
    off = 10
    if off + hlen > len(buf):
        raise _err("truncated header", source)
    try:
        text = bytes(buf[off : off + hlen]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise _err("header is not valid UTF-8", source) from exc
    meta = OrderedDict()
    for n, line in enumerate(text.splitlines(), 1):
        key, sep, value = line.partition("=")
        if not sep:
            raise _err(f"header line {n} is not key=value: {line!r}", source)
        meta[key] = value
    off += hlen
    state = OrderedDict()
    while off < len(buf):
        if off + 2 > len(buf):
            raise _err("truncated entry name length", source)
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        if off + nlen + 1 > len(buf):
            raise _err("truncated entry name", source)
        name = bytes(buf[off : off + nlen]).decode("utf-8")
        off += nlen
        rank = buf[off]
        off += 1
        if off + 4 * rank > len(buf):
            raise _err(f"{name}: truncated extents", source)
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(shape, dtype=np.int64))
        if off + 4 * count > len(buf):
            raise _err(f"{name}: truncated data", source)
        if name in state:
            raise _err(f"duplicate entry {name!r}", source)
        state[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)
        off += 4 * count
    return meta, state


def write_checkpoint(path, meta, state):
    Path(path).write_bytes(encode_checkpoint(meta, state))


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), source=str(path))
