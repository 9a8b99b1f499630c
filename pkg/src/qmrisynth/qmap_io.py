"""On-disk formats: the QMAP multi-channel float container and binary PGM.

QMAP layout (all integers little-endian, independent of host byte order):

    offset  size  field
    0       4     magic b"QMAP"
    4       2     version (u16), currently 1
    6       1     channel count (u8)
    7       ...   per channel: name length (u16) + UTF-8 name bytes
    ...     4+4   H (u32), W (u32)
    ...     1     dtype code (u8); 1 = float32 little-endian
    ...     C*H*W*4   payload, channels contiguous, each row-major

Round trips are bit-exact; malformed headers and truncated payloads raise
distinct error types instead of returning partial data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"QMAP"
VERSION = 1
DTYPE_FLOAT32 = 1


class QmapError(ValueError):
    """Base class for QMAP container errors."""


class BadMagicError(QmapError):
    pass


class BadVersionError(QmapError):
    pass


class BadDtypeError(QmapError):
    pass


class TruncatedError(QmapError):
    pass


def write_qmap(path, channels):
    """Write named float32 image channels to one QMAP file.

    ``channels`` is an ordered mapping or list of (name, 2-D array) pairs;
    all arrays must share one (H, W) shape.
    """
    items = list(channels.items()) if hasattr(channels, "items") else list(channels)
    if not items:
        raise QmapError("no channels to write")
    if len(items) > 255:
        raise QmapError("too many channels for a u8 count")
    shape = np.asarray(items[0][1]).shape
    if len(shape) != 2:
        raise QmapError(f"channels must be 2-D, got {shape}")
    h, w = shape
    parts = [MAGIC, struct.pack("<HB", VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        if len(raw) > 65535:
            raise QmapError(f"channel name too long: {name!r}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(struct.pack("<IIB", h, w, DTYPE_FLOAT32))
    for name, arr in items:
        a = np.asarray(arr)
        if a.shape != (h, w):
            raise QmapError(f"channel {name!r} shape {a.shape} != {(h, w)}")
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_qmap(path):
    """Read a QMAP file back into an ordered {name: float32 array} dict."""
    blob = Path(path).read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise TruncatedError(f"file ends inside {what} ({len(blob)} bytes total)")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(4, "magic") != MAGIC:
        raise BadMagicError(f"not a QMAP file: {path}")
    version, nchan = struct.unpack("<HB", take(3, "header"))
    if version != VERSION:
        raise BadVersionError(f"unsupported QMAP version {version}")
    names = []
    for _ in range(nchan):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        names.append(take(nlen, "channel name").decode("utf-8"))
    h, w, dtype_code = struct.unpack("<IIB", take(9, "dims"))
    if dtype_code != DTYPE_FLOAT32:
        raise BadDtypeError(f"unsupported dtype code {dtype_code}")
    out = {}
    for name in names:
        raw = take(h * w * 4, f"channel {name!r} payload")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
    if off != len(blob):
        raise TruncatedError(f"{len(blob) - off} trailing bytes after payload")
    return out


# ---------------------------------------------------------------------------
# PGM rendering
# ---------------------------------------------------------------------------

def write_pgm(path, img, depth=8, window=None):
    """Render a float image as binary PGM (P5) with affine windowing.

    ``window`` is (lo, hi); values at or below lo map to 0, at or above hi to
    the maximum gray value, linearly in between with round-half-up.  16-bit
    output is big-endian per the Netpbm convention.
    """
    if depth not in (8, 16):
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    img = np.asarray(img, dtype=np.float64)
    if window is None:
        lo, hi = float(img.min()), float(img.max())
        if lo == hi:
            hi = lo + 1.0
    else:
        lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got ({lo}, {hi})")
    maxval = 255 if depth == 8 else 65535
    scaled = (img - lo) / (hi - lo) * maxval
    quantized = np.floor(np.clip(scaled, 0, maxval) + 0.5)
    quantized = np.minimum(quantized, maxval)
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    if depth == 8:
        body = quantized.astype(np.uint8).tobytes()
    else:
        body = quantized.astype(">u2").tobytes()
    Path(path).write_bytes(header + body)


def read_pgm(path):
    """Parse a binary PGM written by write_pgm (used by tests and tooling)."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ValueError("not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    dt = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(blob, dtype=dt, offset=pos, count=h * w)
    return data.reshape(h, w).astype(np.int64), maxval
