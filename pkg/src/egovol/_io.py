"""Shared preamble handling for the binary artifact formats."""
from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Malformed or incompatible artifact file."""


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def write_preamble(fh: BinaryIO, magic: bytes, version: int, header: dict) -> None:
    blob = _header_bytes(header)
    fh.write(magic + struct.pack("<HI", version, len(blob)) + blob)


def read_preamble(fh: BinaryIO, magic: bytes, version: int) -> dict:
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    raw = fh.read(6)
    if len(raw) != 6:
        raise FormatError("truncated header")
    ver, n = struct.unpack("<HI", raw)
    if ver != version:
        raise FormatError(f"unsupported format version {ver} (expected {version})")
    try:
        return json.loads(fh.read(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header block: {e}") from None


def read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FormatError("truncated file")
    return b


def write_pgm(path, img, maxval: int) -> None:
    """Binary PGM (P5); 16-bit samples are big-endian as the format requires."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must lie in [1, 65535]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=dtype).tobytes())


def read_pgm(path):
    """Returns ``(image, maxval)`` from a binary PGM (P5)."""
    data = open(path, "rb").read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PGM header") from None
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    size = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < size:
        raise FormatError("truncated PGM data")
    return np.frombuffer(data[pos:pos + size], dtype).reshape(h, w).astype(np.int64), maxval
