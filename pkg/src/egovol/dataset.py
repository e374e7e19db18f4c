"""EGOV dataset files.

Layout (little-endian)::

    b"EGOV" | u16 version | u32 header length | header JSON (utf-8)
    u64 record count
    records:
      u8 arm_count
      per arm: u8 handedness (0 right, 1 left) | u8 id length | grasp id bytes
      f32 keypoints3d[arms][22][3]
      f32 keypoints2d[arms][22][2]
      u64 seed
      f32 depth[height][width]       (0.0 = no measurement)

The header JSON always carries a ``camera`` block with keys
f, cx, cy, width, height, z_max, nu, nv, nw.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

import numpy as np

from .camera import CameraModel
from ._io import FormatError, read_exact as _read_exact, read_preamble, write_preamble
from .synthesis import ExemplarRecord

MAGIC = b"EGOV"
VERSION = 1
_HAND = {"right": 0, "left": 1}
_HAND_INV = {0: "right", 1: "left"}


def encode_record(rec: ExemplarRecord) -> bytes:
    parts = [struct.pack("<B", rec.arm_count)]
    for hand, gid in zip(rec.handedness, rec.grasp_ids):
        b = gid.encode()
        parts.append(struct.pack("<BB", _HAND[hand], len(b)) + b)
    parts.append(np.ascontiguousarray(rec.keypoints3d, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(rec.keypoints2d, dtype="<f4").tobytes())
    parts.append(struct.pack("<Q", rec.seed))
    parts.append(np.ascontiguousarray(rec.depth, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_record(fh: BinaryIO, cam: CameraModel, sigma: float = float("nan")) -> ExemplarRecord:
    (arms,) = struct.unpack("<B", _read_exact(fh, 1))
    if arms not in (1, 2):
        raise FormatError(f"invalid arm count {arms}")
    hands, gids = [], []
    for _ in range(arms):
        h, n = struct.unpack("<BB", _read_exact(fh, 2))
        hands.append(_HAND_INV[h])
        gids.append(_read_exact(fh, n).decode())
    kp3 = np.frombuffer(_read_exact(fh, arms * 22 * 3 * 4), "<f4").reshape(arms, 22, 3).astype(np.float32)
    kp2 = np.frombuffer(_read_exact(fh, arms * 22 * 2 * 4), "<f4").reshape(arms, 22, 2).astype(np.float32)
    (seed,) = struct.unpack("<Q", _read_exact(fh, 8))
    npx = cam.width * cam.height
    depth = np.frombuffer(_read_exact(fh, npx * 4), "<f4").reshape(cam.height, cam.width).astype(np.float32)
    return ExemplarRecord(depth, kp3, kp2, tuple(hands), tuple(gids), seed, sigma)


class DatasetWriter:
    """Append-only writer; the record count is fixed up front."""

    def __init__(self, out, header: dict, count: int):
        if "camera" not in header:
            raise ValueError("dataset header needs a camera block")
        self._own = not hasattr(out, "write")
        self.fh = open(out, "wb") if self._own else out
        self.count = count
        self.written = 0
        write_preamble(self.fh, MAGIC, VERSION, header)
        self.fh.write(struct.pack("<Q", count))

    def write(self, rec: ExemplarRecord) -> None:
        if self.written >= self.count:
            raise ValueError("more records than declared")
        self.fh.write(encode_record(rec))
        self.written += 1

    def close(self) -> None:
        if self._own:
            self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        self.close()
        if exc_type is None and self.written != self.count:
            raise ValueError(f"declared {self.count} records, wrote {self.written}")


class Dataset:
    """Streaming reader for an EGOV file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            self.header = read_preamble(fh, MAGIC, VERSION)
            (self.count,) = struct.unpack("<Q", _read_exact(fh, 8))
            self._data_offset = fh.tell()
        try:
            self.camera = CameraModel.from_dict(self.header["camera"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"invalid camera block: {e}") from None
        self.sigma = float(self.header.get("synthesis", {}).get("sigma", float("nan")))

    def __len__(self) -> int:
        return self.count

    def __iter__(self) -> Iterator[ExemplarRecord]:
        with open(self.path, "rb", buffering=1 << 20) as fh:
            fh.seek(self._data_offset)
            for _ in range(self.count):
                yield decode_record(fh, self.camera, self.sigma)

    def __getitem__(self, index: int) -> ExemplarRecord:
        if not 0 <= index < self.count:
            raise IndexError(f"record {index} out of range (dataset has {self.count})")
        for i, rec in enumerate(self):
            if i == index:
                return rec
        raise IndexError(index)

    @property
    def config_hash(self) -> Optional[str]:
        return self.header.get("config_hash")


def write_records(out, header: dict, records) -> None:
    records = list(records)
    with DatasetWriter(out, header, len(records)) as w:
        for r in records:
            w.write(r)
