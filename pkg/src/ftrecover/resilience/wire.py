"""Length-prefixed binary framing shared by log chunks and checkpoint blobs.

File layout (all little-endian)::

    magic   4 bytes   b"FTLG" (log chunk) or b"FTCK" (checkpoint blob)
    version u16
    frame*  u32 body_length | body | u32 crc32(body)

A log record body is::

    i32 sender_machine, i32 receiver_machine, i32 sender_worker,
    i32 receiver_worker, i32 sender_stage, i32 receiver_stage, i32 replica,
    i64 iteration, i32 mb, u8 direction, u8 ndim, u32 dims[ndim],
    f64 payload[prod(dims)]
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from ..errors import CorruptLog

LOG_MAGIC = b"FTLG"
CKPT_MAGIC = b"FTCK"
VERSION = 1

_FILE_HEADER = struct.Struct("<4sH")
_LEN = struct.Struct("<I")
_RECORD_HEAD = struct.Struct("<7iqiBB")

HEADER_SIZE = _FILE_HEADER.size


def write_file_header(f: BinaryIO, magic: bytes) -> None:
    f.write(_FILE_HEADER.pack(magic, VERSION))


def frame(body: bytes) -> bytes:
    return _LEN.pack(len(body)) + body + _LEN.pack(zlib.crc32(body) & 0xFFFFFFFF)


def iter_frames(path: Path, magic: bytes) -> Iterator[bytes]:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise CorruptLog(f"{path}: truncated header")
    got_magic, version = _FILE_HEADER.unpack_from(data, 0)
    if got_magic != magic or version != VERSION:
        raise CorruptLog(f"{path}: bad magic/version {got_magic!r} v{version}")
    pos = HEADER_SIZE
    while pos < len(data):
        if pos + 4 > len(data):
            raise CorruptLog(f"{path}: truncated frame length at byte {pos}")
        (n,) = _LEN.unpack_from(data, pos)
        end = pos + 4 + n + 4
        if end > len(data):
            raise CorruptLog(f"{path}: truncated frame at byte {pos}")
        body = data[pos + 4 : pos + 4 + n]
        (crc,) = _LEN.unpack_from(data, pos + 4 + n)
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise CorruptLog(f"{path}: checksum mismatch at byte {pos}")
        yield body
        pos = end


@dataclass
class LogRecord:
    sender_machine: int
    receiver_machine: int
    sender_worker: int
    receiver_worker: int
    sender_stage: int
    receiver_stage: int
    replica: int
    iteration: int
    mb: int
    direction: int
    payload: np.ndarray

    @property
    def timestamp(self):
        return (self.iteration, self.mb, self.direction, self.sender_stage)

    @property
    def key(self):
        return (self.sender_worker, self.receiver_worker, self.iteration, self.mb, self.direction)

    def encode(self) -> bytes:
        payload = np.ascontiguousarray(self.payload, dtype="<f8")
        head = _RECORD_HEAD.pack(
            self.sender_machine,
            self.receiver_machine,
            self.sender_worker,
            self.receiver_worker,
            self.sender_stage,
            self.receiver_stage,
            self.replica,
            self.iteration,
            self.mb,
            self.direction,
            payload.ndim,
        )
        dims = struct.pack(f"<{payload.ndim}I", *payload.shape)
        return head + dims + payload.tobytes()

    @classmethod
    def decode(cls, body: bytes) -> "LogRecord":
        fields = _RECORD_HEAD.unpack_from(body, 0)
        ndim = fields[-1]
        pos = _RECORD_HEAD.size
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims)
        if pos + 8 * count != len(body):
            raise CorruptLog("record length disagrees with its shape")
        return cls(*fields[:-1], payload.astype(np.float64))

    def frame_size(self) -> int:
        return 8 + _RECORD_HEAD.size + 4 * np.ndim(self.payload) + 8 * int(np.size(self.payload))


def record_frame_size(shape) -> int:
    return 8 + _RECORD_HEAD.size + 4 * len(shape) + 8 * int(np.prod(shape))
