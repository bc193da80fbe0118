"""Sender-side (upstream backup) message logging.

Outgoing inter-group messages are queued per worker without delaying the
send, then committed to the sender machine's local disk when the worker
reaches a bubble slot, or on an explicit flush.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from ..errors import StorageError
from .wire import HEADER_SIZE, LOG_MAGIC, LogRecord, frame, iter_frames, write_file_header

DEFAULT_CHUNK_RECORDS = 64


def stream_name(rec: LogRecord) -> str:
    return f"m{rec.sender_machine}-m{rec.receiver_machine}.w{rec.sender_worker}-w{rec.receiver_worker}"


def parse_stream_name(name: str) -> Tuple[int, int, int, int]:
    machines, workers = name.split(".")
    sm, rm = (int(x[1:]) for x in machines.split("-"))
    sw, rw = (int(x[1:]) for x in workers.split("-"))
    return sm, rm, sw, rw


@dataclass
class ChunkInfo:
    path: Path
    stream: str
    records: int = 0
    min_iteration: int = -1
    max_iteration: int = -1
    record_bytes: int = 0
    sealed: bool = False

    def note(self, rec: LogRecord, size: int) -> None:
        if self.records == 0:
            self.min_iteration = rec.iteration
        self.max_iteration = max(self.max_iteration, rec.iteration)
        self.records += 1
        self.record_bytes += size


def read_chunk(path: Path) -> List[LogRecord]:
    return [LogRecord.decode(body) for body in iter_frames(path, LOG_MAGIC)]


def summarize_chunk(path: Path) -> ChunkInfo:
    info = ChunkInfo(Path(path), Path(path).parent.name, sealed=True)
    for rec in read_chunk(path):
        info.note(rec, rec.frame_size())
    return info


class LocalLog:
    """Committed log chunks on one machine's local disk."""

    def __init__(self, disk: Path, chunk_records: int = DEFAULT_CHUNK_RECORDS):
        self.root = Path(disk) / "logs"
        self.root.mkdir(parents=True, exist_ok=True)
        self.chunk_records = int(chunk_records)
        self.chunks: Dict[Path, ChunkInfo] = {}
        self._open: Dict[str, ChunkInfo] = {}
        self._seq: Dict[str, int] = {}

    def _new_chunk(self, stream: str) -> ChunkInfo:
        seq = self._seq.get(stream, 0)
        self._seq[stream] = seq + 1
        d = self.root / stream
        d.mkdir(exist_ok=True)
        path = d / f"chunk_{seq:06d}.ftl"
        with open(path, "wb") as f:
            write_file_header(f, LOG_MAGIC)
        info = ChunkInfo(path, stream)
        self.chunks[path] = info
        self._open[stream] = info
        return info

    def append(self, records: Iterable[LogRecord]) -> int:
        by_stream: Dict[str, List[LogRecord]] = {}
        for rec in records:
            by_stream.setdefault(stream_name(rec), []).append(rec)
        written = 0
        try:
            for stream, recs in by_stream.items():
                i = 0
                while i < len(recs):
                    info = self._open.get(stream)
                    if info is None or info.records >= self.chunk_records:
                        if info is not None:
                            info.sealed = True
                        info = self._new_chunk(stream)
                    room = self.chunk_records - info.records
                    batch = recs[i : i + room]
                    with open(info.path, "ab") as f:
                        for rec in batch:
                            data = frame(rec.encode())
                            f.write(data)
                            info.note(rec, len(data))
                    i += len(batch)
                    written += len(batch)
        except OSError as exc:
            raise StorageError(str(exc)) from exc
        return written

    def seal_all(self) -> None:
        """Close open chunks so that no chunk spans a checkpoint boundary."""
        for info in self._open.values():
            info.sealed = True
        self._open.clear()

    def gc(self, checkpoint_iteration: int) -> int:
        removed = 0
        for path, info in list(self.chunks.items()):
            if info.max_iteration < checkpoint_iteration:
                path.unlink(missing_ok=True)
                del self.chunks[path]
                if self._open.get(info.stream) is info:
                    del self._open[info.stream]
                removed += 1
        return removed

    def discard_from(self, iteration: int) -> int:
        """Drop records with iteration >= ``iteration`` (they will be re-sent)."""
        dropped = 0
        for path, info in list(self.chunks.items()):
            if info.max_iteration < iteration:
                continue
            keep = [r for r in read_chunk(path) if r.iteration < iteration]
            dropped += info.records - len(keep)
            if self._open.get(info.stream) is info:
                del self._open[info.stream]
            if not keep:
                path.unlink()
                del self.chunks[path]
                continue
            tmp = path.with_suffix(".tmp")
            fresh = ChunkInfo(path, info.stream, sealed=True)
            with open(tmp, "wb") as f:
                write_file_header(f, LOG_MAGIC)
                for rec in keep:
                    data = frame(rec.encode())
                    f.write(data)
                    fresh.note(rec, len(data))
            os.replace(tmp, path)
            self.chunks[path] = fresh
        self.seal_all()
        return dropped

    def live_record_bytes(self) -> int:
        return sum(info.record_bytes for info in self.chunks.values())

    def live_file_bytes(self) -> int:
        return sum(info.record_bytes + HEADER_SIZE for info in self.chunks.values())


class LogQueue:
    """Pending records of one worker; committed in FIFO order."""

    def __init__(self, owner: int, local: LocalLog):
        self.owner = owner
        self.local = local
        self.pending: deque = deque()
        self.enqueued = 0
        self.committed_through = 0  # monotone sequence watermark

    def enqueue(self, rec: LogRecord) -> int:
        self.pending.append(rec)
        self.enqueued += 1
        return self.enqueued

    def commit(self) -> int:
        if self.pending:
            batch = list(self.pending)
            self.local.append(batch)
            self.pending.clear()
            self.committed_through += len(batch)
        return self.committed_through

    def lose(self) -> int:
        lost = len(self.pending)
        self.pending.clear()
        return lost

    def drop_from(self, iteration: int) -> None:
        self.pending = deque(r for r in self.pending if r.iteration < iteration)


@dataclass
class LogTicket:
    logged: bool
    sequence: Optional[int] = None


class MessageLogger:
    """Decides what to log and owns every worker queue and machine log."""

    def __init__(self, groups: List[List[int]], chunk_records: int = DEFAULT_CHUNK_RECORDS):
        self.chunk_records = chunk_records
        self.set_groups(groups)
        self.local: Dict[int, LocalLog] = {}
        self.queues: Dict[int, LogQueue] = {}
        self.enabled = True

    def set_groups(self, groups: List[List[int]]) -> None:
        self.groups = [list(g) for g in groups]
        self.group_of = {mid: gi for gi, g in enumerate(self.groups) for mid in g}

    def attach_machine(self, machine_id: int, disk: Path, workers: List[int]) -> None:
        log = LocalLog(disk, self.chunk_records)
        self.local[machine_id] = log
        for w in workers:
            self.queues[w] = LogQueue(w, log)

    def is_logged_boundary(self, sender_machine: int, receiver_machine: int) -> bool:
        return self.enabled and self.group_of[sender_machine] != self.group_of[receiver_machine]

    def log_send(self, rec: LogRecord) -> LogTicket:
        if not self.is_logged_boundary(rec.sender_machine, rec.receiver_machine):
            return LogTicket(False)
        return LogTicket(True, self.queues[rec.sender_worker].enqueue(rec))

    def on_bubble(self, worker: int) -> int:
        return self.queues[worker].commit()

    def flush(self, worker: int) -> int:
        return self.queues[worker].commit()

    def lose_machine(self, machine_id: int, workers: List[int]) -> int:
        return sum(self.queues[w].lose() for w in workers)

    def pending_count(self) -> int:
        return sum(len(q.pending) for q in self.queues.values())
