"""Message logging, checkpointing and the global store."""

from .msglog import DEFAULT_CHUNK_RECORDS, LocalLog, LogQueue, LogTicket, MessageLogger, read_chunk
from .store import CheckpointManifest, GlobalStore, TornWrite
from .wire import LogRecord

__all__ = [
    "DEFAULT_CHUNK_RECORDS",
    "CheckpointManifest",
    "GlobalStore",
    "LocalLog",
    "LogQueue",
    "LogRecord",
    "LogTicket",
    "MessageLogger",
    "TornWrite",
    "read_chunk",
]
