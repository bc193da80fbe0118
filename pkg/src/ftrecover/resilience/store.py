"""Directory-backed global store for published log chunks and checkpoints.

Every publish is a write to a temporary name followed by ``os.replace``;
a checkpoint becomes visible only when its directory is renamed into place
with the manifest already inside.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np

from ..errors import CorruptLog, NoCheckpoint
from ..model import Layer, Stage
from ..optimizers import ParamBlock
from .msglog import LocalLog, parse_stream_name, read_chunk, summarize_chunk
from .wire import CKPT_MAGIC, LogRecord, frame, iter_frames, write_file_header

MANIFEST = "MANIFEST.json"


class TornWrite(Exception):
    """Raised by the crash-injection hook in the middle of a checkpoint write."""


@dataclass
class CheckpointManifest:
    iteration: int
    path: Path
    blobs: Dict[int, dict]  # worker id -> {"file", "crc32", "bytes"}
    meta: dict


# -- checkpoint blob encoding ---------------------------------------------

def _encode_block(name: str, b: ParamBlock) -> bytes:
    nb = name.encode()
    has_vmax = b.vmax is not None
    parts = [
        struct.pack("<BH", 1, len(nb)),
        nb,
        struct.pack("<qB", b.t, b.x.ndim),
        struct.pack(f"<{b.x.ndim}I", *b.x.shape),
        struct.pack("<BI", has_vmax, len(b.saved_scalars)),
        np.asarray(b.saved_scalars, dtype="<f8").tobytes(),
    ]
    arrays = [b.x, b.g, b.m, b.v] + ([b.vmax] if has_vmax else [])
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return b"".join(parts)


def _decode_block(body: bytes):
    _, n = struct.unpack_from("<BH", body, 0)
    pos = 3
    name = body[pos : pos + n].decode()
    pos += n
    t, ndim = struct.unpack_from("<qB", body, pos)
    pos += 9
    shape = struct.unpack_from(f"<{ndim}I", body, pos)
    pos += 4 * ndim
    has_vmax, n_saved = struct.unpack_from("<BI", body, pos)
    pos += 5
    saved = np.frombuffer(body, "<f8", n_saved, pos).tolist()
    pos += 8 * n_saved
    size = int(np.prod(shape))
    arrays = []
    for _ in range(5 if has_vmax else 4):
        arrays.append(np.frombuffer(body, "<f8", size, pos).reshape(shape).astype(np.float64))
        pos += 8 * size
    block = ParamBlock(x=arrays[0], g=arrays[1], m=arrays[2], v=arrays[3], t=t, saved_scalars=saved)
    if has_vmax:
        block.vmax = arrays[4]
    return name, block


def write_stage_blob(path: Path, stage: Stage, meta: dict) -> bytes:
    with open(path, "wb") as f:
        write_file_header(f, CKPT_MAGIC)
        f.write(frame(b"\x00" + json.dumps(meta, sort_keys=True).encode()))
        for name, block in stage.blocks():
            f.write(frame(_encode_block(name, block)))
    return path.read_bytes()


def read_stage_blob(path: Path):
    frames = iter_frames(path, CKPT_MAGIC)
    head = next(frames)
    if head[:1] != b"\x00":
        raise CorruptLog(f"{path}: missing metadata frame")
    meta = json.loads(head[1:].decode())
    blocks = [_decode_block(body) for body in frames]
    layers = []
    for i in range(0, len(blocks), 2):
        (_, w), (_, b) = blocks[i], blocks[i + 1]
        layers.append(Layer(w, b))
    return Stage(meta["stage"], layers), meta


class GlobalStore:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.log_dir = self.root / "logs"
        self.ckpt_dir = self.root / "checkpoints"
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)

    # -- logs -------------------------------------------------------------
    def publish_logs(self, local: LocalLog) -> int:
        published = 0
        for info in local.chunks.values():
            dest_dir = self.log_dir / info.stream
            dest_dir.mkdir(exist_ok=True)
            dest = dest_dir / info.path.name
            tmp = dest.with_suffix(".part")
            shutil.copyfile(info.path, tmp)
            os.replace(tmp, dest)
            published += 1
        return published

    def chunk_paths(self, receiver_machines: Optional[Iterable[int]] = None) -> List[Path]:
        wanted = None if receiver_machines is None else set(receiver_machines)
        out = []
        for d in sorted(p for p in self.log_dir.iterdir() if p.is_dir()):
            _, rm, _, _ = parse_stream_name(d.name)
            if wanted is None or rm in wanted:
                out.extend(sorted(d.glob("chunk_*.ftl")))
        return out

    def iter_chunks(
        self, receiver_machines: Iterable[int], lo: int, hi: int, dest: Optional[Path] = None
    ) -> Iterator[List[LogRecord]]:
        """Yield one chunk at a time so download and replay can overlap."""
        wanted = set(receiver_machines)
        for path in self.chunk_paths(wanted):
            src = path
            if dest is not None:
                local = Path(dest) / path.parent.name
                local.mkdir(parents=True, exist_ok=True)
                src = local / path.name
                shutil.copyfile(path, src)
            recs = [
                r
                for r in read_chunk(src)
                if r.receiver_machine in wanted and lo <= r.iteration < hi
            ]
            if recs:
                yield recs

    def fetch_logs(
        self, receiver_machines: Iterable[int], lo: int, hi: int, dest: Optional[Path] = None
    ) -> List[LogRecord]:
        recs = [r for chunk in self.iter_chunks(receiver_machines, lo, hi, dest) for r in chunk]
        recs.sort(key=lambda r: (r.timestamp, r.receiver_stage, r.replica))
        return recs

    def gc_logs(self, checkpoint_iteration: int) -> int:
        self.load_manifest(checkpoint_iteration)  # must be committed
        removed = 0
        for path in self.chunk_paths():
            if summarize_chunk(path).max_iteration < checkpoint_iteration:
                path.unlink()
                removed += 1
        return removed

    def clear_logs(self) -> None:
        shutil.rmtree(self.log_dir)
        self.log_dir.mkdir()

    def discard_logs_from(self, iteration: int) -> None:
        for path in self.chunk_paths():
            info = summarize_chunk(path)
            if info.max_iteration >= iteration:
                path.unlink()

    # -- checkpoints ------------------------------------------------------
    def _final_dir(self, iteration: int) -> Path:
        return self.ckpt_dir / f"iter_{iteration:08d}"

    def write_checkpoint(
        self,
        iteration: int,
        stages: Dict[int, Stage],
        meta: dict,
        crash_after_blobs: Optional[int] = None,
    ) -> CheckpointManifest:
        final = self._final_dir(iteration)
        tmp = self.ckpt_dir / f".tmp_iter_{iteration:08d}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()
        blobs = {}
        for n, (wid, stage) in enumerate(sorted(stages.items())):
            if crash_after_blobs is not None and n >= crash_after_blobs:
                raise TornWrite(f"simulated crash after {n} blobs")
            name = f"worker{wid:04d}.ckpt"
            data = write_stage_blob(
                tmp / name, stage, {"worker": wid, "stage": stage.stage_id, "iteration": iteration}
            )
            blobs[str(wid)] = {"file": name, "crc32": zlib.crc32(data) & 0xFFFFFFFF, "bytes": len(data)}
        manifest = {"iteration": iteration, "blobs": blobs, "meta": meta, "committed": True}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if final.exists():
            old = final.with_name(final.name + ".old")
            os.rename(final, old)
            os.rename(tmp, final)
            shutil.rmtree(old)
        else:
            os.rename(tmp, final)
        return self.load_manifest(iteration)

    def load_manifest(self, iteration: int) -> CheckpointManifest:
        path = self._final_dir(iteration) / MANIFEST
        if not path.exists():
            raise NoCheckpoint(f"no committed checkpoint at iteration {iteration}")
        raw = json.loads(path.read_text())
        return CheckpointManifest(
            raw["iteration"],
            path.parent,
            {int(k): v for k, v in raw["blobs"].items()},
            raw.get("meta", {}),
        )

    def committed_iterations(self) -> List[int]:
        out = []
        for d in self.ckpt_dir.glob("iter_*"):
            if d.is_dir() and not d.name.endswith(".old") and (d / MANIFEST).exists():
                out.append(int(d.name.split("_")[1]))
        return sorted(out)

    def latest_checkpoint(self, at_or_before: Optional[int] = None) -> CheckpointManifest:
        its = [i for i in self.committed_iterations() if at_or_before is None or i <= at_or_before]
        if not its:
            raise NoCheckpoint("no committed checkpoint")
        return self.load_manifest(its[-1])

    def load_checkpoint(self, manifest: CheckpointManifest, workers: Sequence[int]) -> Dict[int, Stage]:
        out = {}
        for wid in workers:
            entry = manifest.blobs.get(wid)
            if entry is None:
                raise NoCheckpoint(f"checkpoint {manifest.iteration} has no blob for worker {wid}")
            path = manifest.path / entry["file"]
            if zlib.crc32(path.read_bytes()) & 0xFFFFFFFF != entry["crc32"]:
                raise CorruptLog(f"{path}: checkpoint blob checksum mismatch")
            stage, _ = read_stage_blob(path)
            out[wid] = stage
        return out
