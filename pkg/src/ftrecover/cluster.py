"""Simulated machines, point-to-point channels and fail-stop failures."""

from __future__ import annotations

import re
import shutil
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import ChannelBroken, InvalidInjection, NotFailed

ACTIVATION = 0
GRADIENT = 1
DIRECTION_NAMES = {ACTIVATION: "Activation", GRADIENT: "Gradient"}


@dataclass
class Message:
    sender: int  # worker id
    receiver: int
    iteration: int
    mb: int
    direction: int
    payload: np.ndarray

    @property
    def key(self) -> Tuple[int, int, int, int, int]:
        return (self.sender, self.receiver, self.iteration, self.mb, self.direction)


@dataclass(frozen=True)
class FailurePhase:
    """Where inside an iteration a machine dies.

    ``MidIteration(step)`` kills it before global schedule slot ``step``;
    ``MidUpdate(k)`` after the first ``k`` layer updates in update order.
    """

    kind: str
    arg: Optional[int] = None

    _PATTERN = re.compile(r"^(BeforeUpdate|AfterUpdate|MidUpdate|MidIteration)(?:\((\d+)\))?$")

    @classmethod
    def parse(cls, text: str) -> "FailurePhase":
        match = cls._PATTERN.match(text.replace(" ", ""))
        if not match:
            raise InvalidInjection(f"unknown phase {text!r}")
        kind, arg = match.group(1), match.group(2)
        if kind in ("MidUpdate", "MidIteration") and arg is None:
            raise InvalidInjection(f"{kind} needs an argument, e.g. {kind}(2)")
        if kind in ("BeforeUpdate", "AfterUpdate") and arg is not None:
            raise InvalidInjection(f"{kind} takes no argument")
        return cls(kind, None if arg is None else int(arg))

    def __str__(self):
        return self.kind if self.arg is None else f"{self.kind}({self.arg})"


@dataclass
class FailureEvent:
    machine_ids: Tuple[int, ...]
    iteration: int
    phase: FailurePhase
    detected_by: Dict[int, str] = field(default_factory=dict)  # worker -> "channel" | "flag"

    def to_dict(self) -> dict:
        return {
            "machines": list(self.machine_ids),
            "iteration": self.iteration,
            "phase": str(self.phase),
        }


@dataclass
class Machine:
    machine_id: int
    worker_ids: List[int]
    local_disk: Path
    alive: bool = True
    generation: int = 0


class GlobalKV:
    """Rank-0 key-value store: a monotone failure latch plus a small map."""

    def __init__(self):
        self._lock = threading.Lock()
        self._flag = False
        self.data: Dict[str, object] = {}

    def set_failure(self) -> None:
        with self._lock:
            self._flag = True

    @property
    def failure_flag(self) -> bool:
        return self._flag

    def reset(self) -> None:
        with self._lock:
            self._flag = False
            self.data.clear()


class Cluster:
    def __init__(self, placement: Dict[int, List[int]], root: Path):
        self.root = Path(root)
        self.machines: Dict[int, Machine] = {}
        self.worker_machine: Dict[int, int] = {}
        for mid, workers in sorted(placement.items()):
            disk = self.root / f"machine{mid}.gen0"
            disk.mkdir(parents=True, exist_ok=True)
            self.machines[mid] = Machine(mid, list(workers), disk)
            for w in workers:
                self.worker_machine[w] = mid
        self.channels: Dict[Tuple[int, int], deque] = {}
        self.kv = GlobalKV()
        self.broken: Dict[int, Tuple[int, ...]] = {}  # worker -> dead machines it hit
        self.log_hook: Optional[Callable[[Message], None]] = None
        self._reported: set = set()
        self.event: Optional[FailureEvent] = None

    # -- topology ---------------------------------------------------------
    def machine_of(self, worker: int) -> int:
        return self.worker_machine[worker]

    def is_alive(self, worker: int) -> bool:
        return self.machines[self.worker_machine[worker]].alive

    def crosses_machines(self, a: int, b: int) -> bool:
        return self.worker_machine[a] != self.worker_machine[b]

    def dead_machines(self) -> List[int]:
        return [mid for mid, m in self.machines.items() if not m.alive]

    def alive_workers(self) -> List[int]:
        return sorted(w for w, mid in self.worker_machine.items() if self.machines[mid].alive)

    # -- messaging --------------------------------------------------------
    def _check_endpoints(self, worker: int, peer: int) -> None:
        dead = tuple(
            sorted({self.worker_machine[w] for w in (worker, peer) if not self.is_alive(w)})
        )
        if dead:
            if self.is_alive(worker):
                self.broken[worker] = dead
            raise ChannelBroken(f"channel {worker}<->{peer} touches dead machine(s) {dead}", dead)

    def send(self, msg: Message) -> None:
        """Deliver in per-channel FIFO order; inter-machine sends hit the log hook."""
        self._check_endpoints(msg.sender, msg.receiver)
        if self.log_hook is not None and self.crosses_machines(msg.sender, msg.receiver):
            self.log_hook(msg)
        self.channels.setdefault((msg.sender, msg.receiver), deque()).append(msg)

    def recv(self, receiver: int, sender: int, iteration: int, mb: int, direction: int) -> np.ndarray:
        self._check_endpoints(receiver, sender)
        queue = self.channels.get((sender, receiver))
        if not queue:
            raise ChannelBroken(f"nothing to receive on {sender}->{receiver}")
        msg = queue.popleft()
        if (msg.iteration, msg.mb, msg.direction) != (iteration, mb, direction):
            raise RuntimeError(
                f"FIFO violation on {sender}->{receiver}: expected {(iteration, mb, direction)}, "
                f"got {(msg.iteration, msg.mb, msg.direction)}"
            )
        return msg.payload

    def clear_channels(self) -> None:
        self.channels.clear()

    # -- failures ---------------------------------------------------------
    def inject_failure(self, machine_id: int, iteration: int, phase: FailurePhase) -> FailureEvent:
        machine = self.machines.get(machine_id)
        if machine is None or not machine.alive:
            raise InvalidInjection(f"machine {machine_id} is not alive")
        machine.alive = False
        # in-flight messages from the dead machine die with it
        for (s, r), queue in list(self.channels.items()):
            if self.worker_machine[s] == machine_id or self.worker_machine[r] == machine_id:
                queue.clear()
        if self.event is None or self.event.iteration != iteration:
            self.event = FailureEvent((machine_id,), iteration, phase)
        else:
            self.event.machine_ids = tuple(sorted(set(self.event.machine_ids) | {machine_id}))
        return self.event

    def probe(self, worker: int, neighbors: List[int]) -> None:
        """One send/recv attempt towards each pipeline or replica neighbor."""
        for peer in neighbors:
            try:
                self._check_endpoints(worker, peer)
            except ChannelBroken:
                return

    def detect_failure(self, worker: int) -> Optional[FailureEvent]:
        if not self.is_alive(worker):
            return None
        if worker in self.broken:
            how = "channel"
        elif self.kv.failure_flag:
            how = "flag"
        else:
            return None
        self.kv.set_failure()
        if self.event is not None and worker not in self._reported:
            self.event.detected_by[worker] = how
            self._reported.add(worker)
        return self.event

    def spawn_replacement(self, machine_id: int) -> Machine:
        old = self.machines[machine_id]
        if old.alive:
            raise NotFailed(f"machine {machine_id} is alive")
        gen = old.generation + 1
        disk = self.root / f"machine{machine_id}.gen{gen}"
        if disk.exists():
            shutil.rmtree(disk)
        disk.mkdir(parents=True)
        new = Machine(machine_id, list(old.worker_ids), disk, alive=True, generation=gen)
        self.machines[machine_id] = new
        return new

    def clear_failure_state(self) -> None:
        self.kv.reset()
        self.broken.clear()
        self._reported.clear()
        self.event = None
