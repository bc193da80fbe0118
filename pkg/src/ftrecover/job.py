"""Training driver: runs 1F1B iterations over the simulated cluster.

The default execution is a single-threaded event loop that walks the
schedule slot by slot in (slot index, replica, stage) order.  A threaded
mode runs one thread per worker over blocking channels and produces the
same bits for failure-free iterations.
"""

from __future__ import annotations

import hashlib
import queue
import shutil
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .cluster import ACTIVATION, GRADIENT, Cluster, FailureEvent, FailurePhase, Message
from .config import Injection, RunConfig
from .errors import InvalidInjection
from .model import SyntheticData, Stage, accumulate_grads, backward_stage, build_stage, forward_stage, mse_loss
from .pipeline import (
    BUBBLE,
    FORWARD,
    allreduce_replicas,
    apply_layerwise_updates,
    build_1f1b_schedule,
)
from .resilience import GlobalStore, LogRecord, MessageLogger
from .resilience.wire import record_frame_size


@dataclass
class Worker:
    wid: int
    replica: int
    stage_id: int
    stage: Stage
    iteration: int = 0
    partials: Dict[int, list] = field(default_factory=dict)
    loss_grads: Dict[int, np.ndarray] = field(default_factory=dict)
    losses: Dict[int, float] = field(default_factory=dict)

    def clear_volatile(self) -> None:
        if self.stage is not None:
            self.stage.cache.clear()
        self.partials.clear()
        self.loss_grads.clear()
        self.losses.clear()


@dataclass
class IterationResult:
    iteration: int
    loss: float
    digest: str


def stage_digest(stage: Stage) -> str:
    h = hashlib.sha256()
    for name, b in stage.blocks():
        h.update(name.encode())
        h.update(int(b.t).to_bytes(8, "little"))
        for arr in (b.x, b.m, b.v):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


class TrainingJob:
    def __init__(self, cfg: RunConfig, root: Union[str, Path]):
        self.cfg = cfg
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.schedule = build_1f1b_schedule(cfg.stages, cfg.micro_batches)
        self.data = SyntheticData(cfg.data_seed, cfg.width, cfg.micro_batch_size)
        self.hyper = cfg.hyper
        self.cluster = Cluster(cfg.placement(), self.root / "machines")
        self.store = GlobalStore(self.root / "store")
        self.groups = cfg.groups or self._default_groups()
        self.logger = MessageLogger(self.groups, cfg.chunk_records)
        self.logger.enabled = cfg.logging_enabled
        for mid, machine in self.cluster.machines.items():
            self.logger.attach_machine(mid, machine.local_disk, machine.worker_ids)
        self.cluster.log_hook = self._log_hook
        self.workers: Dict[int, Worker] = {}
        for mid, machine in self.cluster.machines.items():
            for wid in machine.worker_ids:
                rep, s = cfg.worker_coords(wid)
                stage = build_stage(s, cfg.layers_per_stage, cfg.width, cfg.model_seed)
                self.workers[wid] = Worker(wid, rep, s, stage)
        self.next_iteration = 0
        self.trajectory: Dict[int, str] = {}
        self.losses: Dict[int, float] = {}
        self.recoveries: List[dict] = []
        self.fired: set = set()
        self.fired_cascades: set = set()
        self.timings: List[dict] = []

    # -- topology helpers -------------------------------------------------
    def _default_groups(self) -> List[List[int]]:
        if self.cfg.storage_budget is not None:
            from .planner import group_machines

            return group_machines(self.desk_profile(self.cfg.storage_budget)).groups
        return [[m] for m in range(self.cfg.machines)]

    def desk_profile(self, budget: float):
        """Planner profile for this toy topology (one cost unit per layer)."""
        from .planner import Profile

        cfg = self.cfg
        placement = cfg.placement()
        R = [float(len(placement[m]) * cfg.layers_per_stage) for m in range(cfg.machines)]
        per_msg = record_frame_size((cfg.micro_batch_size, cfg.width))
        M = []
        for a in range(cfg.machines - 1):
            links = sum(
                1
                for w in placement[a]
                for nb in self.pipeline_neighbors(w)
                if nb in placement[a + 1]
            )
            M.append(float(links * 2 * cfg.micro_batches * per_msg))
        return Profile(N=cfg.machines, R=R, M=M, B=1e9, T=cfg.checkpoint_interval, M_max=budget)

    def worker_on(self, replica: int, stage: int) -> int:
        return self.cfg.worker_id(replica, stage)

    def pipeline_neighbors(self, wid: int) -> List[int]:
        rep, s = self.cfg.worker_coords(wid)
        out = []
        if s > 0:
            out.append(self.worker_on(rep, s - 1))
        if s < self.cfg.stages - 1:
            out.append(self.worker_on(rep, s + 1))
        return out

    def replica_peers(self, wid: int) -> List[int]:
        rep, s = self.cfg.worker_coords(wid)
        return [self.worker_on(r, s) for r in range(self.cfg.replicas) if r != rep]

    def machine_adjacency(self) -> Dict[int, set]:
        adj = {m: set() for m in self.cluster.machines}
        for wid in self.workers:
            a = self.cluster.machine_of(wid)
            for nb in self.pipeline_neighbors(wid):
                b = self.cluster.machine_of(nb)
                if a != b:
                    adj[a].add(b)
        return adj

    def group_of(self, machine_id: int) -> List[int]:
        return self.groups[self.logger.group_of[machine_id]]

    def boundary_bytes_per_iteration(self) -> int:
        """Record bytes crossing logged group boundaries in one iteration."""
        per_msg = record_frame_size((self.cfg.micro_batch_size, self.cfg.width))
        n = 0
        for wid in self.workers:
            for nb in self.pipeline_neighbors(wid):
                a, b = self.cluster.machine_of(wid), self.cluster.machine_of(nb)
                if self.logger.is_logged_boundary(a, b):
                    n += 1
        return n * self.cfg.micro_batches * per_msg

    # -- logging hook -----------------------------------------------------
    def make_record(self, msg: Message) -> LogRecord:
        s_rep, s_stage = self.cfg.worker_coords(msg.sender)
        _, r_stage = self.cfg.worker_coords(msg.receiver)
        return LogRecord(
            sender_machine=self.cluster.machine_of(msg.sender),
            receiver_machine=self.cluster.machine_of(msg.receiver),
            sender_worker=msg.sender,
            receiver_worker=msg.receiver,
            sender_stage=s_stage,
            receiver_stage=r_stage,
            replica=s_rep,
            iteration=msg.iteration,
            mb=msg.mb,
            direction=msg.direction,
            payload=msg.payload,
        )

    def _log_hook(self, msg: Message) -> None:
        self.logger.log_send(self.make_record(msg))

    # -- state ------------------------------------------------------------
    def digest(self) -> str:
        h = hashlib.sha256()
        for wid in sorted(self.workers):
            h.update(stage_digest(self.workers[wid].stage).encode())
        return h.hexdigest()

    def machine_digest(self, machine_id: int) -> str:
        h = hashlib.sha256()
        for wid in self.cluster.machines[machine_id].worker_ids:
            h.update(stage_digest(self.workers[wid].stage).encode())
        return h.hexdigest()

    def snapshot_stages(self) -> Dict[int, Stage]:
        return {wid: w.stage.copy() for wid, w in self.workers.items()}

    def clear_volatile(self) -> None:
        for w in self.workers.values():
            w.clear_volatile()
        self.cluster.clear_channels()

    def checkpoint(self, iteration: int, crash_after_blobs: Optional[int] = None):
        assert all(w.iteration == iteration for w in self.workers.values()), "workers not at a boundary"
        for log in self.logger.local.values():
            log.seal_all()
        manifest = self.store.write_checkpoint(
            iteration,
            {wid: w.stage for wid, w in self.workers.items()},
            {"data_seed": self.cfg.data_seed, "model_seed": self.cfg.model_seed},
            crash_after_blobs=crash_after_blobs,
        )
        self.gc(iteration)
        return manifest

    def gc(self, iteration: int) -> int:
        removed = sum(log.gc(iteration) for log in self.logger.local.values())
        removed += self.store.gc_logs(iteration)
        return removed

    def live_log_bytes(self) -> int:
        return sum(log.live_record_bytes() for log in self.logger.local.values())

    # -- one iteration ----------------------------------------------------
    def _injection_for(self, it: int) -> List[Injection]:
        out = []
        for idx, inj in enumerate(self.cfg.failures):
            if not inj.during_recovery and inj.iteration == it and idx not in self.fired:
                out.append((idx, inj))
        return out

    def _fire(self, injections, it: int, phase_kind: str, arg=None) -> Optional[FailureEvent]:
        event = None
        for idx, inj in injections:
            if inj.phase.kind == phase_kind and (arg is None or inj.phase.arg == arg):
                self.fired.add(idx)
                event = self.kill(inj.machine, it, inj.phase)
        return event

    def kill(self, machine_id: int, iteration: int, phase: FailurePhase) -> FailureEvent:
        """Fail-stop: the machine's memory, queues and local disk are gone."""
        machine = self.cluster.machines[machine_id]
        event = self.cluster.inject_failure(machine_id, iteration, phase)
        self.logger.lose_machine(machine_id, machine.worker_ids)
        shutil.rmtree(machine.local_disk, ignore_errors=True)
        for wid in machine.worker_ids:
            w = self.workers[wid]
            w.clear_volatile()
            w.stage = None
            w.iteration = -1
        return event

    def replace_machine(self, machine_id: int):
        machine = self.cluster.spawn_replacement(machine_id)
        self.logger.attach_machine(machine_id, machine.local_disk, machine.worker_ids)
        return machine

    def validate_injections(self) -> None:
        for inj in self.cfg.failures:
            if inj.during_recovery:
                continue
            ph = inj.phase
            if ph.kind == "MidIteration" and ph.arg >= self.schedule.length:
                raise InvalidInjection(f"slot {ph.arg} beyond schedule length {self.schedule.length}")
            if ph.kind == "MidUpdate" and ph.arg > self.cfg.stages * self.cfg.layers_per_stage:
                raise InvalidInjection(f"MidUpdate({ph.arg}) exceeds the number of layers")

    def run_iteration(self, it: int, injections=None) -> Union[IterationResult, FailureEvent]:
        cfg = self.cfg
        injections = injections or []
        p, R = cfg.stages, cfg.replicas
        for w in self.workers.values():
            w.clear_volatile()

        if cfg.execution == "threads" and not injections:
            self._run_slots_threaded(it)
        else:
            for t in range(self.schedule.length):
                event = self._fire(injections, it, "MidIteration", t)
                if event is not None:
                    return self.detect(event)
                for rep in range(R):
                    for s in range(p):
                        self._exec_slot(self.workers[self.worker_on(rep, s)], it, self.schedule.slots[s][t])

        event = self._fire(injections, it, "BeforeUpdate")
        if event is not None:
            return self.detect(event)

        grads = {}
        for w in self.workers.values():
            grads[w.wid] = accumulate_grads([w.partials[mb] for mb in range(cfg.micro_batches)])
        for s in range(p):
            members = [self.worker_on(rep, s) for rep in range(R)]
            synced = allreduce_replicas([grads[wid] for wid in members])
            for wid in members:
                grads[wid] = synced

        last = [self.workers[self.worker_on(rep, p - 1)] for rep in range(R)]
        self.losses[it] = float(np.mean([w.losses[mb] for w in last for mb in sorted(w.losses)]))

        # wait-free updates: last stage first, each stage last layer first
        mid = [(idx, inj) for idx, inj in injections if inj.phase.kind == "MidUpdate"]
        budget = min(inj.phase.arg for _, inj in mid) if mid else None
        L = cfg.layers_per_stage
        for s in range(p - 1, -1, -1):
            k = None if budget is None else max(0, min(L, budget - (p - 1 - s) * L))
            for rep in range(R):
                w = self.workers[self.worker_on(rep, s)]
                if apply_layerwise_updates(w.stage, grads[w.wid], self.hyper, interrupt_after=k) == L:
                    w.iteration = it + 1
        if mid:
            event = None
            for idx, inj in mid:
                self.fired.add(idx)
                event = self.kill(inj.machine, it, inj.phase)
            return self.detect(event)

        # commit
        for w in self.workers.values():
            for _, b in w.stage.blocks():
                b.updated_flag = False
            w.iteration = it + 1
        digest = self.digest()
        self.trajectory[it + 1] = digest
        self.next_iteration = it + 1

        event = self._fire(injections, it, "AfterUpdate")
        if event is not None:
            return self.detect(event)
        return IterationResult(it, self.losses[it], digest)

    def _exec_slot(self, w: Worker, it: int, slot) -> None:
        cfg = self.cfg
        p = cfg.stages
        s = w.stage_id
        if slot.kind == BUBBLE:
            self.logger.on_bubble(w.wid)
        elif slot.kind == FORWARD:
            if s == 0:
                x = self.data.inputs(it, w.replica, slot.mb)
            else:
                x = self.cluster.recv(w.wid, self.worker_on(w.replica, s - 1), it, slot.mb, ACTIVATION)
            out = forward_stage(w.stage, x, key=(it, slot.mb))
            if s < p - 1:
                self.cluster.send(Message(w.wid, self.worker_on(w.replica, s + 1), it, slot.mb, ACTIVATION, out))
            else:
                loss, g = mse_loss(out, self.data.targets(it, w.replica, slot.mb), cfg.micro_batches)
                w.losses[slot.mb] = loss
                w.loss_grads[slot.mb] = g
        else:
            if s == p - 1:
                g = w.loss_grads.pop(slot.mb)
            else:
                g = self.cluster.recv(w.wid, self.worker_on(w.replica, s + 1), it, slot.mb, GRADIENT)
            grad_out, pg = backward_stage(w.stage, g, (it, slot.mb))
            w.partials[slot.mb] = pg
            if s > 0:
                self.cluster.send(Message(w.wid, self.worker_on(w.replica, s - 1), it, slot.mb, GRADIENT, grad_out))

    def _run_slots_threaded(self, it: int) -> None:
        """One thread per worker; channels are blocking queues."""
        cfg = self.cfg
        p = cfg.stages
        chans: Dict[tuple, queue.Queue] = {}
        lock = threading.Lock()
        for w in self.workers.values():
            for nb in self.pipeline_neighbors(w.wid):
                chans[(w.wid, nb)] = queue.Queue()
        errors = []

        def send(msg: Message):
            if self.cluster.crosses_machines(msg.sender, msg.receiver):
                rec = self.make_record(msg)
                with lock:  # queues are per worker but the logger index is shared
                    self.logger.log_send(rec)
            chans[(msg.sender, msg.receiver)].put(msg)

        def recv(me, peer, mb, direction):
            msg = chans[(peer, me)].get(timeout=30)
            assert (msg.iteration, msg.mb, msg.direction) == (it, mb, direction)
            return msg.payload

        def body(w: Worker):
            try:
                s = w.stage_id
                for slot in self.schedule.slots[s]:
                    if slot.kind == BUBBLE:
                        with lock:
                            self.logger.on_bubble(w.wid)
                    elif slot.kind == FORWARD:
                        x = (
                            self.data.inputs(it, w.replica, slot.mb)
                            if s == 0
                            else recv(w.wid, self.worker_on(w.replica, s - 1), slot.mb, ACTIVATION)
                        )
                        out = forward_stage(w.stage, x, key=(it, slot.mb))
                        if s < p - 1:
                            send(Message(w.wid, self.worker_on(w.replica, s + 1), it, slot.mb, ACTIVATION, out))
                        else:
                            loss, g = mse_loss(out, self.data.targets(it, w.replica, slot.mb), cfg.micro_batches)
                            w.losses[slot.mb] = loss
                            w.loss_grads[slot.mb] = g
                    else:
                        g = (
                            w.loss_grads.pop(slot.mb)
                            if s == p - 1
                            else recv(w.wid, self.worker_on(w.replica, s + 1), slot.mb, GRADIENT)
                        )
                        grad_out, pg = backward_stage(w.stage, g, (it, slot.mb))
                        w.partials[slot.mb] = pg
                        if s > 0:
                            send(Message(w.wid, self.worker_on(w.replica, s - 1), it, slot.mb, GRADIENT, grad_out))
            except Exception as exc:  # surfaced after join
                errors.append(exc)

        threads = [threading.Thread(target=body, args=(w,)) for w in self.workers.values()]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if errors:
            raise errors[0]

    # -- detection --------------------------------------------------------
    def detect(self, event: FailureEvent, max_cycles: int = 2) -> FailureEvent:
        """Poll until every alive worker has seen the failure."""
        alive = self.cluster.alive_workers()
        for cycle in range(max_cycles):
            for wid in alive:
                self.cluster.probe(wid, self.pipeline_neighbors(wid) + self.replica_peers(wid))
                self.cluster.detect_failure(wid)
            if all(wid in event.detected_by for wid in alive):
                break
        return event
