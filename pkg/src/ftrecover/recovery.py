"""Post-failure repair.

The coordinator runs after every alive worker has detected a failure:

1. consensus iteration = minimum survivor iteration;
2. survivors undo any uncommitted layer updates beyond it;
3. lost state is rebuilt by replica broadcast, by checkpoint load plus
   replay of logged inbound messages (optionally spread over helpers), or
   by a global rollback when neither is possible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np

from .cluster import ACTIVATION, GRADIENT, FailureEvent, FailurePhase, Message
from .errors import (
    CorruptLog,
    MissingLogData,
    NoCheckpoint,
    NonInvertibleHyper,
    NoReplica,
    NotInvertible,
    Unrecoverable,
)
from .model import Stage, accumulate_grads, backward_stage, forward_stage, mse_loss
from .optimizers import optimizer_undo
from .pipeline import BACKWARD, BUBBLE, FORWARD, allreduce_replicas, apply_layerwise_updates
from .resilience.store import read_stage_blob, write_stage_blob

REPLICATION = "Replication"
LOGGING_REPLAY = "LoggingReplay"
PARALLEL_REPLAY = "ParallelReplay"
GLOBAL_ROLLBACK = "GlobalRollback"


@dataclass
class RecoveryPlan:
    strategy: str
    target_iteration: int
    failed_machines: List[int]
    units: List[List[int]] = field(default_factory=list)
    checkpoint_iteration: Optional[int] = None
    helpers: int = 1
    assignments: Dict[int, List[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "target_iteration": self.target_iteration,
            "failed_machines": list(self.failed_machines),
            "units": [list(u) for u in self.units],
            "checkpoint_iteration": self.checkpoint_iteration,
            "helpers": self.helpers,
            "assignments": {str(k): v for k, v in sorted(self.assignments.items())},
        }


class _Cascade(Exception):
    """A machine died while a replay unit was in progress."""

    def __init__(self, machine: int):
        super().__init__(machine)
        self.machine = machine


# -- consensus and undo ----------------------------------------------------

def consensus_iteration(iterations: Iterable[int]) -> int:
    its = list(iterations)
    if not its:
        raise Unrecoverable("no surviving worker")
    return min(its)


def apply_undo(worker, target: int, hyper) -> int:
    """Bring ``worker`` back to ``target`` and commit; returns blocks undone.

    A worker ahead of the target undoes every flagged block; a worker that
    stopped mid-update undoes the layers it already touched.  A worker that
    finished its update and sits exactly at the target keeps it.
    """
    blocks = [b for _, b in worker.stage.blocks()]
    flagged = [b for b in blocks if b.updated_flag]
    undone = 0
    if worker.iteration > target or (flagged and len(flagged) < len(blocks)):
        for b in flagged:
            optimizer_undo(b, hyper)
            undone += 1
    for b in blocks:
        b.updated_flag = False
    worker.iteration = target
    return undone


# -- scope planning ---------------------------------------------------------

def replay_scope(job, failed: Iterable[int]) -> List[int]:
    """Machines that must reload and re-execute when ``failed`` are lost.

    Whole logging groups roll back (intra-group traffic is not logged) and
    all replicas of a replayed stage join, so the all-reduce can be redone.
    """
    scope: Set[int] = set(failed)
    while True:
        grown = set(scope)
        for mid in scope:
            grown.update(job.group_of(mid))
            for wid in job.cluster.machines[mid].worker_ids:
                for peer in job.replica_peers(wid):
                    grown.add(job.cluster.machine_of(peer))
        if grown == scope:
            return sorted(scope)
        scope = grown


def plan_multi_failure(job, failed: Iterable[int]) -> List[List[int]]:
    """Group failed machines into jointly replayed units.

    Failures whose scopes overlap or touch along the pipeline form one unit;
    the rest are recovered independently.
    """
    failed = sorted(set(failed))
    adj = job.machine_adjacency()
    scopes = {m: set(replay_scope(job, [m])) for m in failed}
    parent = {m: m for m in failed}

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for i, a in enumerate(failed):
        for b in failed[i + 1 :]:
            sa, sb = scopes[a], scopes[b]
            touching = sa & sb or any(adj[x] & sb for x in sa)
            if touching:
                parent[find(b)] = find(a)
    units: Dict[int, List[int]] = {}
    for m in failed:
        units.setdefault(find(m), []).append(m)
    return sorted(units.values())


def replication_donors(job, lost_workers: Sequence[int], failed: Set[int]) -> Dict[int, int]:
    donors = {}
    for wid in lost_workers:
        alive = [
            peer
            for peer in sorted(job.replica_peers(wid))
            if job.cluster.machine_of(peer) not in failed and job.cluster.is_alive(peer)
        ]
        if not alive:
            raise NoReplica(f"worker {wid} has no surviving replica")
        donors[wid] = alive[0]
    return donors


# -- strategies -------------------------------------------------------------

def recover_replication(job, failed: Sequence[int], target: int) -> Dict[int, int]:
    """Broadcast surviving replica state into replacement machines."""
    failed_set = set(failed)
    lost = [w for m in failed for w in job.cluster.machines[m].worker_ids]
    donors = replication_donors(job, lost, failed_set)
    for mid in failed:
        job.replace_machine(mid)
    for wid, donor in donors.items():
        src = job.workers[donor]
        assert src.iteration == target
        job.workers[wid].stage = src.stage.copy()
        job.workers[wid].iteration = target
    return donors


def required_inbound(job, scope_workers: Set[int], lo: int, hi: int) -> Set[tuple]:
    """Keys of every message a replay of ``scope_workers`` reads from outside."""
    cfg = job.cfg
    keys = set()
    for wid in sorted(scope_workers):
        rep, s = cfg.worker_coords(wid)
        links = []
        if s > 0:
            prev = job.worker_on(rep, s - 1)
            if prev not in scope_workers:
                links.append((prev, ACTIVATION))
        if s < cfg.stages - 1:
            nxt = job.worker_on(rep, s + 1)
            if nxt not in scope_workers:
                links.append((nxt, GRADIENT))
        for sender, direction in links:
            for it in range(lo, hi):
                for mb in range(cfg.micro_batches):
                    keys.add((sender, wid, it, mb, direction))
    return keys


class _ReplayEngine:
    """Re-executes a set of workers from a checkpoint with logged inputs.

    Each lane holds a full copy of the scope's stages and computes the
    micro-batches ``mb % d == lane``; gradients are merged in ascending
    micro-batch order and every lane applies the same step, so d lanes give
    the same bits as one.
    """

    def __init__(self, job, scope_workers: Set[int], fresh_machines: Set[int], inbound: Dict[tuple, np.ndarray]):
        self.job = job
        self.scope = scope_workers
        self.fresh = fresh_machines
        self.inbound = inbound

    def _relog(self, msg: Message) -> None:
        job = self.job
        sm = job.cluster.machine_of(msg.sender)
        rm = job.cluster.machine_of(msg.receiver)
        if sm in self.fresh and sm != rm and job.logger.is_logged_boundary(sm, rm):
            job.logger.log_send(job.make_record(msg))

    def _run_lane(self, stages: Dict[int, Stage], it: int, mbs: Set[int], partials: Dict[int, dict], relog: bool):
        job, cfg = self.job, self.job.cfg
        p = cfg.stages
        internal: Dict[tuple, np.ndarray] = {}
        loss_grads: Dict[tuple, np.ndarray] = {}
        for t in range(job.schedule.length):
            for rep in range(cfg.replicas):
                for s in range(p):
                    wid = job.worker_on(rep, s)
                    slot = job.schedule.slots[s][t]
                    if wid not in self.scope or slot.kind == BUBBLE or slot.mb not in mbs:
                        continue
                    mb = slot.mb
                    stage = stages[wid]
                    if slot.kind == FORWARD:
                        if s == 0:
                            x = job.data.inputs(it, rep, mb)
                        else:
                            prev = job.worker_on(rep, s - 1)
                            key = (prev, wid, it, mb, ACTIVATION)
                            x = internal.pop(key) if prev in self.scope else self.inbound[key]
                        out = forward_stage(stage, x, key=(it, mb))
                        if s < p - 1:
                            nxt = job.worker_on(rep, s + 1)
                            msg = Message(wid, nxt, it, mb, ACTIVATION, out)
                            if relog:
                                self._relog(msg)
                            if nxt in self.scope:
                                internal[msg.key] = out
                        else:
                            _, g = mse_loss(out, job.data.targets(it, rep, mb), cfg.micro_batches)
                            loss_grads[(wid, mb)] = g
                    elif slot.kind == BACKWARD:
                        if s == p - 1:
                            g = loss_grads.pop((wid, mb))
                        else:
                            nxt = job.worker_on(rep, s + 1)
                            key = (nxt, wid, it, mb, GRADIENT)
                            g = internal.pop(key) if nxt in self.scope else self.inbound[key]
                        grad_out, pg = backward_stage(stage, g, (it, mb))
                        partials[wid][mb] = pg
                        if s > 0:
                            prev = job.worker_on(rep, s - 1)
                            msg = Message(wid, prev, it, mb, GRADIENT, grad_out)
                            if relog:
                                self._relog(msg)
                            if prev in self.scope:
                                internal[msg.key] = grad_out
        assert not internal and not loss_grads, "replay left unconsumed messages"

    def replay_iteration(self, lanes: List[Dict[int, Stage]], it: int) -> None:
        job, cfg = self.job, self.job.cfg
        d = len(lanes)
        partials = {wid: {} for wid in self.scope}
        for lane, stages in enumerate(lanes):
            mbs = {mb for mb in range(cfg.micro_batches) if mb % d == lane}
            if mbs:
                self._run_lane(stages, it, mbs, partials, relog=True)
        grads = {
            wid: accumulate_grads([partials[wid][mb] for mb in range(cfg.micro_batches)])
            for wid in self.scope
        }
        for s in sorted({cfg.worker_coords(w)[1] for w in self.scope}):
            members = [job.worker_on(rep, s) for rep in range(cfg.replicas)]
            assert all(w in self.scope for w in members), "replay scope must hold every replica"
            synced = allreduce_replicas([grads[w] for w in members])
            for w in members:
                grads[w] = synced
        for stages in lanes:
            for wid in sorted(self.scope):
                stage = stages[wid]
                apply_layerwise_updates(stage, grads[wid], job.hyper)
                for _, b in stage.blocks():
                    b.updated_flag = False
                stage.cache.clear()
        for mid in sorted(self.fresh):
            for wid in job.cluster.machines[mid].worker_ids:
                job.logger.flush(wid)


def _publish_survivor_logs(job) -> None:
    for wid in job.cluster.alive_workers():
        job.logger.flush(wid)
    job.store.clear_logs()
    for mid, machine in sorted(job.cluster.machines.items()):
        if machine.alive:
            job.store.publish_logs(job.logger.local[mid])


def recover_replay(job, unit: Sequence[int], target: int, manifest, helpers: int = 1, fresh: Optional[Set[int]] = None, cascade=None) -> dict:
    """Rebuild the machines in ``unit`` from a checkpoint plus logged inputs.

    ``helpers`` > 1 spreads each replayed iteration's micro-batches over the
    replacement and ``helpers - 1`` surviving machines, which snapshot their
    own state first and restore it afterwards.
    """
    cfg = job.cfg
    fresh = set() if fresh is None else fresh
    scope = replay_scope(job, unit)
    scope_workers = {w for m in scope for w in job.cluster.machines[m].worker_ids}
    k = manifest.iteration

    for mid in scope:
        if not job.cluster.machines[mid].alive:
            job.replace_machine(mid)
            fresh.add(mid)
        elif mid in fresh:
            job.logger.local[mid].discard_from(0)  # drop re-logs from an aborted attempt
    _publish_survivor_logs(job)

    needed = required_inbound(job, scope_workers, k, target)
    scope_machines = set(scope)
    inbound = {}
    for rec in job.store.fetch_logs(scope, k, target):
        if rec.key in needed and job.cluster.machine_of(rec.sender_worker) not in scope_machines:
            inbound[rec.key] = rec.payload
    missing = needed - inbound.keys()
    if missing:
        first = min(missing, key=lambda key: (key[2], key[3], key[4], key[0], key[1]))
        raise MissingLogData(f"{len(missing)} inbound messages missing, first {first}")

    loaded = job.store.load_checkpoint(manifest, sorted(scope_workers))
    survivors = [
        m for m, mach in sorted(job.cluster.machines.items()) if mach.alive and m not in scope_machines
    ]
    d = max(1, min(helpers, 1 + len(survivors)))
    helper_machines = survivors[: d - 1]
    lanes = [loaded] + [{w: st.copy() for w, st in loaded.items()} for _ in helper_machines]

    snapshots = {}
    for mid in helper_machines:
        snap_dir = job.cluster.machines[mid].local_disk / "helper_snapshot"
        snap_dir.mkdir(exist_ok=True)
        for wid in job.cluster.machines[mid].worker_ids:
            path = snap_dir / f"worker{wid:04d}.ckpt"
            write_stage_blob(path, job.workers[wid].stage, {"worker": wid, "stage": job.workers[wid].stage.stage_id})
            snapshots[wid] = path

    engine = _ReplayEngine(job, scope_workers, fresh & scope_machines, inbound)
    try:
        for n, it in enumerate(range(k, target)):
            if cascade is not None:
                cascade(n, scope_machines, helper_machines)
            engine.replay_iteration(lanes, it)
        if cascade is not None:
            cascade(target - k, scope_machines, helper_machines)
    finally:
        for wid, path in snapshots.items():
            if job.cluster.is_alive(wid):
                job.workers[wid].stage, _ = read_stage_blob(path)
                path.unlink()

    for wid in scope_workers:
        job.workers[wid].stage = lanes[0][wid]
        job.workers[wid].iteration = target
    return {
        "scope_machines": sorted(scope_machines),
        "iterations_replayed": target - k,
        "helpers": d,
        "helper_machines": helper_machines,
        "assignments": {lane: [mb for mb in range(cfg.micro_batches) if mb % d == lane] for lane in range(d)},
    }


def recover_parallel(job, unit: Sequence[int], target: int, manifest, helpers: Optional[int] = None, **kw) -> dict:
    d = helpers if helpers is not None else job.cfg.micro_batches
    return recover_replay(job, unit, target, manifest, helpers=d, **kw)


def global_rollback(job, manifest) -> int:
    """Every worker reloads the checkpoint; training resumes from it."""
    k = manifest.iteration
    for mid, machine in sorted(job.cluster.machines.items()):
        if not machine.alive:
            job.replace_machine(mid)
    loaded = job.store.load_checkpoint(manifest, sorted(job.workers))
    for wid, stage in loaded.items():
        job.workers[wid].stage = stage
        job.workers[wid].iteration = k
    _discard_from(job, k)
    return k


def _discard_from(job, iteration: int) -> None:
    for log in job.logger.local.values():
        log.discard_from(iteration)
    for q in job.logger.queues.values():
        q.drop_from(iteration)
    job.store.discard_logs_from(iteration)


def _finish(job, target: int) -> None:
    for w in job.workers.values():
        for _, b in w.stage.blocks():
            b.updated_flag = False
    job.clear_volatile()
    job.cluster.clear_failure_state()
    job.next_iteration = target
    job.trajectory[target] = job.digest()


# -- coordinator ------------------------------------------------------------

def choose_strategy(job, failed: Sequence[int]) -> str:
    cfg = job.cfg
    lost = [w for m in failed for w in job.cluster.machines[m].worker_ids]
    replicable = True
    try:
        replication_donors(job, lost, set(failed))
    except NoReplica:
        replicable = False
    can_log = cfg.logging_enabled and all(
        len(replay_scope(job, u)) < cfg.machines for u in plan_multi_failure(job, failed)
    )
    replay = PARALLEL_REPLAY if cfg.parallel_recovery else LOGGING_REPLAY
    if cfg.strategy == "global":
        return GLOBAL_ROLLBACK
    if cfg.strategy == "logging":
        return replay if can_log else GLOBAL_ROLLBACK
    if replicable:
        return REPLICATION
    return replay if can_log else GLOBAL_ROLLBACK


def recover(job, event: FailureEvent, skip_undo: bool = False) -> dict:
    """Repair the job after ``event``; returns a deterministic report."""
    started = time.perf_counter()
    cfg = job.cfg
    failed = sorted(event.machine_ids)
    survivors = job.cluster.alive_workers()
    target = consensus_iteration(job.workers[w].iteration for w in survivors)
    report = {
        "failure": event.to_dict(),
        "detected_by": {str(w): how for w, how in sorted(event.detected_by.items())},
        "consensus_iteration": target,
        "fallback": None,
        "cascades": [],
    }

    undone = 0
    strategy = choose_strategy(job, failed)
    if not skip_undo:
        try:
            for wid in survivors:
                undone += apply_undo(job.workers[wid], target, job.hyper)
        except (NotInvertible, NonInvertibleHyper) as exc:
            report["fallback"] = f"undo impossible: {exc}"
            strategy = GLOBAL_ROLLBACK
    else:
        for wid in survivors:
            w = job.workers[wid]
            for _, b in w.stage.blocks():
                b.updated_flag = False
            w.iteration = target
    report["undone_blocks"] = undone

    plan = RecoveryPlan(strategy, target, failed)
    try:
        manifest = job.store.latest_checkpoint(at_or_before=target)
    except NoCheckpoint:
        manifest = None
    plan.checkpoint_iteration = None if manifest is None else manifest.iteration

    if strategy == REPLICATION:
        try:
            donors = recover_replication(job, failed, target)
            report["donors"] = {str(w): d for w, d in sorted(donors.items())}
        except NoReplica as exc:  # pragma: no cover - choose_strategy checked this
            report["fallback"] = str(exc)
            strategy = GLOBAL_ROLLBACK

    if strategy in (LOGGING_REPLAY, PARALLEL_REPLAY):
        if manifest is None:
            raise Unrecoverable("no committed checkpoint to replay from")
        survivor_digest = _survivor_digests(job, failed)
        try:
            units, details = _replay_units(job, failed, target, manifest, strategy, report)
            plan.units = units
            plan.helpers = max(d["helpers"] for d in details)
            plan.assignments = details[0]["assignments"]
            report["replay"] = details
            report["iterations_replayed"] = target - manifest.iteration
            touched = {m for d in details for m in d["scope_machines"]}
            after = _survivor_digests(job, touched)
            report["survivors_unchanged"] = all(
                after[m] == survivor_digest[m] for m in after if m in survivor_digest
            )
        except MissingLogData as exc:
            report["fallback"] = f"missing log data: {exc}"
            strategy = GLOBAL_ROLLBACK

    if strategy == GLOBAL_ROLLBACK:
        if manifest is None:
            raise Unrecoverable("no committed checkpoint for global rollback")
        try:
            resume = global_rollback(job, manifest)
        except (CorruptLog, NoCheckpoint) as exc:
            raise Unrecoverable(f"checkpoint {manifest.iteration} unusable: {exc}") from exc
        report["iterations_rolled_back"] = target - resume
        _finish(job, resume)
    else:
        _discard_from(job, target)
        _finish(job, target)

    plan.strategy = strategy
    report["strategy"] = strategy
    report["plan"] = plan.to_dict()
    report["state_digest"] = job.trajectory[job.next_iteration]
    report["resume_iteration"] = job.next_iteration
    job.timings.append({"failure_iteration": event.iteration, "seconds": time.perf_counter() - started})
    return report


def _survivor_digests(job, exclude: Iterable[int]) -> Dict[int, str]:
    skip = set(exclude)
    return {
        m: job.machine_digest(m)
        for m, mach in sorted(job.cluster.machines.items())
        if mach.alive and m not in skip
    }


def _replay_units(job, failed, target, manifest, strategy, report):
    cfg = job.cfg
    pending = [inj for inj in cfg.failures if inj.during_recovery]
    fired = job.fired_cascades
    queue = plan_multi_failure(job, failed)
    done_units, details = [], []
    fresh: Set[int] = set()
    helpers = 1
    if strategy == PARALLEL_REPLAY:
        helpers = cfg.helpers if cfg.helpers is not None else cfg.micro_batches

    while queue:
        unit = queue.pop(0)

        def cascade(n, scope, helper_machines):
            for idx, inj in enumerate(pending):
                if idx in fired or inj.after_replayed != n:
                    continue
                if not job.cluster.machines[inj.machine].alive:
                    fired.add(idx)
                    continue
                fired.add(idx)
                job.kill(inj.machine, target, FailurePhase("DuringRecovery", n))
                adj = job.machine_adjacency()
                touching = inj.machine in scope or any(inj.machine in adj[m] for m in scope)
                report["cascades"].append(
                    {"machine": inj.machine, "after_replayed": n, "merged": bool(touching)}
                )
                if touching or inj.machine in helper_machines:
                    raise _Cascade(inj.machine)
                queue.append([inj.machine])

        try:
            details.append(recover_replay(job, unit, target, manifest, helpers, fresh, cascade))
            done_units.append(sorted(unit))
        except _Cascade as exc:
            adj = job.machine_adjacency()
            scope = replay_scope(job, unit)
            if exc.machine in scope or any(exc.machine in adj[m] for m in scope):
                queue.insert(0, sorted(set(unit) | {exc.machine}))
            else:
                queue.insert(0, unit)
                queue.append([exc.machine])
    return done_units, details
