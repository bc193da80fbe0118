"""End-to-end scenario runs: train, inject, recover, report."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from .cluster import FailureEvent
from .config import RunConfig, parse_config
from .job import TrainingJob
from .numerics import max_rel_error
from .recovery import recover


@dataclass
class RunResult:
    job: TrainingJob
    recoveries: List[dict] = field(default_factory=list)

    @property
    def trajectory(self) -> Dict[int, str]:
        return self.job.trajectory

    def report(self) -> dict:
        job = self.job
        return {
            "name": job.cfg.name,
            "iterations": job.next_iteration,
            "final_digest": job.trajectory.get(job.next_iteration),
            "groups": job.groups,
            "checkpoints": job.store.committed_iterations(),
            "recoveries": self.recoveries,
            "losses": {str(k): v for k, v in sorted(job.losses.items())},
        }


def ghost_config(cfg: RunConfig) -> RunConfig:
    """The same run with every failure injection removed."""
    raw = copy.deepcopy(cfg.raw)
    raw["failures"] = []
    return parse_config(raw)


def run_training(
    cfg: RunConfig,
    root: Union[str, Path],
    until: Optional[int] = None,
    skip_undo: bool = False,
    on_iteration: Optional[Callable[[TrainingJob], None]] = None,
) -> RunResult:
    job = TrainingJob(cfg, root)
    job.validate_injections()
    result = RunResult(job)
    stop = cfg.iterations if until is None else min(until, cfg.iterations)
    while job.next_iteration < stop:
        it = job.next_iteration
        if it % cfg.checkpoint_interval == 0 and it not in job.store.committed_iterations():
            job.checkpoint(it)
        out = job.run_iteration(it, job._injection_for(it))
        if isinstance(out, FailureEvent):
            result.recoveries.append(recover(job, out, skip_undo=skip_undo))
        if on_iteration is not None:
            on_iteration(job)
    return result


def write_outputs(result: RunResult, out_dir: Union[str, Path]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = {str(k): v for k, v in sorted(result.trajectory.items())}
    (out / "trajectory.json").write_text(json.dumps(traj, indent=1, sort_keys=True) + "\n")
    (out / "report.json").write_text(json.dumps(result.report(), indent=1, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps(result.job.timings, indent=1) + "\n")


def compare_states(a: TrainingJob, b: TrainingJob) -> dict:
    """Bit equality and worst relative error between two jobs' parameters."""
    worst = 0.0
    identical = True
    for wid in sorted(a.workers):
        for (_, x), (_, y) in zip(a.workers[wid].stage.blocks(), b.workers[wid].stage.blocks()):
            for u, v in ((x.x, y.x), (x.m, y.m), (x.v, y.v)):
                if not np.array_equal(u, v):
                    identical = False
                    worst = max(worst, max_rel_error(u, v))
    return {"bit_identical": identical, "max_rel_error": worst}


def verify(cfg: RunConfig, root: Union[str, Path], tolerance: float = 1e-9) -> dict:
    """Run ``cfg`` and its ghost; compare final states and digests."""
    root = Path(root)
    run = run_training(cfg, root / "run")
    ghost = run_training(ghost_config(cfg), root / "ghost")
    cmp = compare_states(run.job, ghost.job)
    common = sorted(set(run.trajectory) & set(ghost.trajectory))
    mismatched = [it for it in common if run.trajectory[it] != ghost.trajectory[it]]
    undo_paths = any(r.get("undone_blocks", 0) for r in run.recoveries)
    passed = cmp["bit_identical"] or (undo_paths and cmp["max_rel_error"] <= tolerance)
    return {
        "name": cfg.name,
        "recoveries": [
            {k: r.get(k) for k in ("strategy", "consensus_iteration", "iterations_replayed", "undone_blocks")}
            for r in run.recoveries
        ],
        "bit_identical": cmp["bit_identical"],
        "max_rel_error": cmp["max_rel_error"],
        "digest_mismatches": len(mismatched),
        "passed": bool(passed),
    }
