"""Analytic end-to-end training time under injected failures.

Failures are placed on the failure-free progress axis, so every strategy
sees the same failure points for a given seed and only the per-failure
repair cost differs:

* GlobalCkpt: restart + reload + redo the work since the last checkpoint.
* CheckFreqLike / ElasticHorovodLike: frequent snapshots that slow every
  iteration down; a failure redoes the work since the last snapshot.
* Replication: restart + broadcast from a surviving replica.
* Logging / LoggingParallel: restart + reload, then replay only the failed
  scope, which runs at a fraction of the original iteration time.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InvalidConfig
from .numerics import derive_seed, rng

STRATEGIES = ("GlobalCkpt", "CheckFreqLike", "ElasticHorovodLike", "Replication", "Logging", "LoggingParallel")
SHIPPED = ("wide-resnet-50", "bert-128", "vit-128-32")
HOUR = 3600.0


@dataclass
class Workload:
    name: str
    total_iterations: int
    checkpoint_interval: int
    failure_free_hours: float
    checkpoint_cost: float  # seconds per global checkpoint
    init_time: float  # seconds to bring up a replacement and rejoin
    load_time: float  # seconds to load a checkpoint
    primary_strategy: str = "Replication"
    broadcast_time: float = 0.0
    snapshot_interval: int = 30
    snapshot_stall: float = 0.0  # seconds per snapshot
    snapshot_slowdown: Dict[str, float] = field(default_factory=dict)
    replay_fraction: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        times = (self.failure_free_hours, self.checkpoint_cost, self.init_time, self.load_time, self.broadcast_time)
        if any(t < 0 for t in times) or self.total_iterations < 1 or self.checkpoint_interval < 1:
            raise InvalidConfig(f"workload {self.name}: times must be >= 0 and counts >= 1")
        if self.primary_strategy not in STRATEGIES:
            raise InvalidConfig(f"workload {self.name}: unknown strategy {self.primary_strategy}")
        if self.iteration_time <= 0:
            raise InvalidConfig(f"workload {self.name}: checkpoint overhead exceeds the failure-free time")

    @property
    def iteration_time(self) -> float:
        """Seconds per iteration, net of the default checkpoint overhead."""
        ckpt = self.n_checkpoints(self.checkpoint_interval) * self.checkpoint_cost
        return (self.failure_free_hours * HOUR - ckpt) / self.total_iterations

    def n_checkpoints(self, interval: int) -> int:
        return self.total_iterations // interval

    def failure_free_seconds(self, interval: Optional[int] = None) -> float:
        interval = interval or self.checkpoint_interval
        return self.total_iterations * self.iteration_time + self.n_checkpoints(interval) * self.checkpoint_cost

    @classmethod
    def from_dict(cls, d: dict) -> "Workload":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(f"workload: {exc}") from None


def load_workload(name_or_path) -> Workload:
    """A shipped workload by name, or a JSON file."""
    if str(name_or_path) in SHIPPED:
        text = resources.files("ftrecover.data.workloads").joinpath(f"{name_or_path}.json").read_text()
    else:
        try:
            text = Path(name_or_path).read_text()
        except OSError as exc:
            raise InvalidConfig(f"cannot read workload {name_or_path}: {exc}") from None
    try:
        return Workload.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"workload {name_or_path}: {exc}") from None


@dataclass(frozen=True)
class FailureProcess:
    mtbf_hours: float
    seed: int = 0
    mode: str = "uniform"  # "uniform" | "exponential"

    def points(self, horizon: float, repetition: int) -> np.ndarray:
        """Failure positions (seconds of useful work) within ``horizon``."""
        if not math.isfinite(self.mtbf_hours) or self.mtbf_hours <= 0:
            return np.zeros(0)
        g = rng(derive_seed(self.seed, repetition))
        mtbf = self.mtbf_hours * HOUR
        if self.mode == "uniform":
            n = int(round(horizon / mtbf))
            return np.sort(g.uniform(0.0, horizon, size=n))
        if self.mode == "exponential":
            scale = mtbf / math.log(2.0)  # median of Exp(scale) is scale * ln 2
            out, t = [], 0.0
            while True:
                t += g.exponential(scale)
                if t >= horizon:
                    return np.array(out)
                out.append(t)
        raise InvalidConfig(f"unknown failure mode {self.mode!r}")


@dataclass
class SimResult:
    workload: str
    strategy: str
    mean_hours: float
    mean_failures: float
    totals_hours: List[float]
    breakdown_hours: Dict[str, float]  # mean over repetitions

    def to_dict(self) -> dict:
        return asdict(self)


def _failure_cost(w: Workload, strategy: str, work_pos: float, interval: int) -> Dict[str, float]:
    it = w.iteration_time
    since_ckpt = work_pos % (interval * it)
    if strategy == "GlobalCkpt":
        return {"restart": w.init_time + w.load_time, "lost_work": since_ckpt}
    if strategy in ("CheckFreqLike", "ElasticHorovodLike"):
        slow = 1.0 + w.snapshot_slowdown.get(strategy, 0.0)
        lost = (work_pos % (w.snapshot_interval * it)) * slow
        return {"restart": w.init_time + w.load_time, "lost_work": lost}
    if strategy == "Replication":
        return {"restart": w.init_time, "broadcast": w.broadcast_time}
    if strategy in ("Logging", "LoggingParallel"):
        frac = w.replay_fraction.get(strategy)
        if frac is None:
            raise InvalidConfig(f"workload {w.name} has no replay_fraction for {strategy}")
        return {"restart": w.init_time + w.load_time, "replay": since_ckpt * frac}
    raise InvalidConfig(f"unknown strategy {strategy!r}")


def _one_run(w: Workload, strategy: str, points: np.ndarray, interval: int) -> Dict[str, float]:
    parts = {"work": w.total_iterations * w.iteration_time, "checkpoints": w.n_checkpoints(interval) * w.checkpoint_cost}
    if strategy in ("CheckFreqLike", "ElasticHorovodLike"):
        slow = w.snapshot_slowdown.get(strategy, 0.0)
        n_snap = w.total_iterations // w.snapshot_interval
        parts["snapshots"] = parts["work"] * slow + n_snap * w.snapshot_stall
    for pos in points:
        for k, v in _failure_cost(w, strategy, float(pos), interval).items():
            parts[k] = parts.get(k, 0.0) + v
    return parts


def simulate_training(
    workload: Workload,
    strategy: str,
    failures: FailureProcess,
    repetitions: int = 10,
    checkpoint_interval: Optional[int] = None,
) -> SimResult:
    if strategy not in STRATEGIES:
        raise InvalidConfig(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if repetitions < 1:
        raise InvalidConfig("repetitions must be >= 1")
    interval = checkpoint_interval or workload.checkpoint_interval
    horizon = workload.total_iterations * workload.iteration_time
    totals, counts, sums = [], [], {}
    for rep in range(repetitions):
        points = failures.points(horizon, rep)
        parts = _one_run(workload, strategy, points, interval)
        totals.append(sum(parts.values()) / HOUR)
        counts.append(len(points))
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v / HOUR
    return SimResult(
        workload=workload.name,
        strategy=strategy,
        mean_hours=float(np.mean(totals)),
        mean_failures=float(np.mean(counts)),
        totals_hours=totals,
        breakdown_hours={k: v / repetitions for k, v in sorted(sums.items())},
    )


def speedup(workload: Workload, failures: FailureProcess, repetitions: int = 10, strategy: Optional[str] = None) -> dict:
    """Global checkpointing time over the workload's primary strategy time."""
    strategy = strategy or workload.primary_strategy
    base = simulate_training(workload, "GlobalCkpt", failures, repetitions)
    ours = simulate_training(workload, strategy, failures, repetitions)
    return {
        "workload": workload.name,
        "strategy": strategy,
        "failures": base.mean_failures,
        "global_ckpt_hours": base.mean_hours,
        "strategy_hours": ours.mean_hours,
        "speedup": base.mean_hours / ours.mean_hours,
    }


def sweep(
    workload: Workload,
    strategies: Sequence[str],
    axis: str,
    values: Sequence[float],
    failures: FailureProcess,
    repetitions: int = 10,
) -> List[dict]:
    """One row per (value, strategy) along ``checkpoint_interval`` or ``mtbf``."""
    if not values:
        raise InvalidConfig("sweep needs at least one value")
    if axis not in ("checkpoint_interval", "mtbf"):
        raise InvalidConfig(f"unknown sweep axis {axis!r}")
    rows = []
    for value in values:
        for strategy in strategies:
            if axis == "checkpoint_interval":
                res = simulate_training(workload, strategy, failures, repetitions, checkpoint_interval=int(value))
            else:
                proc = FailureProcess(float(value), failures.seed, failures.mode)
                res = simulate_training(workload, strategy, proc, repetitions)
            rows.append({axis: value, "strategy": strategy, "mean_hours": res.mean_hours, "mean_failures": res.mean_failures})
    return rows


def rows_to_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
