"""Selective logging: choose machine groups under a storage budget.

Messages crossing a group boundary are logged; merging two adjacent groups
drops that boundary's log (saving space) but a failure in the merged group
must replay both halves (costing recovery time).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

from .errors import InvalidConfig, TooLarge
from .pipeline import bubble_ratio

ORACLE_MAX_N = 12


@dataclass(frozen=True)
class Profile:
    N: int
    R: Sequence[float]  # per-machine recovery compute seconds per iteration
    M: Sequence[float]  # bytes per iteration across boundary i|i+1
    B: float  # bytes/s
    T: int  # checkpoint interval, iterations
    M_max: float  # bytes
    parallel: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise InvalidConfig("N must be >= 1")
        if len(self.R) != self.N or len(self.M) != self.N - 1:
            raise InvalidConfig(f"need {self.N} R values and {self.N - 1} M values")
        if any(r <= 0 for r in self.R):
            raise InvalidConfig("R must be > 0")
        if any(m < 0 for m in self.M):
            raise InvalidConfig("M must be >= 0")
        if self.B <= 0 or self.T < 1 or self.M_max < 0:
            raise InvalidConfig("need B > 0, T >= 1, M_max >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "Profile":
        try:
            return cls(
                N=int(d["N"]),
                R=tuple(float(x) for x in d["R"]),
                M=tuple(float(x) for x in d["M"]),
                B=float(d["B"]),
                T=int(d["T"]),
                M_max=float(d["M_max"]),
                parallel=bool(d.get("parallel", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"profile: {exc}") from None


def load_profile(path) -> Profile:
    try:
        return Profile.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read {path}: {exc}") from None


@dataclass
class GroupPlan:
    groups: List[List[int]]
    group_R: List[float]
    est_recovery_time: float  # expected seconds per lost iteration
    est_storage: float  # bytes
    N: int
    parallel: bool = False
    trace: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "groups": self.groups,
            "group_recovery_time": self.group_R,
            "est_recovery_time": self.est_recovery_time,
            "est_storage": self.est_storage,
            "parallel": self.parallel,
            # parallel replay is assumed to scale linearly over floor(N/|G|) helpers
            "assumes_linear_parallel_scaling": self.parallel,
            "trace": self.trace,
        }


def _weight(size: int, n: int, parallel: bool) -> float:
    w = size / n
    if parallel:
        w /= n // size  # linear speedup over floor(N/|G|) data-parallel helpers
    return w


def _evaluate(profile: Profile, groups: List[List[int]]):
    """Per-group R, the expected recovery time and storage of ``groups``."""
    R, M, B = profile.R, profile.M, profile.B
    group_R = []
    for g in groups:
        internal = sum(M[i] for i in range(g[0], g[-1]))
        group_R.append(sum(R[i] for i in g) + internal / B)
    expected = sum(r * _weight(len(g), profile.N, profile.parallel) for g, r in zip(groups, group_R))
    storage = profile.T * sum(M[g[-1]] for g in groups[:-1])
    return group_R, expected, storage


def _plan(profile: Profile, groups: List[List[int]], trace=None) -> GroupPlan:
    group_R, expected, storage = _evaluate(profile, groups)
    return GroupPlan([list(g) for g in groups], group_R, expected, storage, profile.N, profile.parallel, trace or [])


def group_machines(profile: Profile) -> GroupPlan:
    """Greedy merge of the adjacent pair with the smallest dR/dM."""
    N = profile.N
    groups = [[i] for i in range(N)]
    group_R = list(profile.R)
    storage = profile.T * sum(profile.M)
    trace = []
    while storage > profile.M_max and len(groups) > 1:
        best = None
        for i in range(len(groups) - 1):
            a, b = groups[i], groups[i + 1]
            m = profile.M[a[-1]]
            dM = m * profile.T
            if dM <= 0:
                continue  # nothing saved by dropping an empty boundary
            merged = group_R[i] + group_R[i + 1] + m / profile.B
            dR = (
                merged * _weight(len(a) + len(b), N, profile.parallel)
                - group_R[i] * _weight(len(a), N, profile.parallel)
                - group_R[i + 1] * _weight(len(b), N, profile.parallel)
            )
            ratio = dR / dM
            if best is None or ratio < best[0]:
                best = (ratio, i, merged, dR, dM)
        ratio, i, merged, dR, dM = best
        groups[i : i + 2] = [groups[i] + groups[i + 1]]
        group_R[i : i + 2] = [merged]
        storage = profile.T * sum(profile.M[g[-1]] for g in groups[:-1])
        trace.append(
            {"merged": list(groups[i]), "delta_R": dR, "delta_M": dM, "ratio": ratio, "storage": storage}
        )
    return _plan(profile, groups, trace)


def recovery_time_estimate(plan: GroupPlan, lost_iterations: int) -> float:
    """Expected replay seconds for a uniformly random single-machine failure."""
    return lost_iterations * plan.est_recovery_time


def _partitions(n: int):
    for cuts in itertools.product((False, True), repeat=n - 1):
        groups, cur = [], [0]
        for i, cut in enumerate(cuts, start=1):
            if cut:
                groups.append(cur)
                cur = [i]
            else:
                cur.append(i)
        groups.append(cur)
        yield groups


def brute_force_group_oracle(profile: Profile) -> GroupPlan:
    """Best feasible contiguous partition by exhaustive search (test oracle)."""
    if profile.N > ORACLE_MAX_N:
        raise TooLarge(f"oracle enumerates 2^(N-1) partitions; N={profile.N} > {ORACLE_MAX_N}")
    best = None
    for groups in _partitions(profile.N):
        _, expected, storage = _evaluate(profile, groups)
        if storage <= profile.M_max and (best is None or expected < best[0]):
            best = (expected, groups)
    return _plan(profile, best[1])


def oracle_gap(greedy: GroupPlan, oracle: GroupPlan) -> float:
    """Greedy recovery time over the optimum (>= 1.0)."""
    return greedy.est_recovery_time / oracle.est_recovery_time


# -- is logging worth it ----------------------------------------------------

@dataclass(frozen=True)
class ActivationShape:
    micro_batch_size: int
    hidden_size: int
    sequence_length: int
    bytes_per_element: int = 4

    @property
    def elements(self) -> int:
        return self.micro_batch_size * self.hidden_size * self.sequence_length

    @property
    def message_bytes(self) -> int:
        return self.elements * self.bytes_per_element


def logging_bytes_per_iteration(shape: ActivationShape, micro_batches: int, boundaries: int) -> int:
    """Activations forward plus gradients backward over ``boundaries`` links."""
    return shape.message_bytes * micro_batches * boundaries * 2


def logging_worthwhile(
    shape: ActivationShape,
    pcie_bandwidth: float,
    p: int,
    m: int,
    iteration_time: float,
    boundaries_per_machine: int = 1,
) -> dict:
    """Can one machine's per-iteration log leave the GPU within its bubbles?"""
    if pcie_bandwidth <= 0 or iteration_time <= 0:
        raise InvalidConfig("bandwidth and iteration time must be positive")
    log_bytes = logging_bytes_per_iteration(shape, m, boundaries_per_machine)
    transfer = log_bytes / pcie_bandwidth
    bubble = float(bubble_ratio(p, m)) * iteration_time
    return {
        "worthwhile": transfer <= bubble if log_bytes > 0 else True,
        "elements_per_message": shape.elements,
        "log_bytes_per_iteration": log_bytes,
        "transfer_seconds": transfer,
        "bubble_seconds": bubble,
    }
