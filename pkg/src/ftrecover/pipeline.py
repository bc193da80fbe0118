"""1F1B pipeline schedule, replica all-reduce and wait-free layer-wise updates."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np

from .errors import ChannelBroken, InvalidConfig
from .model import LayerGrads, Stage
from .numerics import ordered_sum
from .optimizers import OptimizerHyper, optimizer_step

FORWARD = "F"
BACKWARD = "B"
BUBBLE = "-"


@dataclass(frozen=True)
class Slot:
    kind: str
    mb: int = -1

    def __str__(self):
        return BUBBLE if self.kind == BUBBLE else f"{self.kind}{self.mb}"


@dataclass
class Schedule:
    p: int
    m: int
    slots: List[List[Slot]]  # slots[stage][time]

    @property
    def length(self) -> int:
        return len(self.slots[0])

    def bubble_count(self, stage: Optional[int] = None) -> int:
        rows = self.slots if stage is None else [self.slots[stage]]
        return sum(1 for row in rows for s in row if s.kind == BUBBLE)

    def bubble_fraction(self) -> Fraction:
        return Fraction(self.bubble_count(), self.p * self.length)

    def validate(self) -> None:
        """Raise AssertionError when a per-slot invariant is violated."""
        when = {}
        for s, row in enumerate(self.slots):
            assert len(row) == self.length
            seen = {FORWARD: [], BACKWARD: []}
            in_flight = peak = 0
            for t, slot in enumerate(row):
                if slot.kind == BUBBLE:
                    continue
                seen[slot.kind].append(slot.mb)
                when[(slot.kind, s, slot.mb)] = t
                in_flight += 1 if slot.kind == FORWARD else -1
                peak = max(peak, in_flight)
            assert sorted(seen[FORWARD]) == list(range(self.m)), f"stage {s} forwards"
            assert sorted(seen[BACKWARD]) == list(range(self.m)), f"stage {s} backwards"
            assert peak <= self.p - s, f"stage {s} holds {peak} micro-batches in flight"
        for mb in range(self.m):
            for s in range(self.p):
                if s > 0:
                    assert when[(FORWARD, s - 1, mb)] < when[(FORWARD, s, mb)]
                if s < self.p - 1:
                    assert when[(BACKWARD, s + 1, mb)] < when[(BACKWARD, s, mb)]
                assert when[(FORWARD, s, mb)] < when[(BACKWARD, s, mb)]

    def render(self) -> str:
        """Text grid, one row per stage (P0 on top)."""
        width = max(len(str(s)) for row in self.slots for s in row)
        lines = []
        for s, row in enumerate(self.slots):
            cells = " ".join(str(slot).rjust(width) for slot in row)
            lines.append(f"P{s}: {cells}")
        return "\n".join(lines)


def _stage_program(p: int, m: int, s: int) -> List[Slot]:
    warmup = min(p - s - 1, m)
    prog = [Slot(FORWARD, i) for i in range(warmup)]
    for i in range(m - warmup):
        prog.append(Slot(FORWARD, warmup + i))
        prog.append(Slot(BACKWARD, i))
    prog.extend(Slot(BACKWARD, i) for i in range(m - warmup, m))
    return prog


def build_1f1b_schedule(p: int, m: int) -> Schedule:
    """Place each stage's 1F1B program as early as its dependencies allow."""
    if p < 1 or m < 1:
        raise InvalidConfig(f"need p >= 1 and m >= 1, got p={p}, m={m}")
    programs = [_stage_program(p, m, s) for s in range(p)]
    cursor = [0] * p
    done = {}
    rows: List[List[Slot]] = [[] for _ in range(p)]
    t = 0
    while any(cursor[s] < len(programs[s]) for s in range(p)):
        for s in range(p):
            if cursor[s] >= len(programs[s]):
                rows[s].append(Slot(BUBBLE))
                continue
            op = programs[s][cursor[s]]
            if op.kind == FORWARD:
                dep = (FORWARD, s - 1, op.mb) if s > 0 else None
            else:
                dep = (BACKWARD, s + 1, op.mb) if s < p - 1 else (FORWARD, s, op.mb)
            if dep is None or done.get(dep, t) < t:
                rows[s].append(op)
                done[(op.kind, s, op.mb)] = t
                cursor[s] += 1
            else:
                rows[s].append(Slot(BUBBLE))
        t += 1
    return Schedule(p, m, rows)


def bubble_ratio(p: int, m: int) -> Fraction:
    if p < 1 or m < 1:
        raise InvalidConfig(f"need p >= 1 and m >= 1, got p={p}, m={m}")
    return Fraction(p - 1, m + p - 1)


def allreduce_replicas(member_grads: Sequence[LayerGrads], alive: Sequence[bool] = None) -> LayerGrads:
    """Mean of replica gradients, summed in ascending rank order.

    Every member gets the same arrays (gather, ordered sum, broadcast), so the
    result is bit-identical across members and runs.
    """
    if alive is not None and not all(alive):
        raise ChannelBroken("all-reduce member is dead")
    n = len(member_grads)
    if n == 1:
        return member_grads[0]
    out = []
    for i in range(len(member_grads[0])):
        dw = ordered_sum([g[i][0] for g in member_grads]) / n
        db = ordered_sum([g[i][1] for g in member_grads]) / n
        out.append((dw, db))
    return out


def apply_layerwise_updates(
    stage: Stage,
    grads: LayerGrads,
    hyper: OptimizerHyper,
    interrupt_after: Optional[int] = None,
) -> int:
    """Update layers last-to-first, as gradients become ready in backprop.

    Stops after ``interrupt_after`` layers when given; returns how many layers
    were updated.
    """
    n = len(stage.layers)
    limit = n if interrupt_after is None else max(0, min(interrupt_after, n))
    done = 0
    for i in range(n - 1, n - 1 - limit, -1):
        layer = stage.layers[i]
        dw, db = grads[i]
        optimizer_step(layer.weight, dw, hyper)
        optimizer_step(layer.bias, db, hyper)
        done += 1
    return done


def updated_flags(stage: Stage) -> List[bool]:
    return [layer.weight.updated_flag and layer.bias.updated_flag for layer in stage.layers]


def stage_digest_arrays(stage: Stage) -> List[np.ndarray]:
    return [arr for _, b in stage.blocks() for arr in (b.x, b.m, b.v)]
