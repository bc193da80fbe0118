from fractions import Fraction

import numpy as np
import pytest

from ftrecover.errors import ChannelBroken, InvalidConfig
from ftrecover.model import build_stage
from ftrecover.optimizers import OptimizerHyper
from ftrecover.pipeline import (
    allreduce_replicas,
    apply_layerwise_updates,
    bubble_ratio,
    build_1f1b_schedule,
    updated_flags,
)

FOUR_BY_FOUR = """\
P0: F0 F1 F2 F3  -  -  - B0  - B1  - B2  - B3
P1:  - F0 F1 F2  -  - B0 F3 B1  - B2  - B3  -
P2:  -  - F0 F1  - B0 F2 B1 F3 B2  - B3  -  -
P3:  -  -  - F0 B0 F1 B1 F2 B2 F3 B3  -  -  -"""


def test_four_by_four_schedule_grid():
    sched = build_1f1b_schedule(4, 4)
    assert sched.render() == FOUR_BY_FOUR
    assert sched.length == 14
    assert bubble_ratio(4, 4) == Fraction(3, 7)


@pytest.mark.parametrize("p,m", [(1, 1), (1, 5), (2, 1), (3, 8), (8, 4), (5, 2)])
def test_schedule_invariants(p, m):
    sched = build_1f1b_schedule(p, m)
    sched.validate()
    assert sched.bubble_fraction() == bubble_ratio(p, m)
    assert sched.length == 2 * (m + p - 1)


def test_single_stage_has_no_bubbles():
    assert bubble_ratio(1, 7) == 0
    assert build_1f1b_schedule(1, 7).bubble_count() == 0


def test_bad_schedule_arguments():
    with pytest.raises(InvalidConfig):
        build_1f1b_schedule(0, 4)
    with pytest.raises(InvalidConfig):
        bubble_ratio(4, 0)


def grads(v):
    return [(np.full((2, 2), v), np.full(2, v))]


def test_allreduce_mean_in_rank_order():
    out = allreduce_replicas([grads(1.0), grads(2.0), grads(6.0)])
    np.testing.assert_array_equal(out[0][0], np.full((2, 2), 3.0))
    single = grads(5.0)
    assert allreduce_replicas([single]) is single
    with pytest.raises(ChannelBroken):
        allreduce_replicas([grads(1.0), grads(2.0)], alive=[True, False])


def test_layerwise_updates_go_last_layer_first():
    stage = build_stage(0, 3, 2, seed=0)
    g = [(np.ones((2, 2)), np.ones(2))] * 3
    h = OptimizerHyper("SGD", lr=0.1)
    assert apply_layerwise_updates(stage, g, h, interrupt_after=1) == 1
    assert updated_flags(stage) == [False, False, True]
    stage2 = build_stage(0, 3, 2, seed=0)
    assert apply_layerwise_updates(stage2, g, h) == 3
    assert updated_flags(stage2) == [True, True, True]
