import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftrecover.errors import NonInvertibleHyper, NothingToUndo, NotInvertible, ShapeMismatch
from ftrecover.numerics import max_rel_error, seeded_fill
from ftrecover.optimizers import (
    Invertibility,
    Kind,
    OptimizerHyper,
    ParamBlock,
    invertibility_check,
    optimizer_step,
    optimizer_undo,
)


def scalar_block(x=1.0):
    return ParamBlock(x=np.array([x]))


def step(block, g, hyper):
    optimizer_step(block, np.array([g]), hyper)
    block.updated_flag = False
    return block


# hand-derived single-step values for x = 1, g = 0.5, lr = 0.1


def test_sgd_step_value():
    b = step(scalar_block(), 0.5, OptimizerHyper("SGD", lr=0.1, weight_decay=0.1))
    assert b.x[0] == pytest.approx(1 - 0.1 * (0.5 + 0.1), rel=1e-15)
    assert b.t == 1


def test_sgdm_two_steps():
    h = OptimizerHyper("SGDM", lr=0.1, momentum=0.9)
    b = step(scalar_block(), 0.5, h)
    assert (b.m[0], b.x[0]) == pytest.approx((0.5, 0.95))
    b = step(b, 0.5, h)
    assert (b.m[0], b.x[0]) == pytest.approx((0.95, 0.855))


def test_sgdm_dampening_scales_the_gradient():
    b = step(scalar_block(), 0.5, OptimizerHyper("SGDM", lr=0.1, momentum=0.9, dampening=0.5))
    assert b.m[0] == pytest.approx(0.25)


def test_adam_first_step_is_sign_like():
    b = step(scalar_block(), 0.5, OptimizerHyper("Adam", lr=0.1))
    assert b.m[0] == pytest.approx(0.05)
    assert b.v[0] == pytest.approx(0.00025)
    assert b.x[0] == pytest.approx(1 - 0.1 * 0.5 / (0.5 + 1e-8), rel=1e-14)


def test_adamw_decay_is_decoupled():
    b = step(scalar_block(), 0.5, OptimizerHyper("AdamW", lr=0.1, weight_decay=0.1, alpha=1.0))
    assert b.x[0] == pytest.approx(1 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.1), rel=1e-14)
    # decay does not leak into the moments
    assert b.m[0] == pytest.approx(0.05)


def test_lamb_scalar_step_moves_by_lr_times_norm():
    # with one element the trust ratio is |x| / |u|, so the step is lr * |x|
    b = step(scalar_block(2.0), 0.5, OptimizerHyper("LAMB", lr=0.1, weight_decay=0.01))
    assert b.x[0] == pytest.approx(2.0 - 0.1 * 2.0, rel=1e-14)
    assert len(b.saved_scalars) == 1


def test_lr_schedule_uses_new_step_count():
    h = OptimizerHyper("SGD", lr={1: 0.1, 2: 0.2})
    b = step(scalar_block(), 1.0, h)
    b = step(b, 1.0, h)
    assert b.x[0] == pytest.approx(1 - 0.1 - 0.2)
    b.updated_flag = True
    optimizer_undo(b, h)
    assert b.x[0] == pytest.approx(0.9)


def test_invertibility_table():
    assert invertibility_check("SGD") is Invertibility.INVERTIBLE
    assert invertibility_check(Kind.LAMB) is Invertibility.WITH_SAVED_SCALARS
    assert invertibility_check("AMSGrad") is Invertibility.NOT_INVERTIBLE


def test_amsgrad_cannot_be_undone():
    h = OptimizerHyper("AMSGrad", lr=0.1)
    b = scalar_block()
    optimizer_step(b, np.array([0.5]), h)
    with pytest.raises(NotInvertible):
        optimizer_undo(b, h)
    strict = OptimizerHyper("AMSGrad", lr=0.1, require_undo=True)
    with pytest.raises(NotInvertible):
        optimizer_step(scalar_block(), np.array([0.5]), strict)


def test_undo_errors():
    with pytest.raises(NothingToUndo):
        optimizer_undo(scalar_block(), OptimizerHyper("SGD", lr=0.1))
    b = scalar_block()
    h = OptimizerHyper("SGDM", lr=0.1, momentum=0.0)
    optimizer_step(b, np.array([0.5]), h)
    with pytest.raises(NonInvertibleHyper):
        optimizer_undo(b, h)
    b = scalar_block()
    h = OptimizerHyper("SGD", lr=0.5, weight_decay=2.0)
    optimizer_step(b, np.array([0.5]), h)
    with pytest.raises(NonInvertibleHyper):
        optimizer_undo(b, h)


def test_step_rejects_double_update_and_bad_shape():
    b = scalar_block()
    h = OptimizerHyper("SGD", lr=0.1)
    optimizer_step(b, np.array([0.5]), h)
    with pytest.raises(Exception):
        optimizer_step(b, np.array([0.5]), h)
    with pytest.raises(ShapeMismatch):
        optimizer_step(scalar_block(), np.zeros(2), h)


def test_undo_restores_t_and_clears_flag():
    b = scalar_block()
    h = OptimizerHyper("Adam", lr=0.01)
    optimizer_step(b, np.array([0.3]), h)
    optimizer_undo(b, h)
    assert b.t == 0 and not b.updated_flag
    assert b.v[0] >= 0


@settings(max_examples=60, deadline=None)
@given(
    kind=st.sampled_from(["SGD", "SGDM", "Adam", "AdamW", "LAMB"]),
    seed=st.integers(0, 2**32),
    warmup=st.integers(0, 20),
    lr=st.floats(1e-4, 1e-1),
    wd=st.floats(0, 0.1),
)
def test_undo_inverts_step(kind, seed, warmup, lr, wd):
    h = OptimizerHyper(kind, lr=lr, weight_decay=wd)
    b = ParamBlock(x=seeded_fill([3, 4], seed) * 10)
    for i in range(warmup):
        optimizer_step(b, seeded_fill([3, 4], seed + i + 1), h)
        b.updated_flag = False
    before = b.copy()
    optimizer_step(b, seeded_fill([3, 4], seed + 999), h)
    optimizer_undo(b, h)
    assert b.t == before.t
    for name in ("x", "m", "v"):
        assert max_rel_error(getattr(b, name), getattr(before, name)) <= 1e-9
