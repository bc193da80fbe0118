"""Optimizer update kernels and their exact inverses.

Each ``step`` advances a :class:`ParamBlock` by one iteration; the matching
``undo`` rebuilds the pre-step parameters and optimizer state from the
post-step state plus the cached gradient.  Bias-corrected moments are
recomputed from the step counter on both sides and never stored.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .errors import (
    FaultToleranceError,
    NonInvertibleHyper,
    NothingToUndo,
    NotInvertible,
    NumericalError,
    ShapeMismatch,
)
from .numerics import DTYPE, l2_norm


class Kind(str, enum.Enum):
    SGD = "SGD"
    SGDM = "SGDM"
    ADAM = "Adam"
    ADAMW = "AdamW"
    LAMB = "LAMB"
    AMSGRAD = "AMSGrad"


class Invertibility(str, enum.Enum):
    INVERTIBLE = "Invertible"
    WITH_SAVED_SCALARS = "InvertibleWithSavedScalars"
    NOT_INVERTIBLE = "NotInvertible"


_INVERTIBILITY = {
    Kind.SGD: Invertibility.INVERTIBLE,
    Kind.SGDM: Invertibility.INVERTIBLE,
    Kind.ADAM: Invertibility.INVERTIBLE,
    Kind.ADAMW: Invertibility.INVERTIBLE,
    # the norm-based trust ratio is a sum reduction; keep it per step
    Kind.LAMB: Invertibility.WITH_SAVED_SCALARS,
    # element-wise max discards information
    Kind.AMSGRAD: Invertibility.NOT_INVERTIBLE,
}


def invertibility_check(kind) -> Invertibility:
    return _INVERTIBILITY[Kind(kind)]


LrSchedule = Union[float, Mapping[int, float], Callable[[int], float]]


@dataclass(frozen=True)
class OptimizerHyper:
    kind: Kind
    lr: LrSchedule = 0.01
    weight_decay: float = 0.0
    momentum: float = 0.9
    dampening: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 1.0  # AdamW step-size multiplier
    require_undo: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def lr_at(self, t: int) -> float:
        """Learning rate for the step that produces step count ``t`` (1-based)."""
        if callable(self.lr):
            eta = float(self.lr(t))
        elif isinstance(self.lr, Mapping):
            eta = float(self.lr[t])
        else:
            eta = float(self.lr)
        if not eta > 0:
            raise ValueError(f"learning rate must be > 0 at step {t}, got {eta}")
        return eta

    def to_dict(self) -> dict:
        if callable(self.lr) or isinstance(self.lr, Mapping):
            raise TypeError("only constant learning rates serialize")
        return {
            "kind": self.kind.value,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "momentum": self.momentum,
            "dampening": self.dampening,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "alpha": self.alpha,
            "require_undo": self.require_undo,
        }


@dataclass
class ParamBlock:
    x: np.ndarray
    g: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0
    saved_scalars: list = field(default_factory=list)
    updated_flag: bool = False
    vmax: Optional[np.ndarray] = None  # AMSGrad only

    def __post_init__(self):
        self.x = np.array(self.x, dtype=DTYPE)
        for name in ("g", "m", "v"):
            val = getattr(self, name)
            val = np.zeros_like(self.x) if val is None else np.array(val, dtype=DTYPE)
            if val.shape != self.x.shape:
                raise ShapeMismatch(f"{name} shape {val.shape} != x shape {self.x.shape}")
            setattr(self, name, val)

    @property
    def shape(self):
        return self.x.shape

    def copy(self) -> "ParamBlock":
        return ParamBlock(
            x=self.x.copy(),
            g=self.g.copy(),
            m=self.m.copy(),
            v=self.v.copy(),
            t=self.t,
            saved_scalars=list(self.saved_scalars),
            updated_flag=self.updated_flag,
            vmax=None if self.vmax is None else self.vmax.copy(),
        )

    def same_state(self, other: "ParamBlock") -> bool:
        """Bit-exact comparison of parameters and optimizer state."""
        return (
            self.t == other.t
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.v, other.v)
        )


def _finite(block: ParamBlock) -> ParamBlock:
    for name in ("x", "m", "v"):
        if not np.all(np.isfinite(getattr(block, name))):
            raise NumericalError(f"non-finite {name} after update")
    return block


def _bias_corrected(block: ParamBlock, hyper: OptimizerHyper, t: int):
    m_hat = block.m / (1.0 - hyper.beta1**t)
    v_hat = block.v / (1.0 - hyper.beta2**t)
    return m_hat / (np.sqrt(v_hat) + hyper.eps)


def optimizer_step(block: ParamBlock, grad: np.ndarray, hyper: OptimizerHyper) -> ParamBlock:
    """Apply one update in place and return the block."""
    grad = np.asarray(grad, dtype=DTYPE)
    if grad.shape != block.shape:
        raise ShapeMismatch(f"gradient shape {grad.shape} != block shape {block.shape}")
    if block.updated_flag:
        raise FaultToleranceError("block already updated this iteration")
    kind = hyper.kind
    if kind is Kind.AMSGRAD and hyper.require_undo:
        raise NotInvertible("AMSGrad updates cannot be undone")

    t = block.t + 1
    eta = hyper.lr_at(t)
    lam = hyper.weight_decay
    x = block.x

    if kind is Kind.SGD:
        block.x = x - eta * (grad + lam * x)
    elif kind is Kind.SGDM:
        block.m = hyper.momentum * block.m + (1.0 - hyper.dampening) * (grad + lam * x)
        block.x = x - eta * block.m
    elif kind in (Kind.ADAM, Kind.AMSGRAD):
        gp = grad + lam * x
        block.m = hyper.beta1 * block.m + (1.0 - hyper.beta1) * gp
        block.v = hyper.beta2 * block.v + (1.0 - hyper.beta2) * (gp * gp)
        if kind is Kind.ADAM:
            block.x = x - eta * _bias_corrected(block, hyper, t)
        else:
            block.vmax = block.v.copy() if block.vmax is None else np.maximum(block.vmax, block.v)
            m_hat = block.m / (1.0 - hyper.beta1**t)
            v_hat = block.vmax / (1.0 - hyper.beta2**t)
            block.x = x - eta * m_hat / (np.sqrt(v_hat) + hyper.eps)
    elif kind is Kind.ADAMW:
        block.m = hyper.beta1 * block.m + (1.0 - hyper.beta1) * grad
        block.v = hyper.beta2 * block.v + (1.0 - hyper.beta2) * (grad * grad)
        block.x = x - eta * (hyper.alpha * _bias_corrected(block, hyper, t) + lam * x)
    elif kind is Kind.LAMB:
        block.m = hyper.beta1 * block.m + (1.0 - hyper.beta1) * grad
        block.v = hyper.beta2 * block.v + (1.0 - hyper.beta2) * (grad * grad)
        r = _bias_corrected(block, hyper, t)
        u = r + lam * x
        x_norm, u_norm = l2_norm(x), l2_norm(u)
        ratio = x_norm / u_norm if x_norm > 0 and u_norm > 0 else 1.0
        block.saved_scalars = [ratio]  # only the latest step is ever undone
        block.x = x - eta * ratio * u
    else:  # pragma: no cover
        raise ValueError(kind)

    block.g = grad.copy()
    block.t = t
    block.updated_flag = True
    return _finite(block)


def optimizer_undo(block: ParamBlock, hyper: OptimizerHyper) -> ParamBlock:
    """Invert the last ``optimizer_step`` in place and return the block."""
    kind = hyper.kind
    if invertibility_check(kind) is Invertibility.NOT_INVERTIBLE:
        raise NotInvertible(f"{kind.value} has no inverse update")
    if not block.updated_flag:
        raise NothingToUndo("block carries no pending update")

    t = block.t
    eta = hyper.lr_at(t)
    lam = hyper.weight_decay
    g = block.g

    if kind is Kind.SGD:
        denom = 1.0 - eta * lam
        if denom == 0:
            raise NonInvertibleHyper("1 - lr * weight_decay == 0")
        block.x = (block.x + eta * g) / denom
    elif kind is Kind.SGDM:
        if hyper.momentum == 0:
            raise NonInvertibleHyper("momentum == 0 erases the previous momentum")
        x = block.x + eta * block.m
        block.m = (block.m - (1.0 - hyper.dampening) * (g + lam * x)) / hyper.momentum
        block.x = x
    elif kind is Kind.ADAM:
        if hyper.beta1 * hyper.beta2 == 0:
            raise NonInvertibleHyper("beta1 and beta2 must be nonzero")
        x = block.x + eta * _bias_corrected(block, hyper, t)
        gp = g + lam * x
        block.m = (block.m - (1.0 - hyper.beta1) * gp) / hyper.beta1
        block.v = (block.v - (1.0 - hyper.beta2) * (gp * gp)) / hyper.beta2
        block.x = x
    elif kind is Kind.ADAMW:
        if hyper.beta1 * hyper.beta2 == 0:
            raise NonInvertibleHyper("beta1 and beta2 must be nonzero")
        denom = 1.0 - eta * lam
        if denom == 0:
            raise NonInvertibleHyper("1 - lr * weight_decay == 0")
        block.x = (block.x + eta * hyper.alpha * _bias_corrected(block, hyper, t)) / denom
        block.m = (block.m - (1.0 - hyper.beta1) * g) / hyper.beta1
        block.v = (block.v - (1.0 - hyper.beta2) * (g * g)) / hyper.beta2
    elif kind is Kind.LAMB:
        if hyper.beta1 * hyper.beta2 == 0:
            raise NonInvertibleHyper("beta1 and beta2 must be nonzero")
        if not block.saved_scalars:
            raise NothingToUndo("no saved trust ratio for LAMB undo")
        ratio = block.saved_scalars[-1]
        denom = 1.0 - eta * ratio * lam
        if denom == 0:
            raise NonInvertibleHyper("1 - lr * trust_ratio * weight_decay == 0")
        block.x = (block.x + eta * ratio * _bias_corrected(block, hyper, t)) / denom
        block.m = (block.m - (1.0 - hyper.beta1) * g) / hyper.beta1
        block.v = (block.v - (1.0 - hyper.beta2) * (g * g)) / hyper.beta2
        block.saved_scalars.pop()

    if kind in (Kind.ADAM, Kind.ADAMW, Kind.LAMB):
        # rounding can leave -1e-20 where the true second moment was 0
        np.maximum(block.v, 0.0, out=block.v)
    block.t = t - 1
    block.updated_flag = False
    return _finite(block)
