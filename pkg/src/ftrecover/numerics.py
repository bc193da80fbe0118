"""Deterministic dense arithmetic and seeded randomness.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every helper
here fixes its accumulation order so that identical inputs always give
bit-identical outputs, which the log-replay machinery relies on.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import EmptyInput, InvalidShape, NumericalError, ShapeMismatch

DTYPE = np.float64


def derive_seed(*parts: int) -> int:
    """Mix integer parts into one 64-bit seed (platform independent)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def rng(seed: int) -> np.random.Generator:
    # Philox is counter based: any stream position is reachable by advance().
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def seeded_fill(shape: Sequence[int], seed: int) -> np.ndarray:
    """Pseudo-uniform values in [-0.1, 0.1], a pure function of (shape, seed)."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidShape(f"shape must be nonempty with extents >= 1, got {shape}")
    return rng(seed).uniform(-0.1, 0.1, size=shape).astype(DTYPE, copy=False)


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NumericalError(f"{what} contains NaN or Inf")
    return t


def ordered_sum(tensors: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise sum, strictly left to right in the given order."""
    if len(tensors) == 0:
        raise EmptyInput("ordered_sum needs at least one tensor")
    shape = tensors[0].shape
    out = np.array(tensors[0], dtype=DTYPE, copy=True)
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeMismatch(f"{t.shape} != {shape}")
    with np.errstate(over="ignore", invalid="ignore"):  # reported below instead
        for t in tensors[1:]:
            np.add(out, t, out=out)
    return check_finite(out, "ordered_sum result")


def l2_norm(t: np.ndarray) -> float:
    if t.size == 0:
        raise EmptyInput("l2_norm of an empty tensor")
    flat = np.ravel(t).astype(DTYPE, copy=False)
    # cumsum accumulates sequentially, unlike np.sum's pairwise reduction.
    return float(np.sqrt(np.cumsum(flat * flat)[-1]))


def max_rel_error(actual: np.ndarray, expected: np.ndarray, floor: float = 1e-6) -> float:
    """Largest element-wise |a - e| / max(|e|, floor).

    The floor keeps exact zeros (fresh Adam moments, say) from turning a
    1e-20 rounding residue into an infinite relative error.
    """
    actual = np.asarray(actual, dtype=DTYPE)
    expected = np.asarray(expected, dtype=DTYPE)
    if actual.shape != expected.shape:
        raise ShapeMismatch(f"{actual.shape} != {expected.shape}")
    if actual.size == 0:
        return 0.0
    denom = np.maximum(np.abs(expected), floor)
    return float(np.max(np.abs(actual - expected) / denom))
