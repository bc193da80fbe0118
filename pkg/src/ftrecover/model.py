"""Stage-partitioned affine+tanh network with analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Sequence, Tuple

import numpy as np

from .errors import MissingActivation, ShapeMismatch
from .numerics import DTYPE, check_finite, derive_seed, ordered_sum, seeded_fill
from .optimizers import ParamBlock

LayerGrads = List[Tuple[np.ndarray, np.ndarray]]


@dataclass
class Layer:
    weight: ParamBlock  # [out_dim, in_dim]
    bias: ParamBlock  # [out_dim]

    @property
    def blocks(self):
        return (self.weight, self.bias)


@dataclass
class Stage:
    stage_id: int
    layers: List[Layer]
    cache: Dict[Hashable, list] = field(default_factory=dict, repr=False)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def blocks(self) -> List[Tuple[str, ParamBlock]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"s{self.stage_id}.l{i}.w", layer.weight))
            out.append((f"s{self.stage_id}.l{i}.b", layer.bias))
        return out

    def copy(self) -> "Stage":
        return Stage(
            self.stage_id,
            [Layer(l.weight.copy(), l.bias.copy()) for l in self.layers],
        )

    def same_state(self, other: "Stage") -> bool:
        return all(a.same_state(b) for (_, a), (_, b) in zip(self.blocks(), other.blocks()))


def build_stage(stage_id: int, n_layers: int, width: int, seed: int) -> Stage:
    scale = math.sqrt(3.0 / width) / 0.1
    layers = []
    for i in range(n_layers):
        w = seeded_fill([width, width], derive_seed(seed, stage_id, i, 0)) * scale
        b = seeded_fill([width], derive_seed(seed, stage_id, i, 1))
        layers.append(Layer(ParamBlock(x=w), ParamBlock(x=b)))
    return Stage(stage_id, layers)


def build_stages(p: int, layers_per_stage: int, width: int, seed: int) -> List[Stage]:
    return [build_stage(s, layers_per_stage, width, seed) for s in range(p)]


def forward_stage(stage: Stage, activation_in: np.ndarray, key: Hashable = None) -> np.ndarray:
    """Run the stage and cache layer activations under ``key`` for backward."""
    h = np.asarray(activation_in, dtype=DTYPE)
    if h.ndim != 2 or h.shape[1] != stage.input_dim:
        raise ShapeMismatch(f"stage {stage.stage_id} expects {stage.input_dim} columns, got {h.shape}")
    acts = [h]
    for layer in stage.layers:
        h = np.tanh(h @ layer.weight.x.T + layer.bias.x)
        acts.append(h)
    if key is not None:
        stage.cache[key] = acts
    return check_finite(h, "activation")


def backward_stage(stage: Stage, grad_in: np.ndarray, key: Hashable) -> Tuple[np.ndarray, LayerGrads]:
    """Backpropagate ``grad_in`` (d loss / d stage output); frees the cache entry."""
    acts = stage.cache.pop(key, None)
    if acts is None:
        raise MissingActivation(f"no cached forward for stage {stage.stage_id} key {key!r}")
    grad = np.asarray(grad_in, dtype=DTYPE)
    if grad.shape != acts[-1].shape:
        raise ShapeMismatch(f"grad {grad.shape} != output {acts[-1].shape}")
    param_grads: LayerGrads = [None] * len(stage.layers)
    for i in range(len(stage.layers) - 1, -1, -1):
        out = acts[i + 1]
        dz = grad * (1.0 - out * out)
        param_grads[i] = (dz.T @ acts[i], dz.sum(axis=0))
        grad = dz @ stage.layers[i].weight.x
    return grad, param_grads


def accumulate_grads(partials: Sequence[LayerGrads]) -> LayerGrads:
    """Sum per-micro-batch gradients in the order given (ascending mb id)."""
    n_layers = len(partials[0])
    if any(len(p) != n_layers for p in partials):
        raise ShapeMismatch("partials disagree on layer count")
    return [
        (
            ordered_sum([p[i][0] for p in partials]),
            ordered_sum([p[i][1] for p in partials]),
        )
        for i in range(n_layers)
    ]


def mse_loss(output: np.ndarray, target: np.ndarray, micro_batches: int = 1):
    """Mean squared error and its gradient, pre-scaled by 1/micro_batches."""
    diff = output - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / (diff.size * micro_batches)) * diff
    return loss, grad


@dataclass(frozen=True)
class SyntheticData:
    """Seeded regression task: targets come from a fixed random tanh teacher."""

    seed: int
    width: int
    micro_batch_size: int

    def inputs(self, iteration: int, replica: int, mb: int) -> np.ndarray:
        return seeded_fill([self.micro_batch_size, self.width], derive_seed(self.seed, iteration, replica, mb)) * 10.0

    def targets(self, iteration: int, replica: int, mb: int) -> np.ndarray:
        teacher = seeded_fill([self.width, self.width], derive_seed(self.seed, 0xFEED)) * 10.0
        return 0.5 * np.tanh(self.inputs(iteration, replica, mb) @ teacher)
