"""Run configuration: JSON schema validation and topology placement."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema

from .cluster import FailurePhase
from .errors import InvalidConfig, InvalidInjection
from .optimizers import OptimizerHyper

_OPTIMIZER = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["SGD", "SGDM", "Adam", "AdamW", "LAMB", "AMSGrad"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "dampening": {"type": "number", "minimum": 0, "maximum": 1},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_FAILURE = {
    "type": "object",
    "properties": {
        "machine": {"type": "integer", "minimum": 0},
        "iteration": {"type": "integer", "minimum": 0},
        "phase": {"type": "string"},
        "during_recovery": {"type": "boolean"},
        "after_replayed": {"type": "integer", "minimum": 0},
    },
    "required": ["machine"],
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "topology": {
            "type": "object",
            "properties": {
                "machines": {"type": "integer", "minimum": 1},
                "stages": {"type": "integer", "minimum": 1},
                "micro_batches": {"type": "integer", "minimum": 1},
                "replicas": {"type": "integer", "minimum": 1},
                "placement": {"enum": ["spread", "colocated"]},
            },
            "required": ["machines", "stages", "micro_batches"],
            "additionalProperties": False,
        },
        "model": {
            "type": "object",
            "properties": {
                "layers_per_stage": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "micro_batch_size": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "optimizer": _OPTIMIZER,
        "seeds": {
            "type": "object",
            "properties": {"model": {"type": "integer"}, "data": {"type": "integer"}},
            "additionalProperties": False,
        },
        "iterations": {"type": "integer", "minimum": 1},
        "checkpoint_interval": {"type": "integer", "minimum": 1},
        "strategy": {"enum": ["auto", "replication", "logging", "global"]},
        "logging": {
            "type": "object",
            "properties": {
                "enabled": {"type": "boolean"},
                "groups": {
                    "type": ["array", "null"],
                    "items": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                },
                "storage_budget": {"type": ["number", "null"], "minimum": 0},
                "chunk_records": {"type": "integer", "minimum": 1},
                "parallel_recovery": {"type": "boolean"},
                "helpers": {"type": ["integer", "null"], "minimum": 1},
            },
            "additionalProperties": False,
        },
        "failures": {"type": "array", "items": _FAILURE},
        "execution": {"enum": ["event", "threads"]},
    },
    "required": ["topology", "iterations"],
    "additionalProperties": False,
}

DEFAULTS = {
    "name": "run",
    "topology": {"replicas": 1, "placement": "spread"},
    "model": {"layers_per_stage": 2, "width": 8, "micro_batch_size": 4},
    "optimizer": {"kind": "Adam", "lr": 0.01},
    "seeds": {"model": 1, "data": 2},
    "checkpoint_interval": 100,
    "strategy": "auto",
    "logging": {
        "enabled": True,
        "groups": None,
        "storage_budget": None,
        "chunk_records": 64,
        "parallel_recovery": False,
        "helpers": None,
    },
    "failures": [],
    "execution": "event",
}


@dataclass
class Injection:
    machine: int
    iteration: Optional[int] = None
    phase: Optional[FailurePhase] = None
    during_recovery: bool = False
    after_replayed: int = 0


@dataclass
class RunConfig:
    raw: dict
    name: str
    machines: int
    stages: int
    micro_batches: int
    replicas: int
    placement_kind: str
    layers_per_stage: int
    width: int
    micro_batch_size: int
    hyper: OptimizerHyper
    model_seed: int
    data_seed: int
    iterations: int
    checkpoint_interval: int
    strategy: str
    logging_enabled: bool
    groups: Optional[List[List[int]]]
    storage_budget: Optional[float]
    chunk_records: int
    parallel_recovery: bool
    helpers: Optional[int]
    failures: List[Injection] = field(default_factory=list)
    execution: str = "event"

    def worker_id(self, replica: int, stage: int) -> int:
        return replica * self.stages + stage

    def worker_coords(self, wid: int):
        return divmod(wid, self.stages)

    def placement(self) -> Dict[int, List[int]]:
        """machine id -> hosted worker ids."""
        M, p, r = self.machines, self.stages, self.replicas
        out: Dict[int, List[int]] = {mid: [] for mid in range(M)}
        if self.placement_kind == "spread":
            per_replica = M // r
            per_machine = p // per_replica
            for rep in range(r):
                for s in range(p):
                    out[rep * per_replica + s // per_machine].append(self.worker_id(rep, s))
        else:
            per_machine = p // M
            for s in range(p):
                for rep in range(r):
                    out[s // per_machine].append(self.worker_id(rep, s))
        return {mid: sorted(ws) for mid, ws in out.items()}

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(data: dict) -> RunConfig:
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InvalidConfig(f"{where}: {exc.message}") from None
    raw = _merge(DEFAULTS, data)
    topo, model, log = raw["topology"], raw["model"], raw["logging"]
    M, p, r = topo["machines"], topo["stages"], topo["replicas"]
    if topo["placement"] == "spread":
        if M % r:
            raise InvalidConfig(f"topology: {M} machines do not split evenly over {r} replicas")
        if p % (M // r):
            raise InvalidConfig(f"topology: {p} stages do not split evenly over {M // r} machines per replica")
    elif p % M:
        raise InvalidConfig(f"topology: {p} stages do not split evenly over {M} machines")

    opt = dict(raw["optimizer"])
    try:
        hyper = OptimizerHyper(**opt)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"optimizer: {exc}") from None

    groups = log["groups"]
    if groups is not None:
        flat = [m for g in groups for m in g]
        if flat != list(range(M)):
            raise InvalidConfig("logging/groups: must be an ordered contiguous partition of machines 0..N-1")

    failures = []
    for i, f in enumerate(raw["failures"]):
        if f["machine"] >= M:
            raise InvalidConfig(f"failures/{i}/machine: no machine {f['machine']}")
        if f.get("during_recovery"):
            failures.append(Injection(f["machine"], during_recovery=True, after_replayed=f.get("after_replayed", 0)))
            continue
        if "iteration" not in f:
            raise InvalidConfig(f"failures/{i}: 'iteration' is required")
        if f["iteration"] >= raw["iterations"]:
            raise InvalidConfig(f"failures/{i}/iteration: beyond the last iteration")
        try:
            phase = FailurePhase.parse(f.get("phase", "BeforeUpdate"))
        except InvalidInjection as exc:
            raise InvalidConfig(f"failures/{i}/phase: {exc}") from None
        failures.append(Injection(f["machine"], f["iteration"], phase))

    return RunConfig(
        raw=raw,
        name=raw["name"],
        machines=M,
        stages=p,
        micro_batches=topo["micro_batches"],
        replicas=r,
        placement_kind=topo["placement"],
        layers_per_stage=model["layers_per_stage"],
        width=model["width"],
        micro_batch_size=model["micro_batch_size"],
        hyper=hyper,
        model_seed=raw["seeds"]["model"],
        data_seed=raw["seeds"]["data"],
        iterations=raw["iterations"],
        checkpoint_interval=raw["checkpoint_interval"],
        strategy=raw["strategy"],
        logging_enabled=log["enabled"],
        groups=groups,
        storage_budget=log["storage_budget"],
        chunk_records=log["chunk_records"],
        parallel_recovery=log["parallel_recovery"],
        helpers=log["helpers"],
        failures=failures,
        execution=raw["execution"],
    )


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read {path}: {exc}") from None
    return parse_config(data)
