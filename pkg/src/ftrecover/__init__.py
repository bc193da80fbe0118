"""Deterministic fault-tolerance engine and simulator for pipeline-parallel training."""

from .config import RunConfig, load_config, parse_config
from .errors import FaultToleranceError
from .runner import RunResult, ghost_config, run_training, verify

__version__ = "0.1.0"

__all__ = [
    "FaultToleranceError",
    "RunConfig",
    "RunResult",
    "ghost_config",
    "load_config",
    "parse_config",
    "run_training",
    "verify",
]
