"""
Exception hierarchy for ecrl.

Every error raised on purpose by the package derives from EcrlError so the
CLI can report it with a single handler.
"""

from typing import Iterable, Optional, Sequence


class EcrlError(Exception):
    """Base class for all ecrl errors."""


class ConfigError(EcrlError):
    """Invalid configuration value, addressed by its dotted path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class CheckpointError(EcrlError):
    """Checkpoint missing, corrupt, or written by an incompatible version."""


class CheckpointModeMismatch(CheckpointError):
    """A command asked for a mode the checkpoint cannot serve."""


class RunCollisionError(EcrlError):
    """Run directory already holds a run and --resume was not given."""


class SimulationFault(EcrlError):
    """Non-finite simulator state."""

    def __init__(self, env_ids: Iterable[int], message: str = "non-finite state"):
        self.env_ids = [int(i) for i in env_ids]
        super().__init__(f"{message} in envs {self.env_ids}")


class EstimatorFault(EcrlError):
    """Estimator produced a non-finite estimate."""

    def __init__(self, rows: Sequence[int], field: str):
        self.rows = [int(r) for r in rows]
        self.field = field
        super().__init__(f"non-finite estimator output in field '{field}' for rows {self.rows}")


class PolicyFault(EcrlError):
    """Policy produced a non-finite action or value."""


class InsufficientSamplesError(EcrlError):
    """Too few samples for an order statistic."""


class TrainingError(EcrlError):
    """A component failed during a training iteration."""

    def __init__(self, iteration: int, message: str, cause: Optional[BaseException] = None):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"[iter {iteration}] {message}")
