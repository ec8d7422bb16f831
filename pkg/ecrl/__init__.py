"""
ecrl - estimator-coupled reinforcement learning for blind in-hand reorientation.

A policy and a recursive state estimator are trained together on a
simulated four-finger hand that only senses its own joints:

- ecrl/manifold.py   - rotations, the 24 goal orientations, boxplus
- ecrl/nncore.py     - reverse-mode autodiff, MLPs, Adam, checkpoints
- ecrl/env.py        - TactilePivot vectorized simulator
- ecrl/estimator.py  - recursive estimator trained with BPTT
- ecrl/policy.py     - Gaussian policy and value function, PPO
- ecrl/trainer.py    - training modes, run directories, checkpoints
- ecrl/bench.py      - goal benchmark, consecutive test, failure demos
"""

__version__ = "0.1.0"

from ecrl.models import (
    BenchmarkReport,
    ConsecutiveReport,
    ExperimentConfig,
    ObjectSpec,
    RunManifest,
)

from ecrl.config import ConfigManager, apply_overrides, config_hash
from ecrl.errors import EcrlError

__all__ = [
    # Models
    "ExperimentConfig",
    "ObjectSpec",
    "RunManifest",
    "BenchmarkReport",
    "ConsecutiveReport",
    # Config
    "ConfigManager",
    "apply_overrides",
    "config_hash",
    # Errors
    "EcrlError",
]
