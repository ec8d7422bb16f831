"""
Environment variable names and default values for ecrl.

All environment variables are optional and have sensible defaults. A .env
file next to the package (or in the working directory) is loaded first.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

try:
    _MODULE_DIR = Path(__file__).parent.parent
    _ENV_PATH = _MODULE_DIR / ".env"
    if not _ENV_PATH.exists():
        _ENV_PATH = Path.cwd() / ".env"
    load_dotenv(_ENV_PATH, override=False)
except Exception:
    load_dotenv(override=False)

# Run configuration
ECRL_CONFIG = os.getenv("ECRL_CONFIG", "")
ECRL_OUTPUT_ROOT = os.getenv("ECRL_OUTPUT_ROOT", "runs")
ECRL_WORKERS = int(os.getenv("ECRL_WORKERS", "1"))
ECRL_LOG_LEVEL = os.getenv("ECRL_LOG_LEVEL", "INFO").upper()

# Logging
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"

# Run directory layout
MANIFEST_FILE = "manifest.json"
CONFIG_SNAPSHOT_FILE = "config.json"
TRAINING_METRICS_FILE = "training_metrics.csv"
ESTIMATOR_METRICS_FILE = "estimator_metrics.csv"
CHECKPOINT_DIR = "checkpoints"
LATEST_CHECKPOINT = "latest.npz"
RUN_LOCK_FILE = ".run.lock"

# Config hash length (hex characters of sha256)
CONFIG_HASH_LENGTH = 12
