# config.py
import logging
import os
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)


def env_int(name: str, default: int) -> int:
    """Positive int from the environment; unset, blank or invalid values fall back to default."""
    raw = os.getenv(name, "").strip()
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning("Ignoring %s=%r (not an integer); using %d", name, raw, default)
        return default
    if value < 1:
        logger.warning("Ignoring %s=%d (must be >= 1); using %d", name, value, default)
        return default
    return value


# --- Process settings ---
CPC_LAB_THREADS = env_int("CPC_LAB_THREADS", os.cpu_count() or 1)
LOG_LEVEL = os.getenv("CPC_LAB_LOG_LEVEL", "INFO").strip().upper() or "INFO"
OUTPUT_ROOT = os.getenv("CPC_LAB_OUT", "runs").strip() or "runs"
SHOW_PROGRESS = os.getenv("CPC_LAB_PROGRESS", "0").strip().lower() in ("1", "true", "yes", "on")


# --- Exit codes ---
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_PROPERTY_VIOLATION = 3


# --- Numerics ---
GRADCHECK_EPS = 1e-5
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_FLOOR = 1e-3   # denominator floor for relative error
PROBE_GTOL = 1e-5
PROBE_MAX_ITER = 2000
PROBE_L2_GRID = (0.0, 1e-4, 1e-2)
PROBE_HIDDEN_WIDTH = 256


# --- Defaults ---
DEFAULT_LEARNING_RATE = 2e-4
DEFAULT_LOG_EVERY = 100


# --- File formats ---
CHECKPOINT_FORMAT = "cpc-lab/checkpoint"
CHECKPOINT_VERSION = 1
REPORT_SCHEMA = "cpc-lab/report"
RUN_SCHEMA = "cpc-lab/run"
REPORT_VERSION = 1
DATASET_FORMAT = "cpc-lab/dataset"
