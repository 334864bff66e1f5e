# handlers/common.py
import json
import logging
import sys
from pathlib import Path
from typing import Any, Mapping, Optional

from artifacts import write_json
from experiment import ExperimentConfig, dump_defaults, load_config
from utils import to_jsonable

logger = logging.getLogger(__name__)


def config_from_args(args) -> ExperimentConfig:
    """--config/--seed/--out applied in that order."""
    return load_config(getattr(args, "config", None), seed=getattr(args, "seed", None),
                       out_dir=getattr(args, "out", None))


def print_config(cfg: Optional[ExperimentConfig] = None) -> None:
    payload = cfg.model_dump(mode="json") if cfg is not None else dump_defaults()
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")


def emit(payload: Mapping[str, Any], path: Optional[Path] = None) -> None:
    """Report JSON to stdout, and to `path` when given."""
    json.dump(to_jsonable(payload), sys.stdout, indent=2)
    sys.stdout.write("\n")
    if path is not None:
        write_json(path, payload)
