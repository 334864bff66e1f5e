# handlers/data_handler.py
import logging
from pathlib import Path
from typing import Dict

import artifacts
import config
from errors import UnsupportedTaskError
from experiment import ExperimentConfig
from handlers.common import config_from_args
from probe import probe_splits

logger = logging.getLogger(__name__)


def generate_datasets(cfg: ExperimentConfig, out_dir: Path) -> Dict[str, Path]:
    """train/val/test dumps of the probe splits (the same sequences `probe` uses)."""
    if not cfg.is_sequence_task:
        raise UnsupportedTaskError(f"gen-data needs a markov task, got {cfg.task.kind}")
    splits = probe_splits(cfg)
    out_dir = artifacts.setup_output_dir(out_dir)
    return {name: artifacts.save_dataset(out_dir / f"{name}.npz", cfg.task, getattr(splits, name), name)
            for name in ("train", "val", "test")}


def cmd_gen_data(args) -> int:
    cfg = config_from_args(args)
    paths = generate_datasets(cfg, cfg.output_dir())
    logger.info("Wrote %d splits to %s", len(paths), cfg.output_dir())
    return config.EXIT_OK
