# handlers/train_handler.py
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import artifacts
import config
from experiment import ExperimentConfig
from handlers.common import config_from_args, print_config
from training import TrainResult, metric_columns, train

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.json"
INIT_CHECKPOINT_FILE = "init_checkpoint.json"


def horizons(cfg: ExperimentConfig) -> int:
    return cfg.model.max_horizon if cfg.is_sequence_task else 1


def write_run(cfg: ExperimentConfig, result: TrainResult, out_dir: Path) -> Dict[str, Any]:
    """checkpoint, init checkpoint, metrics.csv, timings.csv, config.json, summary.json."""
    artifacts.save_checkpoint(result.model, out_dir / CHECKPOINT_FILE)
    artifacts.save_checkpoint(result.model.with_params(result.initial_params), out_dir / INIT_CHECKPOINT_FILE)
    artifacts.write_metrics(out_dir / "metrics.csv", metric_columns(horizons(cfg)), result.rows)
    artifacts.write_timings(out_dir / "timings.csv", result.rows)
    artifacts.write_json(out_dir / "config.json", cfg.model_dump(mode="json"))
    summary = artifacts.run_summary(cfg.hash(), result.rows, result.final_slope,
                                    {"task": cfg.task.kind, "num_negatives": cfg.contrastive.num_negatives,
                                     "objective": cfg.contrastive.objective})
    artifacts.write_json(out_dir / "summary.json", summary)
    return summary


def run_training(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> TrainResult:
    out_dir = artifacts.setup_output_dir(out_dir or cfg.output_dir())
    logger.info("Run %s -> %s", cfg.hash(), out_dir)
    result = train(cfg)
    write_run(cfg, result, out_dir)
    if result.rows:
        last = result.rows[-1]
        logger.info("Finished at step %d: loss %.4f, bound %.4f nats, loss slope %.3g/step",
                    last.step, last.loss_mean, last.mi_bound, result.final_slope)
    return result


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    if getattr(args, "print_config", False):
        print_config(cfg)
        return config.EXIT_OK
    run_training(cfg)
    return config.EXIT_OK
