# handlers/ablate_handler.py
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Tuple

import artifacts
import config
from contrastive import NegativeSamplingStrategy
from errors import ConfigError, StrategyInfeasibleError, UnsupportedTaskError
from experiment import ExperimentConfig, parse_config
from handlers.common import config_from_args
from handlers.train_handler import write_run
from probe import run_probe_suite
from training import train_cpc

logger = logging.getLogger(__name__)

STEPS_GRID = (1, 2, 4, 8)
ABLATION_COLUMNS = ["axis", "setting", "label", "status", "hidden_state_acc", "source_id_acc",
                    "random_init_hidden_state_acc", "final_loss", "final_mi_bound"]


def ablation_settings(axis: str) -> List[Tuple[str, str, Dict[str, Any]]]:
    """(setting, row label, dotted-path overrides) per row; everything else stays fixed."""
    if axis == "steps":
        return [(str(k), f"{k} steps", {"model.max_horizon": k}) for k in STEPS_GRID]
    if axis == "negatives":
        return [(s.value, s.label, {"contrastive.strategy": s.value}) for s in NegativeSamplingStrategy]
    raise ConfigError(f"unknown ablation axis {axis!r} (expected steps or negatives)", fields=["--axis"])


def run_setting(payload: Dict[str, Any], axis: str, setting: str, label: str, out_dir: str) -> Dict[str, Any]:
    """One isolated train + probe run. Top-level so worker processes can unpickle it."""
    cfg = parse_config(payload)
    row: Dict[str, Any] = {"axis": axis, "setting": setting, "label": label}
    try:
        result = train_cpc(cfg)
    except StrategyInfeasibleError as e:
        logger.warning("Setting %s=%s is infeasible: %s", axis, setting, e)
        return {**row, "status": "infeasible"}
    write_run(cfg, result, artifacts.setup_output_dir(out_dir))
    reports = run_probe_suite(cfg, {"cpc": result.model}, include_supervised=False)
    accuracy = {(r.feature_source, r.target): r.test_accuracy for r in reports if r.probe_kind == "linear"}
    last = result.rows[-1] if result.rows else None
    return {
        **row,
        "status": "ok",
        "hidden_state_acc": accuracy.get(("cpc-c", "hidden-state"), ""),
        "source_id_acc": accuracy.get(("cpc-c", "source-id"), ""),
        "random_init_hidden_state_acc": accuracy.get(("random-init", "hidden-state"), ""),
        "final_loss": last.loss_mean if last else "",
        "final_mi_bound": last.mi_bound if last else "",
    }


def run_ablation(cfg: ExperimentConfig, axis: str, out_dir: Path) -> List[Dict[str, Any]]:
    if not cfg.is_sequence_task:
        raise UnsupportedTaskError(f"ablate needs a markov task, got {cfg.task.kind}")
    settings = ablation_settings(axis)
    jobs = []
    for setting, label, overrides in settings:
        setting_cfg = cfg.update(**overrides)
        jobs.append((setting_cfg.model_dump(mode="json"), axis, setting, label,
                     str(out_dir / f"ablate-{axis}" / setting)))
    workers = max(1, min(config.CPC_LAB_THREADS, len(jobs)))
    logger.info("Ablating %s over %d settings with %d worker(s)", axis, len(jobs), workers)
    if workers == 1:
        rows = [run_setting(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_setting, *zip(*jobs)))
    artifacts.write_table(out_dir / f"ablate_{axis}.csv", ABLATION_COLUMNS, rows)
    return rows


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    rows = run_ablation(cfg, args.axis, artifacts.setup_output_dir(cfg.output_dir()))
    for row in rows:
        logger.info("%-24s %-10s hidden-state %s", row["label"], row["status"], row.get("hidden_state_acc", ""))
    return config.EXIT_OK
