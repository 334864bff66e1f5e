# handlers/probe_handler.py
import logging

import artifacts
import config
from errors import ConfigError
from handlers.common import config_from_args, emit
from probe import run_probe_suite

logger = logging.getLogger(__name__)


def cmd_probe(args) -> int:
    cfg = config_from_args(args)
    if not args.checkpoint:
        raise ConfigError("probe needs --checkpoint", fields=["--checkpoint"])
    role = "random-init" if args.random_init else "cpc"
    reports = run_probe_suite(cfg, {role: args.checkpoint})
    for r in reports:
        logger.info("%-18s %-12s %-6s train %.3f  test %.3f", r.feature_source, r.target, r.probe_kind,
                    r.train_accuracy, r.test_accuracy)
    body = {"checkpoint": str(args.checkpoint), "reports": [r.model_dump(mode="json") for r in reports]}
    out_dir = artifacts.setup_output_dir(cfg.output_dir())
    emit(artifacts.report("probe", body, cfg.hash()), out_dir / "probe_report.json")
    return config.EXIT_OK
