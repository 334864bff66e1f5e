# cpc_lab.py
"""cpc-lab command line: train, eval-mi, ablate, probe, gradcheck, gen-data.

Exit codes: 0 ok, 1 other error, 2 invalid config, 3 property violation
(gradient check failure, eval-mi --check bound violation).
"""
import argparse
import logging
import sys
from typing import List, Optional

import config
from errors import ConfigError, CpcLabError
from handlers.ablate_handler import cmd_ablate
from handlers.common import print_config
from handlers.data_handler import cmd_gen_data
from handlers.eval_handler import cmd_eval_mi
from handlers.gradcheck_handler import cmd_gradcheck
from handlers.probe_handler import cmd_probe
from handlers.train_handler import cmd_train

logger = logging.getLogger("cpc_lab")


def setup_logging(level: str = config.LOG_LEVEL) -> None:
    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        level=getattr(logging, level, logging.INFO),
        stream=sys.stderr,
    )
    logging.getLogger("sklearn").setLevel(logging.WARNING)


def _seed(value: str) -> int:
    seed = int(value, 0)
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return seed


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpc_lab", description="Contrastive predictive coding on synthetic tasks")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", help="experiment JSON (defaults when omitted)")
        p.add_argument("--seed", type=_seed, help="overrides training.seed")
        p.add_argument("--out", help="output directory (default: $CPC_LAB_OUT or ./runs)")
        return p

    p = common(sub.add_parser("train", help="train a CPC model or pair critic"))
    p.add_argument("--print-config", action="store_true", help="print the fully-defaulted config and exit")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval-mi", help="InfoNCE bound and MINE against the true MI"))
    p.add_argument("--checkpoint", help="trained pair-critic checkpoint")
    p.add_argument("--oracle", action="store_true", help="score with the true density ratio")
    p.add_argument("--n", type=int, help="candidates per context (default contrastive.num_negatives)")
    p.add_argument("--batches", type=int, help="evaluation batches (default eval.batches)")
    p.add_argument("--check", action="store_true", help="exit 3 if the bound exceeds true MI + 3 SE")
    p.set_defaults(func=cmd_eval_mi)

    p = common(sub.add_parser("ablate", help="train + probe per setting of one axis"))
    p.add_argument("--axis", choices=("steps", "negatives"), required=True)
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("probe", help="linear probes on frozen features"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--random-init", action="store_true", help="tag the checkpoint as random-init")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", help="also write gradcheck.json here")
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("gen-data", help="dump train/val/test sequence datasets"))
    p.set_defaults(func=cmd_gen_data)

    sub.add_parser("print-config", help="print the default config").set_defaults(func=lambda args: print_config())
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or config.EXIT_OK
    except ConfigError as e:
        logger.error("Config error: %s", e)
        for field in e.fields:
            logger.error("  offending field: %s", field)
        return config.EXIT_CONFIG_ERROR
    except CpcLabError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return config.EXIT_FAILURE
    except Exception:
        logger.exception("Unexpected error")
        return config.EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
