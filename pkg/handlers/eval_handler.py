# handlers/eval_handler.py
import logging

import artifacts
import config
from errors import ConfigError, UnsupportedTaskError
from handlers.common import config_from_args, emit
from model import PairCritic
from synthdata import DiscreteJointTask, GaussianPairTask
from training import MiEstimate, critic_scorer, estimate_mi, oracle_scorer
from utils import make_rng

logger = logging.getLogger(__name__)

STREAM_EVAL_MI = 5


def bound_violations(estimate: MiEstimate, sigmas: float = 3.0) -> list:
    """Bound checks that must hold for any scorer."""
    problems = []
    if estimate.bound > estimate.true_mi + sigmas * estimate.bound_se + 1e-12:
        problems.append(f"bound {estimate.bound:.4f} exceeds true MI {estimate.true_mi:.4f} "
                        f"+ {sigmas:g} SE ({estimate.bound_se:.4f})")
    if estimate.exact_bound is not None and estimate.exact_bound > estimate.true_mi + 1e-12:
        problems.append(f"exact bound {estimate.exact_bound:.6f} exceeds true MI {estimate.true_mi:.6f}")
    return problems


def cmd_eval_mi(args) -> int:
    cfg = config_from_args(args)
    task = cfg.task
    if not isinstance(task, (GaussianPairTask, DiscreteJointTask)):
        raise UnsupportedTaskError(f"eval-mi needs a task with known MI (gaussian or discrete), got {task.kind}")
    n = args.n or cfg.contrastive.num_negatives
    batches = args.batches or cfg.eval.batches
    if args.oracle:
        scorer, name = oracle_scorer(task), "oracle"
    else:
        if not args.checkpoint:
            raise ConfigError("eval-mi needs --checkpoint or --oracle", fields=["--checkpoint"])
        critic = artifacts.load_checkpoint(args.checkpoint)
        if not isinstance(critic, PairCritic):
            raise UnsupportedTaskError(f"{args.checkpoint} is a {critic.kind} checkpoint; eval-mi needs a critic")
        scorer, name = critic_scorer(task, critic), "model"

    estimate = estimate_mi(task, scorer, n, batches, make_rng(cfg.training.seed, STREAM_EVAL_MI), name)
    logger.info("N=%d, %s scorer: bound %.4f +- %.4f nats, MINE %.4f, true MI %.4f",
                n, name, estimate.bound, estimate.bound_se, estimate.mine, estimate.true_mi)
    out_dir = artifacts.setup_output_dir(cfg.output_dir())
    emit(artifacts.report("mi-estimate", estimate.to_dict(), cfg.hash()), out_dir / "mi_estimate.json")

    if args.check:
        problems = bound_violations(estimate)
        for problem in problems:
            logger.error("Bound check failed: %s", problem)
        if problems:
            return config.EXIT_PROPERTY_VIOLATION
    return config.EXIT_OK
