# handlers/gradcheck_handler.py
import logging
from typing import Optional, Sequence

import artifacts
import config
from gradcheck import GradCase, all_passed, default_cases, run_gradcheck
from handlers.common import emit

logger = logging.getLogger(__name__)


def cmd_gradcheck(args, cases: Optional[Sequence[GradCase]] = None) -> int:
    """Exit 0 when every op passes, EXIT_PROPERTY_VIOLATION otherwise."""
    seed = args.seed if getattr(args, "seed", None) is not None else 0
    results = run_gradcheck(default_cases(seed) if cases is None else cases)
    passed = all_passed(results)
    body = {"passed": passed, "tolerance": config.GRADCHECK_TOLERANCE, "eps": config.GRADCHECK_EPS,
            "results": [r.to_dict() for r in results]}
    out = getattr(args, "out", None)
    emit(artifacts.report("gradcheck", body), artifacts.setup_output_dir(out) / "gradcheck.json" if out else None)
    if not passed:
        failed = [r.name for r in results if not r.passed]
        logger.error("Gradient check failed for: %s", ", ".join(failed))
        return config.EXIT_PROPERTY_VIOLATION
    return config.EXIT_OK
