"""Finite-difference checks for every differentiable op and the composed losses.

Each GradCase is a scalar function of named inputs. Outputs of non-scalar
ops are contracted with a fixed random projection so every gradient entry
is exercised.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

import config
from autodiff import (LossFn, Tensor, add, check_gradients, conv1d, div, exp, getitem, gru_step, log,
                      logsumexp, matmul, mul, reduce_mean, reduce_sum, relu, reshape, sigmoid, stack, sub,
                      tanh, transpose)
from contrastive import NegativeSamplingStrategy, infonce_loss, infonce_loss_batch, mine_loss
from model import CpcModel, EncoderConfig, ModelConfig, PairCritic, critic_scores
from training import cpc_loss

logger = logging.getLogger(__name__)


@dataclass
class GradCase:
    name: str
    fn: LossFn
    inputs: Dict[str, np.ndarray]


@dataclass
class GradResult:
    name: str
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = config.GRADCHECK_TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> Dict[str, object]:
        return {"op": self.name, "passed": self.passed, "max_rel_error": self.max_error,
                "per_input": dict(self.errors)}


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    return reduce_sum(mul(out, weights))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    values = rng.standard_normal(shape)
    return np.where(np.abs(values) < margin, np.sign(values + 1e-12) * margin, values)


def default_cases(seed: int = 0) -> List[GradCase]:
    rng = np.random.default_rng(seed)
    randn = rng.standard_normal
    cases: List[GradCase] = []

    r = randn((3, 4))
    cases.append(GradCase(
        "add/sub/mul/div (broadcast)",
        lambda t: _project(div(sub(mul(add(t["a"], t["b"]), t["a"]), t["b"]), t["c"]), r),
        {"a": randn((3, 4)), "b": randn((4,)), "c": rng.uniform(0.5, 2.0, (3, 1))},
    ))
    cases.append(GradCase(
        "exp/log",
        lambda t: add(_project(exp(t["a"]), r), _project(log(t["p"]), r)),
        {"a": randn((3, 4)) * 0.5, "p": rng.uniform(0.5, 2.0, (3, 4))},
    ))
    cases.append(GradCase(
        "relu/sigmoid/tanh",
        lambda t: add(_project(relu(t["a"]), r), _project(mul(sigmoid(t["b"]), tanh(t["b"])), r)),
        {"a": _away_from_zero(rng, (3, 4)), "b": randn((3, 4))},
    ))
    r_stack = randn((2, 4, 3))
    idx = np.array([2, 0, 2])
    cases.append(GradCase(
        "reshape/transpose/getitem/stack",
        lambda t: add(_project(stack([transpose(t["a"]), reshape(t["b"], (4, 3))]), r_stack),
                      reduce_sum(getitem(t["a"], (idx, slice(1, 3))))),
        {"a": randn((3, 4)), "b": randn((2, 6))},
    ))
    r_sum = randn((4,))
    cases.append(GradCase(
        "sum/mean",
        lambda t: add(_project(reduce_sum(t["a"], axis=0), r_sum), reduce_mean(mul(t["a"], t["a"]))),
        {"a": randn((3, 4))},
    ))
    r_mm = randn((2, 3, 5))
    cases.append(GradCase(
        "matmul",
        lambda t: _project(matmul(t["a"], t["b"]), r_mm),
        {"a": randn((2, 3, 4)), "b": randn((4, 5))},
    ))
    r_conv = randn((2, 4, 5))
    cases.append(GradCase(
        "conv1d",
        lambda t: _project(conv1d(t["x"], t["kernel"], stride=2), r_conv),
        {"x": randn((2, 3, 11)), "kernel": randn((4, 3, 3))},
    ))
    r_gru = randn((2, 4))
    cases.append(GradCase(
        "gru_step",
        lambda t: _project(gru_step(t["h"], t["x"], {k: t[k] for k in ("w_x", "w_h", "b_x", "b_h")}), r_gru),
        {"h": randn((2, 4)) * 0.5, "x": randn((2, 3)), "w_x": randn((3, 12)) * 0.5,
         "w_h": randn((4, 12)) * 0.5, "b_x": randn((12,)) * 0.1, "b_h": randn((12,)) * 0.1},
    ))
    r_lse = randn((3,))
    cases.append(GradCase(
        "logsumexp",
        lambda t: _project(logsumexp(t["v"], axis=1), r_lse),
        {"v": randn((3, 5)) * 3.0},
    ))
    r_comp = randn((2, 5, 2))
    cases.append(GradCase(
        "conv1d -> relu -> matmul",
        lambda t: _project(matmul(transpose(relu(conv1d(t["x"], t["kernel"], 2)), (0, 2, 1)), t["w"]), r_comp),
        {"x": randn((2, 2, 12)), "kernel": randn((3, 2, 4)), "w": randn((3, 2))},
    ))
    cases.append(GradCase(
        "infonce_loss",
        lambda t: infonce_loss(t["scores"], 2),
        {"scores": randn((6,)) * 2.0},
    ))
    cases.append(GradCase(
        "mine_loss",
        lambda t: mine_loss(t["scores"], np.array([0, 1, 2, 0])),
        {"scores": randn((4, 5))},
    ))
    cases.append(_cpc_case(rng))
    cases.append(_critic_case(rng))
    return cases


def _cpc_case(rng: np.random.Generator) -> GradCase:
    model_config = ModelConfig(encoder=EncoderConfig(strides=[2], widths=[2], channels=[3]), d_c=3, max_horizon=2)
    model = CpcModel.init(model_config, in_channels=2, seed=int(rng.integers(2 ** 31)))
    observations = rng.standard_normal((2, 12, 2))
    sources = np.array([0, 0])

    def fn(weights):
        # identical negatives on every evaluation
        loss, _ = cpc_loss(model, weights, observations, sources, NegativeSamplingStrategy.MIXED_SOURCE,
                           4, np.random.default_rng(7))
        return loss

    return GradCase("cpc infonce loss (encoder + gru + W_k)", fn, dict(model.params))


def _critic_case(rng: np.random.Generator) -> GradCase:
    critic = PairCritic.init(ModelConfig(critic_hidden=4, critic_dim=3), 2, 2, seed=int(rng.integers(2 ** 31)))
    x, c = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    return GradCase(
        "pair critic infonce loss",
        lambda w: infonce_loss_batch(critic_scores(critic, x, c, w), np.arange(5)),
        dict(critic.params),
    )


def run_gradcheck(cases: Optional[Sequence[GradCase]] = None,
                  tolerance: float = config.GRADCHECK_TOLERANCE,
                  eps: float = config.GRADCHECK_EPS) -> List[GradResult]:
    """Check every case; an empty case list is a vacuous pass."""
    cases = default_cases() if cases is None else list(cases)
    results = []
    for case in cases:
        errors = check_gradients(case.fn, case.inputs, eps) if case.inputs else {}
        result = GradResult(case.name, errors, tolerance)
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, "%-40s max rel error %.3e  %s", case.name, result.max_error,
                   "ok" if result.passed else "FAIL")
        results.append(result)
    return results


def all_passed(results: Sequence[GradResult]) -> bool:
    return all(r.passed for r in results)
