"""Training loops and held-out evaluation.

Public API:
  - cpc_loss(model, weights, observations, sources, ...) -> (loss, HorizonStats)
  - train_cpc(cfg) -> TrainResult
  - train_pair_critic(cfg) -> TrainResult
  - train_supervised(cfg, target, sequences) -> CpcModel (with head.* params)
  - estimate_mi(task, scorer, n, batches, rng) -> MiEstimate
  - MetricRow, metric_columns(k)

RNG streams (all derived from training.seed with utils.make_rng):
  0 model init, 1 training batches, 2 held-out evaluation data,
  3 evaluation negatives (reset at every logging interval), 4 supervised ceiling.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

import config
from autodiff import (AdamState, Tape, Tensor, adam_step, add, backward, getitem, logsumexp, matmul, mul,
                      reduce_mean, reduce_sum, reshape, sub)
from contrastive import (FramePool, NegativeSamplingStrategy, infonce_loss_batch, infonce_row_losses,
                         mi_lower_bound, mine_estimate, mine_loss, prediction_accuracy_batch, sample_candidates,
                         split_scores, expected_infonce_exhaustive, oracle_log_scores)
from errors import UnsupportedTaskError
from experiment import ExperimentConfig
from model import (CpcModel, PairCritic, contextualize, critic_scores, encode, latent_labels, pair_features,
                   predict)
from synthdata import (DiscreteJointTask, GaussianPairTask, LatentMarkovSequenceTask, PairTask, SequenceBatch,
                       grouped_sources, log_density_ratio, sample_pairs, sample_sequences, true_mi)
from utils import loss_slope, make_rng, mean_and_se

logger = logging.getLogger(__name__)

STREAM_INIT, STREAM_TRAIN, STREAM_EVAL_DATA, STREAM_EVAL_NEGATIVES, STREAM_SUPERVISED = range(5)


# ==================================
# ===== Metric rows ================
# ==================================

def metric_columns(max_horizon: int) -> List[str]:
    """metrics.csv header; depends on K only."""
    ks = range(1, max_horizon + 1)
    return (["step"] + [f"loss_k{k}" for k in ks] + [f"acc_k{k}" for k in ks]
            + ["loss_mean", "mi_bound", "mine"])


@dataclass
class HorizonStats:
    """Per-horizon mean loss, accuracy and MINE value for one batch."""

    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)
    mine: List[float] = field(default_factory=list)


@dataclass
class MetricRow:
    step: int
    losses: List[float]
    accuracies: List[float]
    loss_mean: float
    mi_bound: float
    mine: float
    wall_clock: float = 0.0

    def as_csv(self) -> List[str]:
        values = [*self.losses, *self.accuracies, self.loss_mean, self.mi_bound, self.mine]
        return [str(self.step)] + [repr(float(v)) for v in values]


@dataclass
class TrainResult:
    model: Union[CpcModel, PairCritic]
    initial_params: Dict[str, np.ndarray]
    rows: List[MetricRow]
    config: ExperimentConfig

    @property
    def final_slope(self) -> float:
        return loss_slope([r.step for r in self.rows], [r.loss_mean for r in self.rows])


def _row(step: int, stats: HorizonStats, n: int, started: float) -> MetricRow:
    loss_mean = float(np.mean(stats.losses))
    return MetricRow(
        step=step,
        losses=list(stats.losses),
        accuracies=list(stats.accuracies),
        loss_mean=loss_mean,
        mi_bound=mi_lower_bound(loss_mean, n),
        mine=float(np.mean(stats.mine)) if stats.mine else float("nan"),
        wall_clock=time.perf_counter() - started,
    )


def _record(stats: HorizonStats, scores: np.ndarray, positive_index) -> None:
    stats.losses.append(float(np.mean(infonce_row_losses(scores, positive_index))))
    if scores.shape[1] >= 2:
        stats.accuracies.append(prediction_accuracy_batch(scores, positive_index))
        stats.mine.append(mine_estimate(*split_scores(scores, positive_index)))
    else:
        stats.accuracies.append(1.0)


def _logging_steps(steps: int, every: int) -> set:
    marks = set(range(every, steps + 1, every))
    if steps > 0:
        marks.add(steps)
    return marks


def _progress(iterable, desc: str):
    return tqdm(iterable, desc=desc, disable=not config.SHOW_PROGRESS, leave=False)


# ==================================
# ===== CPC ========================
# ==================================

def _channels_first(observations: np.ndarray) -> np.ndarray:
    """[n, T, D] observations -> [n, D, T] encoder input."""
    return np.ascontiguousarray(np.transpose(observations, (0, 2, 1)))


def cpc_loss(model: CpcModel, weights: Optional[Dict[str, Tensor]], observations: np.ndarray,
             sources: np.ndarray, strategy: NegativeSamplingStrategy, num_candidates: int,
             rng: np.random.Generator, objective: str = "infonce",
             reduction: str = "mean") -> Tuple[Tensor, HorizonStats]:
    """Summed per-horizon contrastive loss over k = 1..K for one minibatch.

    observations are [B, T, D]; negatives are drawn from the latent frames of
    the same minibatch under `strategy`.
    """
    x = _channels_first(observations)
    z = encode(x, model, weights)
    c = contextualize(z, model, weights)
    batch, frames, d_z = z.shape
    z_flat = reshape(z, (batch * frames, d_z))
    c_flat = reshape(c, (batch * frames, model.d_c))
    pool = FramePool.from_sources(sources, frames)

    total: Optional[Tensor] = None
    stats = HorizonStats()
    for k in range(1, model.max_horizon + 1):
        cands = sample_candidates(pool, strategy, k, num_candidates, rng)
        m = len(cands)
        pred = predict(getitem(c_flat, cands.context_index), k, model, weights)
        targets = getitem(z_flat, cands.candidates)
        scores = reduce_sum(mul(targets, reshape(pred, (m, 1, d_z))), axis=2)
        if objective == "mine":
            loss_k = mine_loss(scores, cands.positive_index)
        else:
            loss_k = infonce_loss_batch(scores, cands.positive_index, reduction)
        _record(stats, scores.value, cands.positive_index)
        total = loss_k if total is None else add(total, loss_k)
    return total, stats


def _train_batch(cfg: ExperimentConfig, rng: np.random.Generator) -> SequenceBatch:
    task = cfg.task
    sources = grouped_sources(task, cfg.training.batch_size, cfg.training.sequences_per_source, rng)
    return sample_sequences(task, cfg.training.batch_size, rng, sources=sources)


def evaluate_cpc(model: CpcModel, cfg: ExperimentConfig, eval_batch: SequenceBatch) -> HorizonStats:
    """Metrics on a fixed held-out batch; negatives come from a stream reset on every call."""
    rng = make_rng(cfg.training.seed, STREAM_EVAL_NEGATIVES)
    _, stats = cpc_loss(model, None, eval_batch.observations, eval_batch.sources,
                        cfg.contrastive.strategy, cfg.contrastive.num_negatives, rng,
                        cfg.contrastive.objective, cfg.training.reduction)
    return stats


def eval_sequences(cfg: ExperimentConfig) -> SequenceBatch:
    rng = make_rng(cfg.training.seed, STREAM_EVAL_DATA)
    n = cfg.eval.sequences
    sources = grouped_sources(cfg.task, n, cfg.training.sequences_per_source, rng)
    return sample_sequences(cfg.task, n, rng, sources=sources)


def init_cpc_model(cfg: ExperimentConfig) -> CpcModel:
    seed = int(make_rng(cfg.training.seed, STREAM_INIT).integers(2 ** 63))
    return CpcModel.init(cfg.model, cfg.task.obs_dim, seed)


def train_cpc(cfg: ExperimentConfig, on_row: Optional[Callable[[MetricRow], None]] = None) -> TrainResult:
    """Adam on the contrastive objective over all horizons 1..K."""
    if not isinstance(cfg.task, LatentMarkovSequenceTask):
        raise UnsupportedTaskError(f"train_cpc needs a markov task, got {cfg.task.kind}")
    model = init_cpc_model(cfg)
    initial = {k: v.copy() for k, v in model.params.items()}
    state = AdamState(learning_rate=cfg.training.learning_rate)
    rng = make_rng(cfg.training.seed, STREAM_TRAIN)
    held_out = eval_sequences(cfg)
    marks = _logging_steps(cfg.training.steps, cfg.training.log_every)
    n = cfg.contrastive.num_negatives
    rows: List[MetricRow] = []
    started = time.perf_counter()
    logger.info("Training CPC: %d parameters, K=%d, N=%d, strategy=%s, %d steps",
                model.num_parameters(), model.max_horizon, n, cfg.contrastive.strategy.value,
                cfg.training.steps)

    for step in _progress(range(1, cfg.training.steps + 1), "train"):
        batch = _train_batch(cfg, rng)
        tape = Tape()
        weights = model.watch(tape)
        loss, _ = cpc_loss(model, weights, batch.observations, batch.sources, cfg.contrastive.strategy,
                           n, rng, cfg.contrastive.objective, cfg.training.reduction)
        grads = backward(loss)
        new_params, state = adam_step(model.params, {k: grads[t.node].value for k, t in weights.items()}, state)
        model = model.with_params(new_params)
        if step in marks:
            row = _row(step, evaluate_cpc(model, cfg, held_out), n, started)
            rows.append(row)
            logger.info("step %d: loss %.4f, bound %.4f nats, acc_k1 %.3f",
                        step, row.loss_mean, row.mi_bound, row.accuracies[0])
            if on_row:
                on_row(row)
    return TrainResult(model, initial, rows, cfg)


# ==================================
# ===== Pair critic ================
# ==================================

def _pair_loss(critic: PairCritic, weights, task: PairTask, n: int, rng: np.random.Generator,
               objective: str, reduction: str) -> Tuple[Tensor, np.ndarray]:
    """In-batch negatives: n pairs, row i scores every x_j against c_i, positive on the diagonal."""
    x, c = sample_pairs(task, n, rng)
    x_feat, c_feat = pair_features(task, x, c)
    scores = critic_scores(critic, x_feat, c_feat, weights)
    diagonal = np.arange(n)
    if objective == "mine":
        return mine_loss(scores, diagonal), scores.value
    return infonce_loss_batch(scores, diagonal, reduction), scores.value


def init_pair_critic(cfg: ExperimentConfig) -> PairCritic:
    seed = int(make_rng(cfg.training.seed, STREAM_INIT).integers(2 ** 63))
    return PairCritic.for_task(cfg.model, cfg.task, seed)


def train_pair_critic(cfg: ExperimentConfig,
                      on_row: Optional[Callable[[MetricRow], None]] = None) -> TrainResult:
    if not isinstance(cfg.task, (GaussianPairTask, DiscreteJointTask)):
        raise UnsupportedTaskError(f"train_pair_critic needs a gaussian or discrete task, got {cfg.task.kind}")
    critic = init_pair_critic(cfg)
    initial = {k: v.copy() for k, v in critic.params.items()}
    state = AdamState(learning_rate=cfg.training.learning_rate)
    rng = make_rng(cfg.training.seed, STREAM_TRAIN)
    marks = _logging_steps(cfg.training.steps, cfg.training.log_every)
    n = cfg.contrastive.num_negatives
    rows: List[MetricRow] = []
    started = time.perf_counter()
    logger.info("Training pair critic on %s task: N=%d, %d steps", cfg.task.kind, n, cfg.training.steps)

    for step in _progress(range(1, cfg.training.steps + 1), "train"):
        tape = Tape()
        weights = critic.watch(tape)
        loss, _ = _pair_loss(critic, weights, cfg.task, n, rng, cfg.contrastive.objective, cfg.training.reduction)
        grads = backward(loss)
        new_params, state = adam_step(critic.params, {k: grads[t.node].value for k, t in weights.items()}, state)
        critic = critic.with_params(new_params)
        if step in marks:
            eval_rng = make_rng(cfg.training.seed, STREAM_EVAL_DATA)
            stats = HorizonStats()
            for _ in range(cfg.eval.batches):
                _, scores = _pair_loss(critic, None, cfg.task, n, eval_rng, "infonce", "mean")
                _record(stats, scores, np.arange(n))
            row = _row(step, HorizonStats([float(np.mean(stats.losses))], [float(np.mean(stats.accuracies))],
                                          stats.mine), n, started)
            rows.append(row)
            logger.info("step %d: loss %.4f, bound %.4f nats", step, row.loss_mean, row.mi_bound)
            if on_row:
                on_row(row)
    return TrainResult(critic, initial, rows, cfg)


def train(cfg: ExperimentConfig, on_row: Optional[Callable[[MetricRow], None]] = None) -> TrainResult:
    if cfg.is_sequence_task:
        return train_cpc(cfg, on_row)
    return train_pair_critic(cfg, on_row)


# ==================================
# ===== MI estimation ==============
# ==================================

Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class MiEstimate:
    scorer: str
    n: int
    batches: int
    true_mi: float
    loss: float
    loss_se: float
    bound: float
    bound_se: float
    mine: float
    mine_se: float
    exact_bound: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)


def oracle_scorer(task: PairTask) -> Scorer:
    """S[i, j] = log p(x_j|c_i)/p(x_j)."""
    def scores(x, c):
        if isinstance(task, DiscreteJointTask):
            return log_density_ratio(task, np.asarray(x)[None, :], np.asarray(c)[:, None])
        xs = np.asarray(x, dtype=np.float64).reshape(-1, task.dim)
        cs = np.asarray(c, dtype=np.float64).reshape(-1, task.dim)
        return log_density_ratio(task, xs[None, :, :], cs[:, None, :])
    return scores


def critic_scorer(task: PairTask, critic: PairCritic) -> Scorer:
    def scores(x, c):
        x_feat, c_feat = pair_features(task, x, c)
        return critic_scores(critic, x_feat, c_feat).value
    return scores


def estimate_mi(task: PairTask, scorer: Scorer, n: int, batches: int, rng: np.random.Generator,
                scorer_name: str = "model") -> MiEstimate:
    """Mean InfoNCE loss, bound and MINE over `batches` fresh batches of n pairs."""
    losses, mines = [], []
    diagonal = np.arange(n)
    for _ in range(batches):
        x, c = sample_pairs(task, n, rng)
        scores = np.asarray(scorer(x, c), dtype=np.float64)
        losses.append(float(np.mean(infonce_row_losses(scores, diagonal))))
        if n >= 2:
            mines.append(mine_estimate(*split_scores(scores, diagonal)))
    loss, loss_se = mean_and_se(losses)
    mine, mine_se = mean_and_se(mines)
    exact = None
    if scorer_name == "oracle" and isinstance(task, DiscreteJointTask):
        exact = mi_lower_bound(expected_infonce_exhaustive(task, oracle_log_scores(task), n), n)
    return MiEstimate(scorer=scorer_name, n=n, batches=batches, true_mi=true_mi(task), loss=loss,
                      loss_se=loss_se, bound=mi_lower_bound(loss, n), bound_se=loss_se, mine=mine,
                      mine_se=mine_se, exact_bound=exact)


# ==================================
# ===== Supervised ceiling =========
# ==================================

def _frame_labels(sequences: SequenceBatch, target: str, cfg: ExperimentConfig) -> np.ndarray:
    return latent_labels(sequences.labels(target), cfg.model.encoder)


def num_classes(task: LatentMarkovSequenceTask, target: str) -> int:
    return task.num_states if target == "hidden-state" else task.num_sources


def supervised_loss(model: CpcModel, weights: Dict[str, Tensor], observations: np.ndarray,
                    labels: np.ndarray) -> Tensor:
    """Mean per-frame cross-entropy of a linear softmax head on c_t."""
    c = contextualize(encode(_channels_first(observations), model, weights), model, weights)
    batch, frames, d_c = c.shape
    logits = add(matmul(reshape(c, (batch * frames, d_c)), weights["head.w"]), weights["head.b"])
    flat = labels.reshape(-1)
    picked = getitem(logits, (np.arange(flat.size), flat))
    return reduce_mean(sub(logsumexp(logits, axis=1), picked))


def train_supervised(cfg: ExperimentConfig, target: str, sequences: SequenceBatch,
                     steps: Optional[int] = None) -> CpcModel:
    """Same encoder and GRU trained end to end with a linear head on per-frame labels."""
    task = cfg.task
    classes = num_classes(task, target)
    model = init_cpc_model(cfg)
    rng = make_rng(cfg.training.seed, STREAM_SUPERVISED)
    bound = 1.0 / np.sqrt(model.d_c)
    params = dict(model.params)
    params["head.w"] = rng.uniform(-bound, bound, size=(model.d_c, classes))
    params["head.b"] = np.zeros(classes)
    model = model.with_params(params)
    labels = _frame_labels(sequences, target, cfg)
    state = AdamState(learning_rate=cfg.training.learning_rate)
    steps = cfg.probe.supervised_steps if steps is None else steps
    size = min(cfg.training.batch_size, len(sequences))
    logger.info("Training supervised ceiling for %s: %d steps", target, steps)

    for _ in _progress(range(steps), f"supervised {target}"):
        index = rng.choice(len(sequences), size=size, replace=False)
        tape = Tape()
        weights = model.watch(tape)
        loss = supervised_loss(model, weights, sequences.observations[index], labels[index])
        grads = backward(loss)
        new_params, state = adam_step(model.params, {k: grads[t.node].value for k, t in weights.items()}, state)
        model = model.with_params(new_params)
    return model
