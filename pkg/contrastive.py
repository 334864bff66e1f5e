"""InfoNCE, negative sampling, the MI lower bound, and the MINE estimator.

Public API:
  - infonce_loss(log_scores, positive_index) / infonce_loss_batch(scores, ...)
  - mine_loss(scores, ...) / mine_estimate(positive_scores, negative_scores)
  - mi_lower_bound(mean_loss, n), optimal_posterior(ratios)
  - prediction_accuracy(log_scores, positive_index) / prediction_accuracy_batch
  - NegativeSamplingStrategy, FramePool, draw_negatives, ContrastiveBatch, sample_candidates
  - expected_infonce_exhaustive / expected_accuracy_exhaustive (discrete oracle)

Score matrices are [M, N]: one row per (context, horizon) pair, one column
per candidate. Scores are log f, exponentiated only inside logsumexp.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from itertools import combinations_with_replacement
from typing import Union

import numpy as np
from scipy.special import gammaln
from scipy.special import logsumexp as np_logsumexp

from autodiff import Tensor, getitem, logsumexp, reduce_mean, reduce_sum, sub
from errors import DomainError, ShapeError, StrategyInfeasibleError
from synthdata import DiscreteJointTask

logger = logging.getLogger(__name__)

PositiveIndex = Union[int, np.ndarray]


# ==================================
# ===== Losses and bounds ==========
# ==================================

def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _positive_columns(positive_index: PositiveIndex, rows: int, cols: int) -> np.ndarray:
    pos = np.broadcast_to(np.asarray(positive_index, dtype=np.int64), (rows,))
    if np.any(pos < 0) or np.any(pos >= cols):
        raise ShapeError(f"positive index out of range for {cols} candidates")
    return pos


def infonce_loss(log_scores, positive_index: int) -> Tensor:
    """-(s[pos] - logsumexp(s)) for one score vector."""
    s = _lift(log_scores)
    if s.ndim != 1 or s.shape[0] == 0:
        raise ShapeError(f"infonce_loss needs a non-empty score vector, got shape {s.shape}")
    if not 0 <= positive_index < s.shape[0]:
        raise ShapeError(f"positive index {positive_index} out of range for {s.shape[0]} scores")
    return sub(logsumexp(s), s[positive_index])


def infonce_loss_batch(scores, positive_index: PositiveIndex = 0, reduction: str = "mean") -> Tensor:
    """InfoNCE over every row of an [M, N] score matrix, reduced by mean or sum."""
    s = _lift(scores)
    if s.ndim != 2 or s.shape[0] == 0 or s.shape[1] == 0:
        raise ShapeError(f"infonce_loss_batch needs a non-empty [M, N] matrix, got {s.shape}")
    rows, cols = s.shape
    pos = _positive_columns(positive_index, rows, cols)
    per_row = sub(logsumexp(s, axis=1), getitem(s, (np.arange(rows), pos)))
    if reduction == "mean":
        return reduce_mean(per_row)
    if reduction == "sum":
        return reduce_sum(per_row)
    raise DomainError(f"unknown reduction {reduction!r}")


def infonce_row_losses(scores: np.ndarray, positive_index: PositiveIndex = 0) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    pos = _positive_columns(positive_index, scores.shape[0], scores.shape[1])
    return np_logsumexp(scores, axis=1) - scores[np.arange(scores.shape[0]), pos]


def _negative_columns(pos: np.ndarray, cols: int) -> np.ndarray:
    grid = np.broadcast_to(np.arange(cols), (pos.size, cols))
    return grid[grid != pos[:, None]].reshape(pos.size, cols - 1)


def split_scores(scores: np.ndarray, positive_index: PositiveIndex = 0):
    """(positive scores [M], negative scores [M, N-1]) of a score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    rows, cols = scores.shape
    pos = _positive_columns(positive_index, rows, cols)
    neg = _negative_columns(pos, cols)
    return scores[np.arange(rows), pos], scores[np.arange(rows)[:, None], neg]


def mine_estimate(positive_scores, negative_scores) -> float:
    """mean F_pos - mean over contexts of log((1/(N-1)) sum_neg e^F)."""
    pos = np.asarray(positive_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if neg.ndim == 1:
        neg = neg[None, :]
    if pos.size < 1 or neg.shape[0] != pos.size:
        raise DomainError("mine_estimate needs one row of negatives per positive")
    if neg.shape[1] < 1:
        raise DomainError("mine_estimate needs at least one negative per context")
    return float(pos.mean() - np.mean(np_logsumexp(neg, axis=1) - np.log(neg.shape[1])))


def mine_loss(scores, positive_index: PositiveIndex = 0) -> Tensor:
    """Negative MINE estimate of an [M, N] score matrix, differentiable."""
    s = _lift(scores)
    rows, cols = s.shape
    if cols < 2:
        raise DomainError("mine_loss needs at least one negative per context")
    pos = _positive_columns(positive_index, rows, cols)
    neg = getitem(s, (np.arange(rows)[:, None], _negative_columns(pos, cols)))
    positive_term = reduce_mean(getitem(s, (np.arange(rows), pos)))
    negative_term = reduce_mean(logsumexp(neg, axis=1))
    return sub(sub(negative_term, positive_term), float(np.log(cols - 1)))


def mi_lower_bound(mean_loss: float, n: int) -> float:
    """log(N) - L_N in nats."""
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    return float(np.log(n) - mean_loss)


def optimal_posterior(density_ratios) -> np.ndarray:
    """Probability that each candidate is the positive: ratio_i / sum_j ratio_j."""
    ratios = np.asarray(density_ratios, dtype=np.float64)
    if ratios.size == 0 or np.any(ratios <= 0):
        raise DomainError("density ratios must be a non-empty list of positive reals")
    return ratios / ratios.sum()


def prediction_accuracy(log_scores, positive_index: int) -> float:
    """1.0 when the positive strictly beats every negative (ties fail), else 0.0."""
    s = np.asarray(log_scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] < 2:
        raise DomainError("prediction_accuracy needs N >= 2 scores")
    if not 0 <= positive_index < s.shape[0]:
        raise ShapeError(f"positive index {positive_index} out of range for {s.shape[0]} scores")
    return float(s[positive_index] > np.delete(s, positive_index).max())


def prediction_accuracy_batch(scores, positive_index: PositiveIndex = 0) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise DomainError("prediction_accuracy needs N >= 2 scores")
    positives, negatives = split_scores(scores, positive_index)
    return float(np.mean(positives > negatives.max(axis=1)))


# ==================================
# ===== Negative sampling ==========
# ==================================

class NegativeSamplingStrategy(str, Enum):
    MIXED_SOURCE = "mixed_source"
    SAME_SOURCE = "same_source"
    MIXED_SOURCE_EXCLUDING_CURRENT = "mixed_source_excl"
    SAME_SOURCE_EXCLUDING_CURRENT = "same_source_excl"
    CURRENT_SEQUENCE_ONLY = "current_sequence"

    @property
    def label(self) -> str:
        return _LABELS[self]

    def admits(self, sequence_ids: np.ndarray, source_ids: np.ndarray,
               current_sequence, current_source) -> np.ndarray:
        """Provenance predicate, elementwise over frames."""
        same_seq = sequence_ids == current_sequence
        same_src = source_ids == current_source
        if self is NegativeSamplingStrategy.MIXED_SOURCE:
            return np.ones_like(same_seq, dtype=bool)
        if self is NegativeSamplingStrategy.SAME_SOURCE:
            return same_src
        if self is NegativeSamplingStrategy.MIXED_SOURCE_EXCLUDING_CURRENT:
            return ~same_seq
        if self is NegativeSamplingStrategy.SAME_SOURCE_EXCLUDING_CURRENT:
            return same_src & ~same_seq
        return same_seq


_LABELS = {
    NegativeSamplingStrategy.MIXED_SOURCE: "Mixed speaker",
    NegativeSamplingStrategy.SAME_SOURCE: "Same speaker",
    NegativeSamplingStrategy.MIXED_SOURCE_EXCLUDING_CURRENT: "Mixed speaker (excl.)",
    NegativeSamplingStrategy.SAME_SOURCE_EXCLUDING_CURRENT: "Same speaker (excl.)",
    NegativeSamplingStrategy.CURRENT_SEQUENCE_ONLY: "Current sequence only",
}


@dataclass
class FramePool:
    """Latent frames of a minibatch, stored sequence-major (frame = seq * T + t)."""

    sequence_ids: np.ndarray
    source_ids: np.ndarray
    frames_per_sequence: int

    @classmethod
    def from_sources(cls, sources, frames_per_sequence: int) -> "FramePool":
        sources = np.asarray(sources, dtype=np.int64)
        return cls(np.repeat(np.arange(sources.size), frames_per_sequence),
                   np.repeat(sources, frames_per_sequence), frames_per_sequence)

    def __len__(self) -> int:
        return int(self.sequence_ids.size)

    @property
    def num_sequences(self) -> int:
        return len(self) // self.frames_per_sequence

    def source_of(self, sequence_id: int) -> int:
        return int(self.source_ids[sequence_id * self.frames_per_sequence])

    def eligible(self, strategy: NegativeSamplingStrategy, sequence_id: int, source_id: int) -> np.ndarray:
        return np.flatnonzero(strategy.admits(self.sequence_ids, self.source_ids, sequence_id, source_id))


def draw_negatives(pool: FramePool, strategy: NegativeSamplingStrategy, sequence_id: int,
                   source_id: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """`count` frame indices drawn uniformly (with replacement) from the eligible set."""
    strategy = NegativeSamplingStrategy(strategy)
    eligible = pool.eligible(strategy, sequence_id, source_id)
    if eligible.size == 0:
        raise StrategyInfeasibleError(
            f"strategy {strategy.value} has no eligible frames for sequence {sequence_id} (source {source_id})")
    return eligible[rng.integers(eligible.size, size=count)]


@dataclass
class ContrastiveBatch:
    """Candidates for every (context, horizon) pair of one horizon.

    candidates[:, positive_index] is z_{t+k}; the other N-1 columns are negatives.
    All indices refer to frames of the pool the batch was drawn from.
    """

    horizon: int
    context_index: np.ndarray   # [M]
    candidates: np.ndarray      # [M, N]
    positive_index: int
    sequence_ids: np.ndarray    # [M, N]
    source_ids: np.ndarray      # [M, N]
    context_sequence: np.ndarray
    context_source: np.ndarray

    def __len__(self) -> int:
        return int(self.candidates.shape[0])

    @property
    def num_candidates(self) -> int:
        return int(self.candidates.shape[1])

    def negative_mask(self) -> np.ndarray:
        mask = np.ones(self.num_candidates, dtype=bool)
        mask[self.positive_index] = False
        return mask

    def check_provenance(self, strategy: NegativeSamplingStrategy) -> bool:
        mask = self.negative_mask()
        ok = strategy.admits(self.sequence_ids[:, mask], self.source_ids[:, mask],
                             self.context_sequence[:, None], self.context_source[:, None])
        return bool(np.all(ok))


def sample_candidates(pool: FramePool, strategy: NegativeSamplingStrategy, horizon: int,
                      num_candidates: int, rng: np.random.Generator, positive_index: int = 0) -> ContrastiveBatch:
    """One positive plus N-1 drawn negatives for every valid context position of every pooled sequence."""
    if num_candidates < 1:
        raise DomainError(f"N must be >= 1, got {num_candidates}")
    if not 0 <= positive_index < num_candidates:
        raise ShapeError(f"positive index {positive_index} out of range for N={num_candidates}")
    strategy = NegativeSamplingStrategy(strategy)
    frames = pool.frames_per_sequence
    steps = max(frames - horizon, 0)
    negatives = num_candidates - 1
    mask = np.ones(num_candidates, dtype=bool)
    mask[positive_index] = False

    contexts, candidates = [], []
    for seq in range(pool.num_sequences):
        ctx = seq * frames + np.arange(steps)
        block = np.empty((steps, num_candidates), dtype=np.int64)
        block[:, positive_index] = ctx + horizon
        if negatives and steps:
            drawn = draw_negatives(pool, strategy, seq, pool.source_of(seq), steps * negatives, rng)
            block[:, mask] = drawn.reshape(steps, negatives)
        contexts.append(ctx)
        candidates.append(block)
    context_index = np.concatenate(contexts) if contexts else np.zeros(0, dtype=np.int64)
    cand = np.concatenate(candidates) if candidates else np.zeros((0, num_candidates), dtype=np.int64)
    return ContrastiveBatch(
        horizon=horizon,
        context_index=context_index,
        candidates=cand,
        positive_index=positive_index,
        sequence_ids=pool.sequence_ids[cand],
        source_ids=pool.source_ids[cand],
        context_sequence=pool.sequence_ids[context_index],
        context_source=pool.source_ids[context_index],
    )


# ==================================
# ===== Discrete oracle ============
# ==================================

def _negative_multisets(alphabet: int, negatives: int):
    """Count vectors of every multiset of `negatives` symbols and their log-probability weights."""
    if negatives == 0:
        return np.zeros((1, alphabet)), np.zeros(1)
    counts = np.array([np.bincount(combo, minlength=alphabet)
                       for combo in combinations_with_replacement(range(alphabet), negatives)], dtype=np.float64)
    log_coef = gammaln(negatives + 1) - gammaln(counts + 1).sum(axis=1)
    return counts, log_coef


def expected_infonce_exhaustive(task: DiscreteJointTask, log_scores: np.ndarray, n: int) -> float:
    """Exact E[L_N] for a score table log_scores[x, c]: context c and positive x from
    p(x, c), N-1 negatives i.i.d. from p(x), enumerated as multisets."""
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    log_scores = np.asarray(log_scores, dtype=np.float64)
    joint = task.joint
    if log_scores.shape != joint.shape:
        raise ShapeError(f"score table {log_scores.shape} does not match joint {joint.shape}")
    if n == 1:
        return 0.0
    px, _ = task.marginals()
    counts, log_coef = _negative_multisets(task.target_alphabet, n - 1)
    weights = np.exp(log_coef + counts @ np.log(px))
    total = 0.0
    for c in range(task.context_alphabet):
        f = log_scores[:, c]
        neg_lse = np_logsumexp(np.broadcast_to(f, counts.shape), b=counts, axis=1)
        for x in range(task.target_alphabet):
            losses = np.logaddexp(f[x], neg_lse) - f[x]
            total += joint[x, c] * float(weights @ losses)
    return total


def expected_accuracy_exhaustive(task: DiscreteJointTask, log_scores: np.ndarray, n: int) -> float:
    """Exact expected prediction accuracy (ties fail) under the same sampling."""
    if n < 2:
        raise DomainError("prediction accuracy needs N >= 2")
    log_scores = np.asarray(log_scores, dtype=np.float64)
    px, _ = task.marginals()
    counts, log_coef = _negative_multisets(task.target_alphabet, n - 1)
    weights = np.exp(log_coef + counts @ np.log(px))
    joint = task.joint
    total = 0.0
    for c in range(task.context_alphabet):
        f = log_scores[:, c]
        for x in range(task.target_alphabet):
            beaten = f < f[x]
            wins = np.all((counts == 0) | beaten[None, :], axis=1)
            total += joint[x, c] * float(weights @ wins)
    return total


def oracle_log_scores(task: DiscreteJointTask) -> np.ndarray:
    """Log true density ratio table [A_x, A_c]."""
    px, pc = task.marginals()
    return np.log(task.joint) - np.log(np.outer(px, pc))
