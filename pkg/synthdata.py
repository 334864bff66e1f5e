"""Synthetic tasks with oracle ground truth.

Public API:
  - GaussianPairTask, DiscreteJointTask, LatentMarkovSequenceTask
  - sample_pairs(task, n, rng) -> (x, c)
  - true_mi(task), true_density_ratio(task, x, c), log_density_ratio(task, x, c)
  - sample_sequences(task, n, rng, sources=None) -> SequenceBatch
  - transition_matrix(task), stationary_distribution(task)
  - grouped_sources(task, n_sequences, per_source, rng)

Notes:
  - Gaussian task: c ~ N(0, I_d), x = rho * c + sqrt(1 - rho^2) * noise, so each
    coordinate pair has correlation rho.
  - Discrete task tables are indexed table[x][c] (rows = target symbols).
  - Markov task embeddings and source offsets are drawn once from the task seed;
    sampling randomness comes only from the rng passed in.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import linalg
from scipy.stats import norm

from errors import ConfigError, UnsupportedTaskError

logger = logging.getLogger(__name__)

TARGETS = ("hidden-state", "source-id")


class GaussianPairTask(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["gaussian"] = "gaussian"
    dim: int = Field(1, ge=1)
    rho: float = Field(0.8, gt=-1.0, lt=1.0)
    seed: int = Field(0, ge=0)


class DiscreteJointTask(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["discrete"] = "discrete"
    table: List[List[float]] = Field(default_factory=lambda: [[0.4, 0.1], [0.1, 0.4]])
    seed: int = Field(0, ge=0)

    @field_validator("table")
    @classmethod
    def _check_table(cls, table: List[List[float]]) -> List[List[float]]:
        if not table or not table[0] or any(len(row) != len(table[0]) for row in table):
            raise ValueError("table must be a non-empty rectangular matrix")
        arr = np.asarray(table, dtype=np.float64)
        if np.any(arr <= 0):
            raise ValueError("every joint probability must be > 0")
        if abs(arr.sum() - 1.0) > 1e-9:
            raise ValueError(f"table must sum to 1, sums to {arr.sum():.12g}")
        return table

    @property
    def joint(self) -> np.ndarray:
        return np.asarray(self.table, dtype=np.float64)

    @property
    def target_alphabet(self) -> int:
        return len(self.table)

    @property
    def context_alphabet(self) -> int:
        return len(self.table[0])

    def marginals(self) -> Tuple[np.ndarray, np.ndarray]:
        joint = self.joint
        return joint.sum(axis=1), joint.sum(axis=0)


class LatentMarkovSequenceTask(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["markov"] = "markov"
    num_states: int = Field(8, ge=1)
    p_stay: float = Field(0.9, ge=0.0, lt=1.0)
    num_sources: int = Field(10, ge=1)
    source_scale: float = Field(1.0, ge=0.0)
    obs_dim: int = Field(16, ge=1)
    noise: float = Field(2.0, ge=0.0)
    length: int = Field(256, ge=1)
    seed: int = Field(0, ge=0)

    def embeddings(self) -> Tuple[np.ndarray, np.ndarray]:
        """Fixed state embeddings [S, D] and source offsets [M, D] for this seed."""
        rng = np.random.default_rng(self.seed)
        states = rng.standard_normal((self.num_states, self.obs_dim))
        offsets = self.source_scale * rng.standard_normal((self.num_sources, self.obs_dim))
        return states, offsets

    @property
    def expected_dwell(self) -> float:
        return 1.0 / (1.0 - self.p_stay)


Task = Union[GaussianPairTask, DiscreteJointTask, LatentMarkovSequenceTask]
PairTask = Union[GaussianPairTask, DiscreteJointTask]


@dataclass
class SequenceBatch:
    observations: np.ndarray   # [n, T, D]
    states: np.ndarray         # [n, T]
    sources: np.ndarray        # [n]

    def __len__(self) -> int:
        return self.observations.shape[0]

    def labels(self, target: str) -> np.ndarray:
        """Per-frame labels [n, T] for a probe target."""
        if target == "hidden-state":
            return self.states
        if target == "source-id":
            return np.repeat(self.sources[:, None], self.states.shape[1], axis=1)
        raise ConfigError(f"unknown probe target {target!r}", fields=["target"])

    def subset(self, index) -> "SequenceBatch":
        return SequenceBatch(self.observations[index], self.states[index], self.sources[index])


def _require_n(n: int) -> None:
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}", fields=["n"])


def sample_pairs(task: PairTask, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """n i.i.d. (x, c) draws. Gaussian: float arrays [n, d]; discrete: int arrays [n]."""
    _require_n(n)
    if isinstance(task, GaussianPairTask):
        c = rng.standard_normal((n, task.dim))
        x = task.rho * c + np.sqrt(1.0 - task.rho ** 2) * rng.standard_normal((n, task.dim))
        return x, c
    if isinstance(task, DiscreteJointTask):
        flat = rng.choice(task.joint.size, size=n, p=task.joint.ravel())
        return flat // task.context_alphabet, flat % task.context_alphabet
    raise UnsupportedTaskError(f"sample_pairs does not support {type(task).__name__}")


def true_mi(task: Task) -> float:
    """Mutual information in nats."""
    if isinstance(task, GaussianPairTask):
        return -0.5 * task.dim * float(np.log1p(-task.rho ** 2))
    if isinstance(task, DiscreteJointTask):
        joint = task.joint
        px, pc = task.marginals()
        return float(np.sum(joint * np.log(joint / np.outer(px, pc))))
    raise UnsupportedTaskError(f"no closed-form MI for {type(task).__name__}")


def _as_points(task: GaussianPairTask, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if task.dim == 1 and (a.ndim == 0 or a.shape[-1] != 1):
        a = a[..., None]
    return a


def log_density_ratio(task: PairTask, x, c) -> np.ndarray:
    """log p(x|c) - log p(x), broadcast over leading axes."""
    if isinstance(task, GaussianPairTask):
        x, c = _as_points(task, x), _as_points(task, c)
        scale = np.sqrt(1.0 - task.rho ** 2)
        return np.sum(norm.logpdf(x, loc=task.rho * c, scale=scale) - norm.logpdf(x), axis=-1)
    if isinstance(task, DiscreteJointTask):
        joint = task.joint
        px, pc = task.marginals()
        x, c = np.asarray(x, dtype=int), np.asarray(c, dtype=int)
        return np.log(joint[x, c]) - np.log(px[x]) - np.log(pc[c])
    raise UnsupportedTaskError(f"no density ratio for {type(task).__name__}")


def true_density_ratio(task: PairTask, x, c) -> np.ndarray:
    """Exact p(x|c) / p(x)."""
    return np.exp(log_density_ratio(task, x, c))


def transition_matrix(task: LatentMarkovSequenceTask) -> np.ndarray:
    s = task.num_states
    if s == 1:
        return np.ones((1, 1))
    move = (1.0 - task.p_stay) / (s - 1)
    matrix = np.full((s, s), move)
    np.fill_diagonal(matrix, task.p_stay)
    return matrix


def stationary_distribution(task: LatentMarkovSequenceTask) -> np.ndarray:
    values, left = linalg.eig(transition_matrix(task), left=True, right=False)
    pi = np.real(left[:, np.argmin(np.abs(values - 1.0))])
    return pi / pi.sum()


def grouped_sources(task: LatentMarkovSequenceTask, n_sequences: int, per_source: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Source ids for a batch in which each drawn source appears `per_source` times."""
    groups = -(-n_sequences // per_source)
    chosen = rng.choice(task.num_sources, size=groups, replace=groups > task.num_sources)
    return np.repeat(chosen, per_source)[:n_sequences]


def sample_sequences(task: LatentMarkovSequenceTask, n: int, rng: np.random.Generator,
                     sources: Optional[np.ndarray] = None) -> SequenceBatch:
    """n labeled sequences: state embedding + source offset + Gaussian noise."""
    _require_n(n)
    s, length = task.num_states, task.length
    state_emb, offsets = task.embeddings()
    if sources is None:
        sources = rng.integers(task.num_sources, size=n)
    sources = np.asarray(sources, dtype=np.int64)
    if sources.shape != (n,) or np.any(sources < 0) or np.any(sources >= task.num_sources):
        raise ConfigError(f"sources must be {n} ids in [0, {task.num_sources})", fields=["sources"])

    states = np.zeros((n, length), dtype=np.int64)
    states[:, 0] = rng.choice(s, size=n, p=stationary_distribution(task))
    if s > 1:
        for t in range(1, length):
            jump = rng.random(n) >= task.p_stay
            step = rng.integers(1, s, size=n)
            states[:, t] = np.where(jump, (states[:, t - 1] + step) % s, states[:, t - 1])

    observations = state_emb[states] + offsets[sources][:, None, :]
    if task.noise > 0:
        observations = observations + task.noise * rng.standard_normal(observations.shape)
    return SequenceBatch(observations, states, sources)
