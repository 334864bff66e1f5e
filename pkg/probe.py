"""Linear (and one-hidden-layer) probes on frozen features.

Public API:
  - fit_linear_probe(features, labels, l2, num_classes=None) -> ProbeWeights
  - evaluate_probe(weights, features, labels) -> accuracy
  - select_l2(train, val, grid) -> (l2, ProbeWeights)
  - fit_mlp_probe(features, labels, num_classes, ...) -> MlpProbeWeights
  - run_probe_suite(cfg, checkpoints, targets=None) -> List[ProbeReport]

The linear probe is multinomial logistic regression minimising
mean cross-entropy + l2/2 * ||W||^2 (bias unpenalised), fitted with lbfgs
until the gradient norm falls below PROBE_GTOL or PROBE_MAX_ITER.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score

import config
from artifacts import load_checkpoint
from autodiff import AdamState, Tape, adam_step, add, backward, getitem, logsumexp, matmul, reduce_mean, relu, sub
from errors import CpcLabError, ProbeDataError, ShapeError
from experiment import ExperimentConfig
from model import CpcModel, latent_labels, represent
from synthdata import SequenceBatch, sample_sequences
from training import init_cpc_model, num_classes, train_supervised
from utils import make_rng, params_hash

logger = logging.getLogger(__name__)

STREAM_PROBE_DATA, STREAM_PROBE_MLP = 10, 11


class ProbeReport(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    feature_source: Literal["cpc-c", "cpc-z", "random-init", "supervised-ceiling"]
    target: Literal["hidden-state", "source-id"]
    probe_kind: Literal["linear", "hidden"] = "linear"
    train_accuracy: float = Field(ge=0.0, le=1.0)
    test_accuracy: float = Field(ge=0.0, le=1.0)
    feature_dim: int
    l2: float = 0.0
    chance: float = Field(0.0, ge=0.0, le=1.0, description="majority-class frequency on the test frames")
    test_frames: int = 0
    config_hash: str = ""


# ==================================
# ===== Linear probe ===============
# ==================================

@dataclass
class ProbeWeights:
    """Class scores = features @ weights[:, :-1].T + weights[:, -1]."""

    weights: np.ndarray   # [classes, d + 1]
    l2: float = 0.0

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1] - 1

    def scores(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ShapeError(f"probe expects features [n, {self.feature_dim}], got {features.shape}")
        return features @ self.weights[:, :-1].T + self.weights[:, -1]

    def predict(self, features: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class id
        return np.argmax(self.scores(features), axis=1)


def _check_labels(labels, n: int, num_classes: Optional[int]) -> Tuple[np.ndarray, int]:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise ProbeDataError("probe training needs at least one example")
    labels = labels.astype(np.int64)
    classes = int(num_classes if num_classes is not None else labels.max() + 1)
    if labels.min() < 0 or labels.max() >= classes:
        raise ProbeDataError(f"labels must lie in [0, {classes})")
    missing = np.setdiff1d(np.arange(classes), labels)
    if missing.size:
        raise ProbeDataError(f"classes {missing.tolist()} have no training examples")
    if n < classes:
        raise ProbeDataError(f"{n} examples cannot cover {classes} classes")
    return labels, classes


def fit_linear_probe(features, labels, l2: float = 0.0, num_classes: Optional[int] = None) -> ProbeWeights:
    """Multinomial logistic regression; constant features converge to the class prior."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be [n, d], got {features.shape}")
    if l2 < 0:
        raise ProbeDataError(f"l2 must be non-negative, got {l2}")
    labels, classes = _check_labels(labels, features.shape[0], num_classes)
    n, d = features.shape
    if classes == 1:
        return ProbeWeights(np.zeros((1, d + 1)), l2)

    # sklearn sums the loss: C = 1 / (l2 * n) matches mean loss + l2/2 ||W||^2
    clf = LogisticRegression(
        penalty="l2" if l2 > 0 else None,
        C=1.0 / (l2 * n) if l2 > 0 else 1.0,
        solver="lbfgs",
        tol=config.PROBE_GTOL,
        max_iter=config.PROBE_MAX_ITER,
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        clf.fit(features, labels)
    if any(issubclass(w.category, ConvergenceWarning) for w in caught):
        logger.debug("Probe hit max_iter=%d (separable or slow data)", config.PROBE_MAX_ITER)

    coef, intercept = clf.coef_, clf.intercept_
    if classes == 2:
        # binary lbfgs fits one logit for class 1 against class 0
        coef = np.vstack([np.zeros_like(coef), coef])
        intercept = np.concatenate([[0.0], intercept])
    return ProbeWeights(np.hstack([coef, intercept[:, None]]), l2)


def evaluate_probe(weights: Union[ProbeWeights, "MlpProbeWeights"], features, labels) -> float:
    """Argmax accuracy; ties are broken towards the lowest class id."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ShapeError(f"features {features.shape} and labels {labels.shape} disagree")
    if labels.size == 0:
        raise ProbeDataError("cannot evaluate a probe on zero examples")
    return float(accuracy_score(labels, weights.predict(features)))


def select_l2(train: Tuple[np.ndarray, np.ndarray], val: Tuple[np.ndarray, np.ndarray],
              grid: Sequence[float] = config.PROBE_L2_GRID,
              num_classes: Optional[int] = None) -> Tuple[float, ProbeWeights]:
    """Best validation accuracy over the grid; ties keep the earlier (weaker) l2."""
    best: Optional[Tuple[float, float, ProbeWeights]] = None
    for l2 in grid:
        weights = fit_linear_probe(train[0], train[1], l2, num_classes)
        accuracy = evaluate_probe(weights, *val)
        logger.debug("l2=%g: validation accuracy %.4f", l2, accuracy)
        if best is None or accuracy > best[1]:
            best = (l2, accuracy, weights)
    return best[0], best[2]


# ==================================
# ===== One-hidden-layer probe =====
# ==================================

@dataclass
class MlpProbeWeights:
    params: Dict[str, np.ndarray]

    def predict(self, features: np.ndarray) -> np.ndarray:
        hidden = np.maximum(features @ self.params["w1"] + self.params["b1"], 0.0)
        return np.argmax(hidden @ self.params["w2"] + self.params["b2"], axis=1)


def fit_mlp_probe(features, labels, num_classes: Optional[int] = None, width: int = config.PROBE_HIDDEN_WIDTH,
                  steps: int = 500, learning_rate: float = 1e-3, batch_size: int = 256,
                  seed: int = 0) -> MlpProbeWeights:
    """ReLU hidden layer + softmax head, trained with Adam on minibatch cross-entropy."""
    features = np.asarray(features, dtype=np.float64)
    labels, classes = _check_labels(labels, features.shape[0], num_classes)
    rng = make_rng(seed, STREAM_PROBE_MLP)
    d = features.shape[1]
    params = {
        "w1": rng.uniform(-1, 1, size=(d, width)) / np.sqrt(d),
        "b1": np.zeros(width),
        "w2": rng.uniform(-1, 1, size=(width, classes)) / np.sqrt(width),
        "b2": np.zeros(classes),
    }
    state = AdamState(learning_rate=learning_rate)
    for _ in range(steps):
        index = rng.choice(features.shape[0], size=min(batch_size, features.shape[0]), replace=False)
        tape = Tape()
        w = {k: tape.watch(v) for k, v in params.items()}
        hidden = relu(add(matmul(features[index], w["w1"]), w["b1"]))
        logits = add(matmul(hidden, w["w2"]), w["b2"])
        picked = getitem(logits, (np.arange(index.size), labels[index]))
        loss = reduce_mean(sub(logsumexp(logits, axis=1), picked))
        grads = backward(loss)
        params, state = adam_step(params, {k: grads[t.node].value for k, t in w.items()}, state)
    return MlpProbeWeights(params)


# ==================================
# ===== Probe suite ================
# ==================================

CheckpointLike = Union[str, Path, CpcModel]


def _resolve(checkpoint: CheckpointLike) -> CpcModel:
    if isinstance(checkpoint, CpcModel):
        return checkpoint
    model = load_checkpoint(checkpoint)
    if not isinstance(model, CpcModel):
        raise CpcLabError(f"{checkpoint} holds a {model.kind} checkpoint; probing needs a cpc model")
    return model


@dataclass
class ProbeSplits:
    train: SequenceBatch
    val: SequenceBatch
    test: SequenceBatch


def probe_splits(cfg: ExperimentConfig) -> ProbeSplits:
    """Disjoint sequences for probe training, l2 selection and testing.

    Sources are dealt round-robin (then shuffled) so a split with at least
    num_sources sequences contains every source.
    """
    rng = make_rng(cfg.training.seed, STREAM_PROBE_DATA)

    def split(n: int) -> SequenceBatch:
        sources = rng.permutation(np.arange(n) % cfg.task.num_sources)
        return sample_sequences(cfg.task, n, rng, sources=sources)

    p = cfg.probe
    return ProbeSplits(split(p.train_sequences), split(p.val_sequences), split(p.test_sequences))


def frame_features(model: CpcModel, batch: SequenceBatch, source: str) -> np.ndarray:
    """Per-latent-frame features [n * T', dim], sequence-major, no time averaging."""
    x = np.ascontiguousarray(np.transpose(batch.observations, (0, 2, 1)))
    feats = represent(x, model, source)
    return feats.reshape(-1, feats.shape[-1])


def frame_labels(cfg: ExperimentConfig, batch: SequenceBatch, target: str) -> np.ndarray:
    return latent_labels(batch.labels(target), cfg.model.encoder).reshape(-1)


def _probe_one(cfg: ExperimentConfig, model: CpcModel, representation: str, tag: str, target: str,
               splits: ProbeSplits) -> List[ProbeReport]:
    classes = num_classes(cfg.task, target)
    data = {name: (frame_features(model, getattr(splits, name), representation),
                   frame_labels(cfg, getattr(splits, name), target))
            for name in ("train", "val", "test")}
    train_x, train_y = data["train"]
    test_x, test_y = data["test"]
    chance = float(np.bincount(test_y, minlength=classes).max() / test_y.size)
    l2, weights = select_l2(data["train"], data["val"], cfg.probe.l2_grid, classes)
    reports = [ProbeReport(
        feature_source=tag, target=target, probe_kind="linear",
        train_accuracy=evaluate_probe(weights, train_x, train_y),
        test_accuracy=evaluate_probe(weights, test_x, test_y),
        feature_dim=train_x.shape[1], l2=l2, chance=chance, test_frames=int(test_y.size),
        config_hash=cfg.hash(),
    )]
    if cfg.probe.include_hidden:
        mlp = fit_mlp_probe(train_x, train_y, classes, cfg.probe.hidden_width, cfg.probe.hidden_steps,
                            seed=cfg.training.seed)
        reports.append(ProbeReport(
            feature_source=tag, target=target, probe_kind="hidden",
            train_accuracy=evaluate_probe(mlp, train_x, train_y),
            test_accuracy=evaluate_probe(mlp, test_x, test_y),
            feature_dim=train_x.shape[1], chance=chance, test_frames=int(test_y.size),
            config_hash=cfg.hash(),
        ))
    logger.info("Probe %s -> %s: test accuracy %.3f (chance %.3f)", tag, target,
                reports[0].test_accuracy, chance)
    return reports


def run_probe_suite(cfg: ExperimentConfig, checkpoints: Mapping[str, CheckpointLike],
                    targets: Optional[Sequence[str]] = None,
                    include_supervised: Optional[bool] = None) -> List[ProbeReport]:
    """One report per (feature source, target).

    checkpoints maps "cpc" (reported as cpc-c and cpc-z) and/or "random-init"
    to a checkpoint path or model. Missing "random-init" falls back to a fresh
    initialisation from the config seed. Model parameters are hashed before and
    after probing; any change is a frozen-feature violation.
    """
    unknown = set(checkpoints) - {"cpc", "random-init"}
    if unknown:
        raise CpcLabError(f"unknown checkpoint roles {sorted(unknown)}")
    targets = list(targets or cfg.probe.targets)
    include_supervised = cfg.probe.include_supervised if include_supervised is None else include_supervised
    models: Dict[str, CpcModel] = {role: _resolve(ckpt) for role, ckpt in checkpoints.items()}
    if "cpc" in models and "random-init" not in models:
        models["random-init"] = init_cpc_model(cfg)
    hashes = {role: params_hash(m.params) for role, m in models.items()}
    splits = probe_splits(cfg)

    runs: List[Tuple[CpcModel, str, str]] = []
    if "cpc" in models:
        runs += [(models["cpc"], "c", "cpc-c"), (models["cpc"], "z", "cpc-z")]
    runs.append((models["random-init"], cfg.model.representation, "random-init"))

    reports: List[ProbeReport] = []
    for target in targets:
        for model, representation, tag in runs:
            reports += _probe_one(cfg, model, representation, tag, target, splits)
        if include_supervised:
            ceiling = train_supervised(cfg, target, splits.train)
            reports += _probe_one(cfg, ceiling, "c", "supervised-ceiling", target, splits)

    for role, model in models.items():
        if params_hash(model.params) != hashes[role]:
            raise CpcLabError(f"probing modified the {role} model parameters")
    return reports
