"""The CPC network and the pair critic used on (x, c) tasks.

Public API:
  - EncoderConfig, ModelConfig
  - CpcModel (encoder g_enc, GRU context model g_ar, heads W_1..W_K)
  - encode, contextualize, score, predict, represent, latent_labels
  - PairCritic, pair_features, critic_scores

Parameters live in a flat {name: ndarray} dict. Forward functions take an
optional `weights` dict of Tensors (from model.watch(tape)); without it they
run on constants and record nothing.
"""
from __future__ import annotations

import logging
from typing import Dict, List, Literal, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from autodiff import (Tape, Tensor, add, conv1d, conv1d_output_length, gru_step, matmul, mul,
                      reduce_sum, relu, reshape, stack, tanh, transpose)
from errors import HorizonError, InputTooShortError, ShapeError
from synthdata import DiscreteJointTask, GaussianPairTask, PairTask

logger = logging.getLogger(__name__)

Weights = Mapping[str, Tensor]
REPRESENTATIONS = ("c", "z", "c-mean", "z-mean")


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    strides: List[int] = Field(default_factory=lambda: [2, 2])
    widths: List[int] = Field(default_factory=lambda: [4, 4])
    channels: List[int] = Field(default_factory=lambda: [32, 32])

    @model_validator(mode="after")
    def _check_layers(self) -> "EncoderConfig":
        if not (len(self.strides) == len(self.widths) == len(self.channels) >= 1):
            raise ValueError("strides, widths and channels must have equal length >= 1")
        if min(self.strides + self.widths + self.channels) < 1:
            raise ValueError("strides, widths and channels must be positive")
        return self

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def receptive_field(self) -> int:
        field, jump = 1, 1
        for stride, width in zip(self.strides, self.widths):
            field += (width - 1) * jump
            jump *= stride
        return field

    def output_length(self, length: int) -> int:
        if length < self.receptive_field:
            raise InputTooShortError(
                f"input length {length} is too short for the encoder: minimum length is {self.receptive_field}")
        for stride, width in zip(self.strides, self.widths):
            length = conv1d_output_length(length, width, stride)
        return length


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    d_c: int = Field(32, ge=1)
    max_horizon: int = Field(8, ge=1)
    representation: Literal["c", "z", "c-mean", "z-mean"] = "c"
    critic_hidden: int = Field(32, ge=1)
    critic_dim: int = Field(16, ge=1)

    @property
    def d_z(self) -> int:
        return self.encoder.channels[-1]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Parametrized:
    kind = ""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray], seed: int):
        self.config = config
        self.params = params
        self.seed = seed

    def watch(self, tape: Tape) -> Dict[str, Tensor]:
        return {name: tape.watch(value) for name, value in self.params.items()}

    def constants(self) -> Dict[str, Tensor]:
        return {name: Tensor(value) for name, value in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _weights(self, weights: Optional[Weights]) -> Weights:
        return weights if weights is not None else self.constants()


class CpcModel(_Parametrized):
    kind = "cpc"

    def __init__(self, config: ModelConfig, in_channels: int, params: Dict[str, np.ndarray], seed: int):
        super().__init__(config, params, seed)
        self.in_channels = in_channels

    @classmethod
    def init(cls, config: ModelConfig, in_channels: int, seed: int) -> "CpcModel":
        rng = np.random.default_rng(seed)
        params: Dict[str, np.ndarray] = {}
        c_in = in_channels
        for i, (width, channels) in enumerate(zip(config.encoder.widths, config.encoder.channels)):
            params[f"enc.{i}.kernel"] = _uniform(rng, c_in * width, (channels, c_in, width))
            params[f"enc.{i}.bias"] = _uniform(rng, c_in * width, (channels,))
            c_in = channels
        d_z, d_c = config.d_z, config.d_c
        params["gru.w_x"] = _uniform(rng, d_c, (d_z, 3 * d_c))
        params["gru.w_h"] = _uniform(rng, d_c, (d_c, 3 * d_c))
        params["gru.b_x"] = _uniform(rng, d_c, (3 * d_c,))
        params["gru.b_h"] = _uniform(rng, d_c, (3 * d_c,))
        for k in range(1, config.max_horizon + 1):
            params[f"w.{k}"] = _uniform(rng, d_c, (d_z, d_c))
        return cls(config, in_channels, params, seed)

    def with_params(self, params: Dict[str, np.ndarray]) -> "CpcModel":
        return CpcModel(self.config, self.in_channels, params, self.seed)

    @property
    def d_z(self) -> int:
        return self.config.d_z

    @property
    def d_c(self) -> int:
        return self.config.d_c

    @property
    def max_horizon(self) -> int:
        return self.config.max_horizon

    def check_horizon(self, k: int) -> None:
        if not 1 <= k <= self.max_horizon:
            raise HorizonError(f"horizon {k} outside 1..{self.max_horizon}")


def encode(x, model: CpcModel, weights: Optional[Weights] = None) -> Tensor:
    """x [channels, time] -> z [T, d_z]; batched x [B, channels, time] -> [B, T, d_z]."""
    w = model._weights(weights)
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.ndim not in (2, 3) or h.shape[-2] != model.in_channels:
        raise ShapeError(f"encode expects [.., {model.in_channels}, time], got {h.shape}")
    model.config.encoder.output_length(h.shape[-1])
    enc = model.config.encoder
    for i, stride in enumerate(enc.strides):
        bias = reshape(w[f"enc.{i}.bias"], (enc.channels[i], 1))
        h = relu(add(conv1d(h, w[f"enc.{i}.kernel"], stride), bias))
    return transpose(h, (1, 0) if h.ndim == 2 else (0, 2, 1))


def _gru_params(w: Weights) -> Dict[str, Tensor]:
    return {"w_x": w["gru.w_x"], "w_h": w["gru.w_h"], "b_x": w["gru.b_x"], "b_h": w["gru.b_h"]}


def contextualize(z, model: CpcModel, weights: Optional[Weights] = None) -> Tensor:
    """Causal GRU summary: c_t depends on z_1..z_t only; h_0 = 0."""
    w = model._weights(weights)
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim not in (2, 3) or z.shape[-1] != model.d_z:
        raise ShapeError(f"contextualize expects [.., T, {model.d_z}], got {z.shape}")
    length = z.shape[-2]
    if length < 1:
        raise ShapeError("contextualize needs a non-empty sequence")
    params = _gru_params(w)
    batched = z.ndim == 3
    h = Tensor(np.zeros((z.shape[0], model.d_c) if batched else (model.d_c,)))
    states = []
    for t in range(length):
        h = gru_step(h, z[:, t, :] if batched else z[t], params)
        states.append(h)
    return stack(states, axis=1 if batched else 0)


def predict(c, k: int, model: CpcModel, weights: Optional[Weights] = None) -> Tensor:
    """W_k applied to the context: c [d_c] -> [d_z], c [.., d_c] -> [.., d_z]."""
    model.check_horizon(k)
    w_k = model._weights(weights)[f"w.{k}"]
    c = c if isinstance(c, Tensor) else Tensor(c)
    if c.shape[-1] != model.d_c:
        raise ShapeError(f"predict expects context dim {model.d_c}, got {c.shape}")
    if c.ndim == 1:
        return reshape(matmul(w_k, reshape(c, (model.d_c, 1))), (model.d_z,))
    return matmul(c, transpose(w_k))


def score(z_target, c, k: int, model: CpcModel, weights: Optional[Weights] = None) -> Tensor:
    """Log-bilinear log-score z^T W_k c."""
    z_target = z_target if isinstance(z_target, Tensor) else Tensor(z_target)
    prediction = predict(c, k, model, weights)
    if z_target.shape != prediction.shape:
        raise ShapeError(f"score target {z_target.shape} vs prediction {prediction.shape}")
    return reduce_sum(mul(z_target, prediction))


def represent(x, model: CpcModel, source: Optional[str] = None) -> np.ndarray:
    """Frozen features per latent frame; pooled sources repeat the time mean on every frame."""
    source = source or model.config.representation
    if source not in REPRESENTATIONS:
        raise ShapeError(f"unknown representation {source!r}")
    z = encode(x, model)
    feats = z if source.startswith("z") else contextualize(z, model)
    value = feats.value
    if source.endswith("-mean"):
        value = np.broadcast_to(value.mean(axis=-2, keepdims=True), value.shape).copy()
    return value


def latent_labels(labels: np.ndarray, encoder: EncoderConfig) -> np.ndarray:
    """Label of the input frame at the centre of each latent frame's receptive field."""
    labels = np.asarray(labels)
    frames = encoder.output_length(labels.shape[-1])
    centers = np.arange(frames) * encoder.total_stride + (encoder.receptive_field - 1) // 2
    return labels[..., centers]


# ==================================
# ===== Pair critic ================
# ==================================

class PairCritic(_Parametrized):
    """Separable log-bilinear critic F(x, c) = g(x)^T W h(c)."""

    kind = "critic"

    def __init__(self, config: ModelConfig, x_dim: int, c_dim: int, params: Dict[str, np.ndarray], seed: int):
        super().__init__(config, params, seed)
        self.x_dim = x_dim
        self.c_dim = c_dim

    @classmethod
    def init(cls, config: ModelConfig, x_dim: int, c_dim: int, seed: int) -> "PairCritic":
        rng = np.random.default_rng(seed)
        hidden, dim = config.critic_hidden, config.critic_dim
        params = {
            "x.w": _uniform(rng, x_dim, (x_dim, hidden)),
            "x.b": _uniform(rng, x_dim, (hidden,)),
            "x.out": _uniform(rng, hidden, (hidden, dim)),
            "c.w": _uniform(rng, c_dim, (c_dim, hidden)),
            "c.b": _uniform(rng, c_dim, (hidden,)),
            "c.out": _uniform(rng, hidden, (hidden, dim)),
            "w": _uniform(rng, dim, (dim, dim)),
        }
        return cls(config, x_dim, c_dim, params, seed)

    @classmethod
    def for_task(cls, config: ModelConfig, task: PairTask, seed: int) -> "PairCritic":
        x_dim, c_dim = pair_dims(task)
        return cls.init(config, x_dim, c_dim, seed)

    def with_params(self, params: Dict[str, np.ndarray]) -> "PairCritic":
        return PairCritic(self.config, self.x_dim, self.c_dim, params, self.seed)


def pair_dims(task: PairTask) -> Tuple[int, int]:
    if isinstance(task, DiscreteJointTask):
        return task.target_alphabet, task.context_alphabet
    return task.dim, task.dim


def pair_features(task: PairTask, x, c) -> Tuple[np.ndarray, np.ndarray]:
    """Critic inputs: one-hot symbols for discrete tasks, raw coordinates otherwise."""
    if isinstance(task, DiscreteJointTask):
        return (np.eye(task.target_alphabet)[np.asarray(x, dtype=int)],
                np.eye(task.context_alphabet)[np.asarray(c, dtype=int)])
    x, c = np.asarray(x, dtype=np.float64), np.asarray(c, dtype=np.float64)
    return x.reshape(-1, task.dim), c.reshape(-1, task.dim)


def _embed(side: str, inputs, w: Weights) -> Tensor:
    hidden = tanh(add(matmul(inputs, w[f"{side}.w"]), w[f"{side}.b"]))
    return matmul(hidden, w[f"{side}.out"])


def critic_scores(critic: PairCritic, x_feat, c_feat, weights: Optional[Weights] = None) -> Tensor:
    """Score matrix S[i, j] = F(x_j, c_i): row i is context i, column j candidate x_j."""
    w = critic._weights(weights)
    gx = _embed("x", x_feat, w)
    hc = _embed("c", c_feat, w)
    return matmul(matmul(hc, transpose(w["w"])), transpose(gx))


def critic_pair_scores(critic: PairCritic, x_feat, c_feat, weights: Optional[Weights] = None) -> Tensor:
    """F(x_i, c_i) for aligned rows."""
    w = critic._weights(weights)
    gx = _embed("x", x_feat, w)
    hc = _embed("c", c_feat, w)
    return reduce_sum(mul(gx, matmul(hc, transpose(w["w"]))), axis=1)
