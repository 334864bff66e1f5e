"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Public API:
  - Tape, Tensor, constant(), primitive()
  - elementwise: add, sub, mul, div, neg, exp, log, relu, sigmoid, tanh
  - structural: reshape, transpose, getitem, stack, reduce_sum, reduce_mean
  - model ops: matmul, conv1d, gru_step, logsumexp
  - backward(loss) -> {node_id: Tensor}
  - AdamState, adam_step
  - check_gradients(fn, inputs), numerical_gradient(), relative_error()

Notes:
  - Every tensor that carries a node id belongs to exactly one Tape. Node ids
    are positions in the tape, so parents always precede children and a
    backward pass is a single reverse sweep.
  - Tensors without a tape are constants; ops on constants only return
    constants, which is how evaluation runs without recording anything.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from scipy.special import logsumexp as _logsumexp

import config
from errors import CpcLabError, InputTooShortError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Grad = Optional[np.ndarray]
VJP = Callable[[np.ndarray], Tuple[Grad, ...]]
GRU_KEYS = ("w_x", "w_h", "b_x", "b_h")


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.value
    return np.asarray(value, dtype=np.float64)


@dataclass
class _Node:
    parents: Tuple[Optional[int], ...]
    value: np.ndarray
    vjp: Optional[VJP]
    op: str


class Tape:
    """Ordered record of primitive operations and their saved forward values."""

    def __init__(self):
        self.nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> "Tensor":
        arr = _as_array(value)
        node_id = self._append(_Node((), arr, None, "leaf"))
        return Tensor(arr, tape=self, node=node_id)

    def leaves(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.vjp is None]

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


class Tensor:
    __slots__ = ("value", "tape", "node")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, value, tape: Optional[Tape] = None, node: Optional[int] = None):
        self.value = _as_array(value)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        kind = f"node={self.node}" if self.node is not None else "constant"
        return f"Tensor(shape={self.shape}, {kind})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def constant(value) -> Tensor:
    return Tensor(_as_array(value))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise CpcLabError("operands are recorded on different tapes")
    return tape


def primitive(value, inputs: Sequence[Tensor], vjp: VJP, op: str = "custom") -> Tensor:
    """Register one primitive result. `vjp` maps the output gradient to one
    gradient per input (None where no gradient flows)."""
    value = _as_array(value)
    if not np.all(np.isfinite(value)) and all(np.all(np.isfinite(t.value)) for t in inputs):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    tape = _common_tape(inputs)
    if tape is None:
        return Tensor(value)
    parents = tuple(t.node for t in inputs)
    node_id = tape._append(_Node(parents, value, vjp, op))
    return Tensor(value, tape=tape, node=node_id)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ==================================
# ===== Elementwise ================
# ==================================

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return primitive(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return primitive(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return primitive(a.value * b.value, (a, b),
                     lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
                     "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.value / b.value
    return primitive(out, (a, b),
                     lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
                     "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return primitive(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.value)
    return primitive(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    return primitive(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.value > 0
    return primitive(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = expit(a.value)
    return primitive(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.value)
    return primitive(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ==================================
# ===== Structural =================
# ==================================

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return primitive(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _lift(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return primitive(a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, key) -> Tensor:
    a = _lift(a)
    basic = _is_basic_index(key)

    def vjp(g):
        full = np.zeros_like(a.value)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return primitive(a.value[key], (a,), vjp, "getitem")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    value = np.stack([t.value for t in tensors], axis=axis)
    return primitive(value, tensors,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return primitive(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    total = reduce_sum(a, axis=axis, keepdims=keepdims)
    count = a.size // max(total.size, 1) if a.size else 1
    return mul(total, 1.0 / count)


# ==================================
# ===== Model operations ===========
# ==================================

def matmul(a, b) -> Tensor:
    """Matrix product of a[..., m, k] and b[k, n]."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        grad_a = g @ b.value.T
        grad_b = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return grad_a, grad_b

    return primitive(a.value @ b.value, (a, b), vjp, "matmul")


def conv1d(inputs, kernel, stride: int = 1) -> Tensor:
    """Valid (unpadded) strided convolution.

    inputs: [channels, time] or [batch, channels, time]
    kernel: [out, in, width]
    """
    x_t, k_t = _lift(inputs), _lift(kernel)
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    squeeze = x_t.ndim == 2
    x = x_t.value[None] if squeeze else x_t.value
    k = k_t.value
    if x.ndim != 3 or k.ndim != 3 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv1d dimension mismatch: input {x_t.shape} vs kernel {k_t.shape}")
    length, width = x.shape[2], k.shape[2]
    if length < width:
        raise InputTooShortError(f"conv1d input length {length} is shorter than kernel width {width}")
    t_out = (length - width) // stride + 1
    windows = sliding_window_view(x, width, axis=2)[:, :, ::stride, :]
    out = np.einsum("bctw,ocw->bot", windows, k, optimize=True)

    def vjp(g):
        g3 = g[None] if squeeze else g
        grad_k = np.einsum("bot,bctw->ocw", g3, windows, optimize=True)
        grad_x = np.zeros_like(x)
        span = stride * (t_out - 1) + 1
        for w in range(width):
            grad_x[:, :, w:w + span:stride] += np.einsum("bot,oc->bct", g3, k[:, :, w], optimize=True)
        return (grad_x[0] if squeeze else grad_x), grad_k

    return primitive(out[0] if squeeze else out, (x_t, k_t), vjp, "conv1d")


def conv1d_output_length(length: int, width: int, stride: int) -> int:
    return (length - width) // stride + 1


def gru_step(h, x, params: Mapping[str, Tensor]) -> Tensor:
    """One GRU update. Gate blocks in w_x/w_h/b_x/b_h are ordered
    [reset, update, candidate]; h' = (1 - u) * n + u * h.

    h: [d] or [batch, d]; x: [e] or [batch, e]
    """
    h, x = _lift(h), _lift(x)
    w_x, w_h, b_x, b_h = (_lift(params[k]) for k in GRU_KEYS)
    d = w_h.shape[0]
    if (w_x.ndim != 2 or w_h.shape != (d, 3 * d) or w_x.shape[1] != 3 * d
            or b_x.shape != (3 * d,) or b_h.shape != (3 * d,)
            or h.shape[-1] != d or x.shape[-1] != w_x.shape[0] or h.ndim != x.ndim):
        raise ShapeError(f"gru_step dimension mismatch: h {h.shape}, x {x.shape}, "
                         f"w_x {w_x.shape}, w_h {w_h.shape}")
    vector = h.ndim == 1
    if vector:
        h = reshape(h, (1, d))
        x = reshape(x, (1, x.shape[-1]))
    gx = add(matmul(x, w_x), b_x)
    gh = add(matmul(h, w_h), b_h)
    reset = sigmoid(add(gx[:, :d], gh[:, :d]))
    update = sigmoid(add(gx[:, d:2 * d], gh[:, d:2 * d]))
    candidate = tanh(add(gx[:, 2 * d:], mul(reset, gh[:, 2 * d:])))
    h_new = add(candidate, mul(update, sub(h, candidate)))
    return reshape(h_new, (d,)) if vector else h_new


def logsumexp(v, axis: int = -1) -> Tensor:
    """log(sum(exp(v))) along `axis`, max-shifted."""
    v = _lift(v)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError(f"logsumexp of empty input (shape {v.shape})")
    out = _logsumexp(v.value, axis=axis)

    def vjp(g):
        weights = np.exp(v.value - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * weights,)

    return primitive(out, (v,), vjp, "logsumexp")


# ==================================
# ===== Backward ===================
# ==================================

def backward(loss: Tensor) -> Dict[int, Tensor]:
    """Gradients of a scalar loss for every leaf on its tape (zero when unreached)."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise CpcLabError("loss is not recorded on a tape")
    tape = loss.tape
    grads: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.value)}
    for node_id in range(loss.node, -1, -1):
        g = grads.get(node_id)
        node = tape.nodes[node_id]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            grads[parent] = grads[parent] + pg if parent in grads else pg
    return {i: Tensor(np.array(grads[i]) if i in grads else np.zeros_like(tape.nodes[i].value))
            for i in tape.leaves()}


# ==================================
# ===== Adam =======================
# ==================================

@dataclass
class AdamState:
    learning_rate: float = config.DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated."""
    t = state.step + 1
    b1c = 1.0 - state.beta1 ** t
    b2c = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64) if name in grads else np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step shape mismatch for {name}: param {p.shape} vs grad {g.shape}")
        m = state.first_moment.get(name, np.zeros_like(p))
        v = state.second_moment.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam_step state shape mismatch for {name}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_params[name] = p - state.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + state.epsilon)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(state.learning_rate, state.beta1, state.beta2, state.epsilon, t, new_m, new_v)
    return new_params, new_state


# ==================================
# ===== Finite differences =========
# ==================================

LossFn = Callable[[Dict[str, Tensor]], Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = config.GRADCHECK_FLOOR) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numerical_gradient(fn: LossFn, inputs: Mapping[str, np.ndarray], name: str,
                       eps: float = config.GRADCHECK_EPS) -> np.ndarray:
    """Central differences of fn with respect to inputs[name]."""
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    flat = base[name].reshape(-1)
    grad = np.zeros(flat.size)

    def evaluate() -> float:
        return fn({k: Tensor(v) for k, v in base.items()}).item()

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = evaluate()
        flat[i] = orig - eps
        minus = evaluate()
        flat[i] = orig
        grad[i] = (plus - minus) / (2.0 * eps)
    return grad.reshape(base[name].shape)


def check_gradients(fn: LossFn, inputs: Mapping[str, np.ndarray],
                    eps: float = config.GRADCHECK_EPS) -> Dict[str, float]:
    """Max relative error between backward() and central differences, per input."""
    tape = Tape()
    watched = {name: tape.watch(np.array(v, dtype=np.float64)) for name, v in inputs.items()}
    grads = backward(fn(watched))
    return {name: relative_error(grads[t.node].value, numerical_gradient(fn, inputs, name, eps))
            for name, t in watched.items()}
