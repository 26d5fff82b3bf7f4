"""Layers, the 1-D CNN used for fault spectra, and optimizers."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, conv1d, linear, maxpool1d, relu
from . import tensor as T

N_CLASSES = 4
INPUT_LEN = 1000


def glorot_uniform(rng: np.random.Generator, shape, fan_in, fan_out, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_out_len(length, kernel, stride):
    return (length - kernel) // stride + 1


class Conv1dLayer:
    def __init__(self, in_channels, filters, kernel_size, stride=1, rng=None, dtype=np.float64,
                 name="conv"):
        if kernel_size < 1 or stride < 1:
            raise ValueError("kernel_size and stride must be >= 1")
        self.in_channels, self.filters = in_channels, filters
        self.kernel_size, self.stride = kernel_size, stride
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = in_channels * kernel_size, filters * kernel_size
        self.w = Tensor(glorot_uniform(rng, (filters, in_channels, kernel_size), fan_in, fan_out,
                                       dtype), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(filters, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def out_len(self, length):
        return conv_out_len(length, self.kernel_size, self.stride)

    def params(self):
        return {self.w.name: self.w, self.b.name: self.b}

    def __call__(self, x, activation="relu"):
        return conv1d_forward(x, self, activation)


class MaxPool1dLayer:
    def __init__(self, window, stride):
        if window < 1 or stride < 1:
            raise ValueError("window and stride must be >= 1")
        self.window, self.stride = window, stride

    def out_len(self, length):
        return conv_out_len(length, self.window, self.stride)

    def __call__(self, x):
        return maxpool1d_forward(x, self)


class DenseLayer:
    def __init__(self, in_features, out_features, rng=None, dtype=np.float64, name="dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.w = Tensor(glorot_uniform(rng, (out_features, in_features), in_features, out_features,
                                       dtype), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def params(self):
        return {self.w.name: self.w, self.b.name: self.b}

    def __call__(self, x):
        return linear(x, self.w, self.b)


def _batched(x: Tensor):
    """Accept [C, L] or [N, C, L]; return the 3-D view and whether to squeeze."""
    if x.data.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def conv1d_forward(x: Tensor, layer: Conv1dLayer, activation="relu") -> Tensor:
    x3, squeeze = _batched(x)
    out = conv1d(x3, layer.w, layer.b, layer.stride)
    if activation == "relu":
        out = relu(out)
    elif activation not in (None, "none"):
        raise ValueError(f"unknown activation {activation!r}")
    return out.reshape(out.shape[1:]) if squeeze else out


def maxpool1d_forward(x: Tensor, layer: MaxPool1dLayer) -> Tensor:
    x3, squeeze = _batched(x)
    out = maxpool1d(x3, layer.window, layer.stride)
    return out.reshape(out.shape[1:]) if squeeze else out


def softmax(z: Tensor) -> Tensor:
    return T.softmax(z, axis=-1)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    return T.cross_entropy(probs, labels)


# ---------------------------------------------------------------- the CNN

class FeatureExtractor:
    """Conv1-Pool1-Conv2-Pool2 stack; flattens to [N, 896] for 1000-bin input."""

    def __init__(self, rng, dtype=np.float64, input_len=INPUT_LEN):
        self.conv1 = Conv1dLayer(1, 8, 20, 2, rng, dtype, name="conv1")
        self.pool1 = MaxPool1dLayer(2, 2)
        self.conv2 = Conv1dLayer(8, 16, 20, 2, rng, dtype, name="conv2")
        self.pool2 = MaxPool1dLayer(2, 2)
        self.input_len = input_len
        length = self.pool2.out_len(self.conv2.out_len(self.pool1.out_len(
            self.conv1.out_len(input_len))))
        if length < 1:
            raise DimensionError(f"input length {input_len} too short for the CNN")
        self.out_features = 16 * length

    def params(self):
        return {**self.conv1.params(), **self.conv2.params()}

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim == 2:
            x = x.reshape(x.shape[0], 1, x.shape[1])
        v = self.pool1(self.conv1(x))
        v = self.pool2(self.conv2(v))
        return v.reshape(v.shape[0], -1)


class Discriminator:
    """FC1 (ReLU) -> FC2 logits."""

    def __init__(self, in_features, rng, dtype=np.float64, hidden=128, n_classes=N_CLASSES):
        self.fc1 = DenseLayer(in_features, hidden, rng, dtype, name="fc1")
        self.fc2 = DenseLayer(hidden, n_classes, rng, dtype, name="fc2")

    def params(self):
        return {**self.fc1.params(), **self.fc2.params()}

    def __call__(self, h: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(h)))

    def predict_proba(self, h: Tensor) -> Tensor:
        return softmax(self(h))


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    scratch: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "plain"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def optimizer_step(state: OptimizerState, params: dict[str, Tensor],
                   grads: dict[str, np.ndarray], direction="descent"):
    """Update ``params`` in place; ``direction='ascent'`` climbs the objective."""
    if direction not in ("descent", "ascent"):
        raise ValueError(f"direction must be descent or ascent, got {direction!r}")
    sign = -1.0 if direction == "descent" else 1.0
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name}: {g.shape} vs {p.data.shape}")
        if state.kind == "plain":
            p.data += (sign * state.learning_rate) * g
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.scratch[name] = np.empty_like(p.data)
        m, v, tmp = state.m[name], state.v[name], state.scratch[name]
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=tmp)
        m += tmp
        v *= state.beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v += tmp
        # lr * mhat / (sqrt(vhat) + eps), bias corrections folded into scalars
        np.sqrt(v, out=tmp)
        tmp *= float(1.0 / math.sqrt(1.0 - state.beta2 ** t))
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= float(sign * state.learning_rate / (1.0 - state.beta1 ** t))
        p.data += tmp
    return params


def grads_of(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def clear_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.grad = None


def gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Fresh gradients of ``loss`` for each named parameter (zeros if unreachable)."""
    clear_grads(params)
    T.backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in params.items()}


@contextlib.contextmanager
def frozen(params: dict[str, Tensor]):
    """Treat ``params`` as constants for graphs built and differentiated inside."""
    flags = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = flags[k]
