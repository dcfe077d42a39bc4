"""Minimal layered neural-network engine.

All arithmetic is 64-bit. Layers implement exact layer-local backward
passes so that a model split into halves reproduces the full model's
gradients to the last bit. Forward caches the layer input; backward
consumes it. There is no other hidden state.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import seeds


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeMismatchError(EngineError):
    def __init__(self, layer_index, kind, expected, got):
        self.layer_index = layer_index
        super().__init__(
            f"layer {layer_index} ({kind}): expected input shape {tuple(expected)}, "
            f"got {tuple(got)}"
        )


class BackwardBeforeForwardError(EngineError):
    def __init__(self, layer_index, kind):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index} ({kind}): backward called before forward")


class LabelRangeError(EngineError):
    pass


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """One differentiable stage. Subclasses fill in the math."""

    kind = "base"

    def __init__(self):
        self._cache = None

    @property
    def params(self) -> list[np.ndarray]:
        return []

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return (per-parameter gradients, gradient w.r.t. the layer input)."""
        raise NotImplementedError

    def clone(self) -> "Layer":
        new = self.__class__.__new__(self.__class__)
        new.__dict__ = {
            k: (v.copy() if isinstance(v, np.ndarray) else v)
            for k, v in self.__dict__.items()
            if k != "_cache"
        }
        new._cache = None
        return new

    def spec(self) -> dict:
        """Constructor arguments, enough to rebuild the layer untrained."""
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.weight = np.zeros((self.out_dim, self.in_dim))
        self.bias = np.zeros(self.out_dim)

    @property
    def params(self):
        return [self.weight, self.bias]

    def init_params(self, rng):
        bound = math.sqrt(6.0 / (self.in_dim + self.out_dim))
        self.weight[...] = rng.uniform(-bound, bound, size=self.weight.shape)
        self.bias[...] = 0.0

    def out_shape(self, in_shape):
        if in_shape != (self.in_dim,):
            raise ValueError(f"dense expects ({self.in_dim},), got {in_shape}")
        return (self.out_dim,)

    def forward(self, x):
        self._cache = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out):
        x = self._cache
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
        grad_in = grad_out @ self.weight
        return [grad_w, grad_b], grad_in

    def spec(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}


class Relu(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        self._cache = x
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        return [], grad_out * (self._cache > 0)


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return [], grad_out.reshape(self._cache)


class Conv2D(Layer):
    """Small valid-padding, stride-1 convolution on (batch, channel, h, w)."""

    kind = "conv2d-small"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        k = self.kernel_size
        self.weight = np.zeros((self.out_channels, self.in_channels, k, k))
        self.bias = np.zeros(self.out_channels)

    @property
    def params(self):
        return [self.weight, self.bias]

    def init_params(self, rng):
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        fan_out = self.out_channels * k * k
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.weight[...] = rng.uniform(-bound, bound, size=self.weight.shape)
        self.bias[...] = 0.0

    def out_shape(self, in_shape):
        k = self.kernel_size
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv expects ({self.in_channels}, h, w), got {in_shape}")
        _, h, w = in_shape
        if h < k or w < k:
            raise ValueError(f"conv input {in_shape} smaller than kernel {k}")
        return (self.out_channels, h - k + 1, w - k + 1)

    def forward(self, x):
        self._cache = x
        windows = sliding_window_view(x, (self.kernel_size, self.kernel_size), axis=(2, 3))
        y = np.einsum("bchwij,ocij->bohw", windows, self.weight, optimize=True)
        return y + self.bias[None, :, None, None]

    def backward(self, grad_out):
        x = self._cache
        k = self.kernel_size
        windows = sliding_window_view(x, (k, k), axis=(2, 3))
        grad_w = np.einsum("bchwij,bohw->ocij", windows, grad_out, optimize=True)
        grad_b = grad_out.sum(axis=(0, 2, 3))
        pad = k - 1
        padded = np.pad(grad_out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        gwin = sliding_window_view(padded, (k, k), axis=(2, 3))
        flipped = self.weight[:, :, ::-1, ::-1]
        grad_in = np.einsum("bohwij,ocij->bchw", gwin, flipped, optimize=True)
        return [grad_w, grad_b], grad_in

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
        }


class SoftmaxOutput(Layer):
    """Classification head marker. The softmax itself is fused into
    cross_entropy, so forward passes logits through unchanged."""

    kind = "softmax-output"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        self._cache = True
        return x

    def backward(self, grad_out):
        return [], grad_out


_LAYER_KINDS = {cls.kind: cls for cls in (Dense, Relu, Flatten, Conv2D, SoftmaxOutput)}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec.get("kind")
    if kind not in _LAYER_KINDS:
        raise EngineError(f"unknown layer kind {kind!r}")
    kwargs = {k: v for k, v in spec.items() if k != "kind"}
    return _LAYER_KINDS[kind](**kwargs)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class LayeredModel:
    """Ordered layer stack with flat parameter access.

    ``input_shape`` is the per-sample shape; per-layer shapes are derived
    at construction so forward can report the exact offending layer on a
    mismatch. An empty layer list is the identity model (used by the
    degenerate cut-point modes).
    """

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...]):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self._in_shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            self._in_shapes.append(shape)
            try:
                shape = layer.out_shape(shape)
            except ValueError as exc:
                raise EngineError(f"layer {i} ({layer.kind}): {exc}") from exc
        self.output_shape = shape

    def __len__(self):
        return len(self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_f64(x)
        if x.ndim < 1 or x.shape[1:] != self.input_shape:
            raise ShapeMismatchError(0, self.layers[0].kind if self.layers else "identity",
                                     self.input_shape, x.shape[1:])
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients for every parameter (in layer order) and for the input."""
        grad = _as_f64(grad_out)
        if grad.shape[1:] != self.output_shape:
            raise ShapeMismatchError(len(self.layers) - 1,
                                     self.layers[-1].kind if self.layers else "identity",
                                     self.output_shape, grad.shape[1:])
        rev_param_grads = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer._cache is None:
                raise BackwardBeforeForwardError(i, layer.kind)
            pgrads, grad = layer.backward(grad)
            rev_param_grads.append(pgrads)
        param_grads = []
        for pgrads in reversed(rev_param_grads):
            param_grads.extend(pgrads)
        return param_grads, grad

    def flatten_params(self) -> np.ndarray:
        ps = self.parameters()
        if not ps:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in ps])

    def load_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count:
            raise EngineError(
                f"parameter vector has {flat.size} values, model needs {self.param_count}"
            )
        offset = 0
        for p in self.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def clone(self) -> "LayeredModel":
        return LayeredModel([layer.clone() for layer in self.layers], self.input_shape)

    def slice(self, start: int, stop: int) -> "LayeredModel":
        """Deep-copied sub-model over layers[start:stop]."""
        in_shape = self._in_shapes[start] if start < len(self.layers) else self.output_shape
        return LayeredModel([l.clone() for l in self.layers[start:stop]], in_shape)

    def init_params(self, master_seed: int) -> None:
        """Seed every layer from its own (master seed, layer index) stream."""
        for i, layer in enumerate(self.layers):
            layer.init_params(seeds.rng_for(master_seed, seeds.INIT, i))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    Uses log-sum-exp stabilization; the gradient is already divided by
    the batch size.
    """
    logits = _as_f64(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise EngineError(f"logits must be 2-D (batch, classes), got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise EngineError(f"got {labels.shape[0] if labels.ndim else 0} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise LabelRangeError(f"label {bad} out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Sgd:
    kind = "sgd"

    def __init__(self, lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.lr = float(lr)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        _check_aligned(params, grads)
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads):
        _check_aligned(params, grads)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if [m.shape for m in self.m] != [p.shape for p in params]:
            raise EngineError("adam moment shapes no longer match parameter shapes")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _check_aligned(params, grads):
    if len(params) != len(grads):
        raise EngineError(f"{len(grads)} gradients for {len(params)} parameter tensors")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise EngineError(
                f"parameter {i}: gradient shape {g.shape} != parameter shape {p.shape}"
            )


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(model: LayeredModel, x: np.ndarray, labels, h: float = 1e-6) -> float:
    """Max relative error between analytic and central finite-difference
    gradients of the mean cross-entropy over one batch."""
    if model.param_count > 10_000:
        raise EngineError(
            f"grad_check is limited to 10^4 parameters, model has {model.param_count}"
        )
    logits = model.forward(x)
    _, grad_logits = cross_entropy(logits, labels)
    analytic, _ = model.backward(grad_logits)

    worst = 0.0
    params = model.parameters()
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + h
            lp, _ = cross_entropy(model.forward(x), labels)
            flat_p[j] = orig - h
            lm, _ = cross_entropy(model.forward(x), labels)
            flat_p[j] = orig
            fd = (lp - lm) / (2.0 * h)
            denom = max(abs(flat_g[j]), abs(fd), 1e-8)
            worst = max(worst, abs(flat_g[j] - fd) / denom)
    return worst
