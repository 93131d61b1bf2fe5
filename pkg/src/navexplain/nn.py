"""Minimal numpy neural-network engine.

Layers keep the activations of their last forward pass and implement an
explicit ``backward``.  Everything works on batches: image tensors are laid
out ``(N, C, H, W)``, vectors ``(N, F)``.  Parameters are :class:`Tensor`
objects pairing a data array with a gradient buffer of the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
LOG_FLOOR = 1e-8


class ShapeError(ValueError):
    """Input shape is incompatible with a layer."""


class FrozenError(RuntimeError):
    """Attempt to update or write gradients into frozen parameters."""


class Tensor:
    """A parameter array with its gradient buffer."""

    __slots__ = ("name", "data", "grad", "frozen")

    def __init__(self, data, name: str = ""):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)
        self.name = name
        self.frozen = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def accumulate(self, g: np.ndarray) -> None:
        if self.frozen:
            raise FrozenError(f"gradient write into frozen parameter {self.name!r}")
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, shape={self.shape}, dtype={self.data.dtype})"


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self._cache = None

    def params(self) -> list[Tensor]:
        return []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape."""
        return tuple(in_shape)

    def _require_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        return self._cache

    def __call__(self, *args):
        return self.forward(*args)

    def astype(self, dtype) -> None:
        for p in self.params():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        self._cache = None


class Conv2d(Layer):
    """2-D convolution via im2col.

    ``input_grad=False`` skips the input gradient, which the first layer of a
    network never needs.
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 rng=None, dtype=DEFAULT_DTYPE, input_grad=True, name="conv"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.input_grad = input_grad
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype),
                             f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"conv2d({self.weight.name}): expected ({self.in_channels}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if hp < self.kernel or wp < self.kernel:
            raise ShapeError(f"conv2d({self.weight.name}): input {tuple(in_shape)} smaller than kernel {self.kernel}")
        return (self.out_channels, (hp - self.kernel) // self.stride + 1, (wp - self.kernel) // self.stride + 1)

    def forward(self, x):
        _, oh, ow = self.output_shape(x.shape[1:])
        n = x.shape[0]
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, -1)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.bias.data
        self._cache = (cols, x.shape, xp.shape, oh, ow)
        return np.ascontiguousarray(out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, g):
        cols, x_shape, xp_shape, oh, ow = self._require_cache()
        n = x_shape[0]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.weight.accumulate((g2.T @ cols).reshape(self.weight.shape))
        self.bias.accumulate(g2.sum(axis=0))
        if not self.input_grad:
            return None
        k, s, p = self.kernel, self.stride, self.padding
        dcols = (g2 @ self.weight.data.reshape(self.out_channels, -1)).reshape(n, oh, ow, self.in_channels, k, k)
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class Linear(Layer):
    """Fully connected layer; image inputs are flattened row-major."""

    kind = "fullyconnected"

    def __init__(self, in_features, out_features, rng=None, dtype=DEFAULT_DTYPE, name="fc"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(he_uniform(rng, (out_features, in_features), in_features, dtype), f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_features:
            raise ShapeError(f"fullyconnected({self.weight.name}): expected {self.in_features} inputs, got shape {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        flat = x.reshape(x.shape[0], -1)
        self._cache = (flat, x.shape)
        return flat @ self.weight.data.T + self.bias.data

    def backward(self, g):
        flat, shape = self._require_cache()
        self.weight.accumulate(g.T @ flat)
        self.bias.accumulate(g.sum(axis=0))
        return (g @ self.weight.data).reshape(shape)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, g):
        return g * self._require_cache()


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = 1.0 / (1.0 + np.exp(-x))
        self._cache = y
        return y

    def backward(self, g):
        y = self._require_cache()
        return g * y * (1.0 - y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    """Softmax over axis 1."""

    kind = "softmax"

    def forward(self, x):
        y = softmax(x, axis=1)
        self._cache = y
        return y

    def backward(self, g):
        y = self._require_cache()
        return y * (g - (g * y).sum(axis=1, keepdims=True))


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"globalavgpool: expected (C, H, W), got {tuple(in_shape)}")
        return (in_shape[0],)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, g):
        n, c, h, w = self._require_cache()
        return np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy()


class ConcatChannels(Layer):
    """Concatenates two image tensors along the channel axis."""

    kind = "concat-channels"

    def output_shape(self, in_shape, other_shape=None):
        if other_shape is None:
            return tuple(in_shape)
        if len(in_shape) != 3 or len(other_shape) != 3 or in_shape[1:] != other_shape[1:]:
            raise ShapeError(f"concat-channels: spatial mismatch {tuple(in_shape)} vs {tuple(other_shape)}")
        return (in_shape[0] + other_shape[0],) + tuple(in_shape[1:])

    def forward(self, a, b):
        self.output_shape(a.shape[1:], b.shape[1:])
        self._cache = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, g):
        split = self._require_cache()
        return g[:, :split], g[:, split:]


class BroadcastScalars(Layer):
    """Turns ``(N, S)`` scalars into ``S`` constant ``height x width`` maps."""

    kind = "broadcast-scalars"

    def __init__(self, height, width):
        super().__init__()
        self.height = height
        self.width = width

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"broadcast-scalars: expected (S,), got {tuple(in_shape)}")
        return (in_shape[0], self.height, self.width)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        self._cache = True
        return np.broadcast_to(x[:, :, None, None], x.shape + (self.height, self.width)).copy()

    def backward(self, g):
        self._require_cache()
        return g.sum(axis=(2, 3))


# ---------------------------------------------------------------- losses


def cross_entropy(probs, target, floor: float = LOG_FLOOR):
    """Mean cross-entropy of probability rows against one-hot targets.

    Returns ``(loss, grad)`` where ``grad`` is the gradient with respect to the
    pre-softmax logits, ``(probs - target) / N``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    single = probs.ndim == 1
    if single:
        probs, target = probs[None], target[None]
    if probs.shape != target.shape:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs target {target.shape}")
    if not (np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=1) == 1)):
        raise ValueError("cross_entropy: target must be one-hot")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-5):
        raise ValueError("cross_entropy: probs must be a probability vector")
    n = probs.shape[0]
    loss = float(-(target * np.log(np.maximum(probs, floor))).sum() / n)
    grad = (probs - target) / n
    return loss, (grad[0] if single else grad)


def huber(pred, target, delta: float = 1.0):
    """Mean Huber loss and its gradient w.r.t. ``pred``."""
    diff = pred - target
    absd = np.abs(diff)
    quad = absd <= delta
    loss = np.where(quad, 0.5 * diff * diff, delta * (absd - 0.5 * delta))
    grad = np.where(quad, diff, delta * np.sign(diff)) / diff.size
    return float(loss.mean()), grad.astype(pred.dtype, copy=False)


# ------------------------------------------------------------ optimizers


class Optimizer:
    def __init__(self, params, lr):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def _check(self):
        for p in self.params:
            if p.frozen:
                raise FrozenError(f"optimizer step on frozen parameter {p.name!r}")
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}; step aborted")


class SGDMomentum(Optimizer):
    """``v <- mu*v - lr*g``; ``p <- p + v``."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self._check()
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v -= self.lr * g
            p.data += v


class RMSProp(Optimizer):
    """RMSProp with a running mean of squared gradients."""

    def __init__(self, params, lr, decay=0.95, eps=1e-6):
        super().__init__(params, lr)
        self.decay = decay
        self.eps = eps
        self.square_avg = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self._check()
        for p, s in zip(self.params, self.square_avg):
            s *= self.decay
            s += (1.0 - self.decay) * p.grad * p.grad
            p.data -= self.lr * p.grad / (np.sqrt(s) + self.eps)


# ------------------------------------------------------------- gradcheck


@dataclass
class GradcheckReport:
    checked: int
    max_rel_error: float
    worst: str = ""
    errors: list = field(default_factory=list, repr=False)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def gradcheck(loss_fn, tensors, samples: int = 100, step: float = 1e-5,
              rng: np.random.Generator | None = None, floor: float = 1e-6) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must zero the gradients of ``tensors``, run forward and
    backward, and return the scalar loss.  ``samples`` entries are drawn
    uniformly from the union of all tensors (all of them if there are fewer).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    loss_fn()
    analytic = [t.grad.copy() for t in tensors]
    sizes = np.array([t.data.size for t in tensors])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors = []
    worst, worst_err = "", 0.0
    for flat in np.sort(picks):
        ti = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[ti], tensors[ti].shape)
        t = tensors[ti]
        orig = t.data[idx].copy()
        t.data[idx] = orig + step
        up = loss_fn()
        t.data[idx] = orig - step
        down = loss_fn()
        t.data[idx] = orig
        numeric = (up - down) / (2 * step)
        a = float(analytic[ti][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        errors.append(err)
        if err > worst_err:
            worst_err, worst = err, f"{t.name}{list(map(int, idx))}: analytic={a:.6g} numeric={numeric:.6g}"
    loss_fn()
    return GradcheckReport(checked=len(errors), max_rel_error=float(max(errors, default=0.0)),
                           worst=worst, errors=errors)
