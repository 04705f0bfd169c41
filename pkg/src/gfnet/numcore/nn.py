"""Layer primitives and parameter containers built on the tape."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from . import kernels
from .tensor import Tensor, add, make_result, matmul, sigmoid, tanh, transpose


class Parameter(Tensor):
    """A leaf tensor that is trained by an optimizer."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


# -- functional ops ----------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, computed as one GEMM over im2col columns."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, c2, kh, kw = weight.shape
    if c != c2:
        raise ConfigurationError(f"conv2d channel mismatch: input has {c}, kernel expects {c2}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw or stride < 1:
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride).reshape(n * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(f, -1)
    out = (cols @ w2.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.ascontiguousarray((g2 @ w2).reshape(n, ho, wo, c, kh, kw))
            gxp = kernels.col2im(dcols, hp, wp, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ConfigurationError("global_avg_pool needs non-empty spatial dims")
    scale = 1.0 / (h * w)
    out = x.data.sum(axis=(2, 3)) * np.asarray(scale, dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.dtype),)

    return make_result(out.astype(x.dtype), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out_features, in_features)."""
    out = matmul(x, transpose(weight, None))
    return out if bias is None else add(out, bias)


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU update.

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h
    """
    hidden = h.shape[-1]
    if w_ih.shape != (3 * hidden, x.shape[-1]) or w_hh.shape != (3 * hidden, hidden):
        raise ConfigurationError(
            f"gru_cell: weights {w_ih.shape}/{w_hh.shape} do not match input {x.shape} and hidden {h.shape}"
        )
    gi = linear(x, w_ih, b_ih)
    gh = linear(h, w_hh, b_hh)
    r = sigmoid(gi[:, :hidden] + gh[:, :hidden])
    z = sigmoid(gi[:, hidden:2 * hidden] + gh[:, hidden:2 * hidden])
    n = tanh(gi[:, 2 * hidden:] + r * gh[:, 2 * hidden:])
    return n + z * (h - n)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch plus the softmax probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ConfigurationError(f"softmax_cross_entropy expects (N, C>=2) logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ConfigurationError(f"labels shape {labels.shape} does not match batch {n}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite cross-entropy")

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return make_result(loss, (logits,), backward), probs


# -- parameter containers ----------------------------------------------------

class Module:
    """Attribute-walking parameter container (definition order is the canonical order)."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        # Kaiming-uniform with the ReLU gain
        self.weight = Parameter(_uniform(rng, (out_ch, in_ch, kernel, kernel), np.sqrt(6.0 / fan_in)))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, (out_features, in_features), 1.0 / np.sqrt(in_features)))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class GRUCell(Module):
    def __init__(self, input_size: int, hidden_size: int, rng=None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(hidden_size)
        self.w_ih = Parameter(_uniform(rng, (3 * hidden_size, input_size), bound))
        self.w_hh = Parameter(_uniform(rng, (3 * hidden_size, hidden_size), bound))
        self.b_ih = Parameter(np.zeros(3 * hidden_size, dtype=np.float32))
        self.b_hh = Parameter(np.zeros(3 * hidden_size, dtype=np.float32))
        self.hidden_size = hidden_size

    def initial_state(self, batch: int, dtype=np.float32) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_size), dtype=dtype))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
