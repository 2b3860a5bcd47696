"""Layers of the Basic Network: convolution, batch norm, pooling, activations,
linear, bilinear pooling and the classification loss.

Functional forms operate on ``Tensor`` values; the ``Module`` classes hold
parameters and mode flags and delegate to them.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DegenerateStatisticsError, ShapeError
from .tensor import Rng, Tensor, get_default_dtype

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "prelu", "ptelu")
_SQRT_GRAD_FLOOR = 1e-12


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------------------
# functional ops


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Channels-last patches: rows are output pixels, columns ordered (kh, kw, c)."""
    n, h, w, c = xp.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, kh * kw * c)
    return cols, oh, ow


def _pad_hw(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if not (top or bottom or left or right):
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))


def _nchw_to_nhwc(x: Tensor) -> Tensor:
    return x.transpose(0, 2, 3, 1)


def _nhwc_to_nchw(x: Tensor) -> Tensor:
    return x.transpose(0, 3, 1, 2)


def _conv2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    n, h, w, c = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be {oh}x{ow} for input {h}x{w}, kernel {kh}x{kw}")

    xp = _pad_hw(x.data, padding, padding, padding, padding)
    cols, _, _ = _im2col(xp, kh, kw, stride)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(oc, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, oc)

    def backward(g):
        g2 = g.reshape(-1, oc)
        gw = (g2.T @ cols).reshape(oc, kh, kw, c).transpose(0, 3, 1, 2) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # col2im scatter in a channel-major scratch layout: each (i, j, c)
            # slab of the patch gradients is contiguous over (n, oh, ow).
            hp, wp = xp.shape[1:3]
            dcols = (wmat.T @ g2.T).reshape(kh, kw, c, n, oh, ow)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[i, j]
            gxp = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gxp.transpose(1, 2, 3, 0))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    channels_last: bool = False,
) -> Tensor:
    """Zero-padded 2D cross-correlation (no kernel flip) via im2col.

    ``x`` is NCHW, or NHWC when ``channels_last``; ``weight`` is always
    (out, in, kh, kw).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    if channels_last:
        return _conv2d_nhwc(x, weight, bias, stride, padding)
    return _nhwc_to_nchw(_conv2d_nhwc(_nchw_to_nhwc(x), weight, bias, stride, padding))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    stats_sink: list | None = None,
    channels_last: bool = False,
) -> Tensor:
    """Per-channel normalization of an NCHW (or NHWC) tensor.

    In training mode the batch statistics normalize the input and the
    running estimates are updated in place (unless ``stats_sink`` is given,
    in which case per-batch sums are appended there instead). Eval mode is
    a fixed affine map built from the running estimates.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects a 4D input, got {x.shape}")
    c = x.shape[3] if channels_last else x.shape[1]
    axes = (0, 1, 2) if channels_last else (0, 2, 3)
    shape = (1, 1, 1, c) if channels_last else (1, c, 1, 1)
    count = x.size // c
    if training:
        if count < 2:
            raise DegenerateStatisticsError(
                f"batchnorm in training mode needs at least 2 values per channel, got input {x.shape}"
            )
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=axes)
        if stats_sink is not None:
            stats_sink.append((count, mean.astype(np.float64), (var + mean * mean).astype(np.float64)))
        else:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * count / (count - 1)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(shape)
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = gxhat.sum(axis=axes).reshape(shape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(shape)
                gx = (inv_std.reshape(shape) / count) * (count * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm2d")


def maxpool2d(x: Tensor, k: int = 2, s: int | None = None, channels_last: bool = False) -> Tensor:
    """Window maximum; backward routes to the first row-major argmax."""
    s = k if s is None else s
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4D input, got {x.shape}")
    sp = (1, 2) if channels_last else (2, 3)
    h, w = x.shape[sp[0]], x.shape[sp[1]]
    if k > h or k > w:
        raise ShapeError(f"maxpool window {k} larger than input {h}x{w}")
    oh, ow = _out_size(h, k, s, 0), _out_size(w, k, s, 0)
    win = sliding_window_view(x.data, (k, k), axis=sp)
    if channels_last:
        win = win[:, ::s, ::s][:, :oh, :ow]
    else:
        win = win[:, :, ::s, ::s][:, :, :oh, :ow]
    flat = win.reshape(win.shape[:4] + (k * k,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                if not hit.any():
                    continue
                rows, cols = slice(i, i + s * oh, s), slice(j, j + s * ow, s)
                if channels_last:
                    gx[:, rows, cols] += g * hit
                else:
                    gx[:, :, rows, cols] += g * hit
        return (gx,)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def _channel_shape(x: Tensor, axis: int) -> tuple:
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return tuple(shape)


def _reduce_axes(x: Tensor, axis: int) -> tuple:
    axis = axis % x.ndim
    return tuple(a for a in range(x.ndim) if a != axis)


def prelu(x: Tensor, slope: Tensor, axis: int = 1) -> Tensor:
    """x for x >= 0, slope * x otherwise; one slope per channel along ``axis``."""
    a = slope.data.reshape(_channel_shape(x, axis))
    pos = x.data >= 0
    out = np.where(pos, x.data, a * x.data)

    def backward(g):
        gx = np.where(pos, g, a * g)
        ga = np.where(pos, 0.0, g * x.data).sum(axis=_reduce_axes(x, axis)) if slope.requires_grad else None
        return gx, ga

    return Tensor._make(out, (x, slope), backward, "prelu")


def ptelu(x: Tensor, alpha: Tensor, beta: Tensor, axis: int = 1) -> Tensor:
    """x for x >= 0, alpha * tanh(beta * x) otherwise; per-channel alpha, beta."""
    cs = _channel_shape(x, axis)
    al, be = alpha.data.reshape(cs), beta.data.reshape(cs)
    pos = x.data >= 0
    t = np.tanh(be * x.data)
    out = np.where(pos, x.data, al * t)

    def backward(g):
        dt = 1.0 - t * t
        axes = _reduce_axes(x, axis)
        gx = np.where(pos, g, g * al * be * dt)
        ga = np.where(pos, 0.0, g * t).sum(axis=axes) if alpha.requires_grad else None
        gb = np.where(pos, 0.0, g * al * x.data * dt).sum(axis=axes) if beta.requires_grad else None
        return gx, ga, gb

    return Tensor._make(out, (x, alpha, beta), backward, "ptelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    X, W = x.data, weight.data
    out = X @ W.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ W if x.requires_grad else None
        gw = g.T @ X if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "linear")


def signed_sqrt(x: Tensor) -> Tensor:
    a = np.abs(x.data)
    out = np.sign(x.data) * np.sqrt(a)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / np.sqrt(np.maximum(a, _SQRT_GRAD_FLOOR)),), "signed_sqrt")


def l2_normalize(x: Tensor) -> Tensor:
    """Row-wise L2 normalization of an (n, d) tensor; all-zero rows pass through."""
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    zero = norm == 0
    if zero.any():
        logger.debug("l2_normalize: %d all-zero rows left unnormalized", int(zero.sum()))
    safe = np.where(zero, 1.0, norm)
    y = x.data / safe

    def backward(g):
        proj = (y * g).sum(axis=1, keepdims=True)
        gx = np.where(zero, g, (g - y * proj) / safe)
        return (gx,)

    return Tensor._make(y, (x,), backward, "l2_normalize")


def bilinear_pool(x: Tensor, signed_sqrt_norm: bool = True, l2_norm: bool = True, channels_last: bool = False) -> Tensor:
    """Second-order pooling: per sample X @ X.T over flattened spatial positions.

    Returns an (n, c*c) tensor, optionally passed through signed square root
    and row-wise L2 normalization.
    """
    if channels_last:
        n, h, w, c = x.shape
        feats = x.reshape(n, h * w, c)
        gram = feats.transpose(0, 2, 1) @ feats
    else:
        n, c, h, w = x.shape
        feats = x.reshape(n, c, h * w)
        gram = feats @ feats.transpose(0, 2, 1)
    z = gram.reshape(n, c * c)
    if signed_sqrt_norm:
        z = signed_sqrt(z)
    if l2_norm:
        z = l2_normalize(z)
    return z


def softmax_cross_entropy(logits: Tensor, labels, class_weight=None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    With ``class_weight`` the mean is weighted by the weight of each
    sample's true class.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k - 1}], got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    weights = np.ones(n) if class_weight is None else np.asarray(class_weight, dtype=np.float64)[labels]
    total = weights.sum()
    rows = np.arange(n)
    loss = -(weights * logp[rows, labels]).sum() / total

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((g * weights / total)[:, None] * p,)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_xent")


# ---------------------------------------------------------------------------
# modules


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Container for parameters, buffers and sub-modules."""

    def __init__(self):
        self.training = True
        self.frozen = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state[name] = b.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ShapeError(f"{name}: expected shape {p.data.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, b in buffers.items():
            b[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode and not m.frozen
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        """Stop gradient flow into all parameters and pin to eval mode."""
        for m in self.modules():
            m.frozen = True
            m.training = False
        for p in self.parameters():
            p.requires_grad = False
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def post_step(self) -> None:
        """Hook run after each optimizer step (projections, clamps)."""

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def he_normal(rng: Rng, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        rng: Rng | None = None,
        channels_last: bool = False,
    ):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ShapeError(f"kernel and stride must be >= 1, got {kernel}, {stride}")
        rng = rng or Rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_ch))
        self.stride, self.padding = stride, padding
        self.channels_last = channels_last

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.channels_last)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, channels_last: bool = False):
        super().__init__()
        if not 0 < momentum <= 1 or eps <= 0:
            raise ValueError(f"need momentum in (0, 1] and eps > 0, got {momentum}, {eps}")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps
        self.stats_sink: list | None = None
        self.channels_last = channels_last

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
            self.stats_sink,
            self.channels_last,
        )

    def finalize_population_stats(self) -> None:
        """Replace running estimates with exact statistics pooled over ``stats_sink``."""
        if not self.stats_sink:
            self.stats_sink = None
            return
        total = sum(cnt for cnt, _, _ in self.stats_sink)
        mean = sum(cnt * m for cnt, m, _ in self.stats_sink) / total
        second = sum(cnt * sq for cnt, _, sq in self.stats_sink) / total
        self.running_mean[...] = mean
        self.running_var[...] = np.maximum(second - mean * mean, 0.0) * total / max(total - 1, 1)
        self.stats_sink = None


class MaxPool2d(Module):
    def __init__(self, k: int = 2, s: int | None = None, channels_last: bool = False):
        super().__init__()
        self.k, self.s = k, s
        self.channels_last = channels_last

    def forward(self, x: Tensor) -> Tensor:
        return maxpool2d(x, self.k, self.s, self.channels_last)


class Activation(Module):
    """ReLU, PReLU (per-channel slope, init 0.25) or P-TELU (per-channel alpha, beta, init 1)."""

    def __init__(self, kind: str = "relu", channels: int = 1, axis: int = 1):
        super().__init__()
        self.axis = axis
        kind = kind.lower().replace("-", "")
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")
        self.kind = kind
        if kind == "prelu":
            self.slope = Parameter(np.full(channels, 0.25))
        elif kind == "ptelu":
            self.alpha = Parameter(np.ones(channels))
            self.beta = Parameter(np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "relu":
            return relu(x)
        if self.kind == "prelu":
            return prelu(x, self.slope, self.axis)
        return ptelu(x, self.alpha, self.beta, self.axis)

    def post_step(self) -> None:
        if self.kind == "ptelu":
            np.maximum(self.alpha.data, 0.0, out=self.alpha.data)
            np.maximum(self.beta.data, 0.0, out=self.beta.data)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BilinearPool(Module):
    def __init__(self, signed_sqrt: bool = True, l2: bool = True, channels_last: bool = False):
        super().__init__()
        self.signed_sqrt, self.l2 = signed_sqrt, l2
        self.channels_last = channels_last

    def forward(self, x: Tensor) -> Tensor:
        return bilinear_pool(x, self.signed_sqrt, self.l2, self.channels_last)


def as_input(x, dtype=None) -> Tensor:
    """Wrap raw data as a constant tensor in the working precision."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or get_default_dtype())


__all__ = [
    "ACTIVATIONS",
    "Activation",
    "BatchNorm2d",
    "BilinearPool",
    "Conv2d",
    "Linear",
    "MaxPool2d",
    "Module",
    "Parameter",
    "batchnorm2d",
    "bilinear_pool",
    "conv2d",
    "l2_normalize",
    "linear",
    "maxpool2d",
    "prelu",
    "ptelu",
    "relu",
    "signed_sqrt",
    "softmax_cross_entropy",
]
