"""Neural building blocks on channels-last grids ``[B, T, S, C]``."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor

PAD_ID = 0


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; sub-modules
    are ``Module`` attributes or lists of them. Non-parameter state (batch
    norm running statistics) is exposed through :meth:`named_buffers`.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Module):
                out.update(value.named_buffers(key + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer to ``dtype`` in place."""
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                    value.grad = None
                elif isinstance(value, np.ndarray) and value.dtype.kind == "f":
                    setattr(m, name, value.astype(dtype))
        return self


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Embedding(Module):
    """Token lookup table whose PAD row stays at zero."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, dtype=np.float32, pad_id: int = PAD_ID):
        w = rng.normal(0.0, 0.1, size=(vocab_size, dim)).astype(dtype)
        w[pad_id] = 0.0
        self.vocab_size, self.dim, self.pad_id = vocab_size, dim, pad_id
        self.weight = Tensor(w, requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ag.embedding(self.weight, ids, frozen_row=self.pad_id)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        self.weight = _uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias = _uniform(rng, (out_features,), in_features, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class MaskedConv2d(Module):
    """Convolution that only looks at current and previous target rows.

    Built from a single source width ``k``, the target height is
    ``ceil(k / 2)``; causality comes from top-only padding of the target axis.
    """

    def __init__(self, in_channels: int, out_channels: int, k: int, rng: np.random.Generator,
                 kernel_target: int | None = None, dtype=np.float32):
        if k < 1 or k % 2 == 0:
            raise ValueError(f"source kernel width must be odd and >= 1, got {k}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_source = k
        self.kernel_target = math.ceil(k / 2) if kernel_target is None else kernel_target
        fan_in = in_channels * k * self.kernel_target
        self.weight = _uniform(rng, (out_channels, in_channels, self.kernel_target, k), fan_in, dtype)
        self.bias = _uniform(rng, (out_channels,), fan_in, dtype)

    def __call__(self, x: Tensor, pad_top: bool = True) -> Tensor:
        return conv2d_masked(x, self, pad_top=pad_top)


def conv2d_masked(x: Tensor, layer: MaskedConv2d, pad_top: bool = True) -> Tensor:
    if x.shape[-1] != layer.in_channels:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, layer expects {layer.in_channels}")
    return ag.conv2d_causal(x, layer.weight, layer.bias, pad_top=pad_top)


class BatchNorm2d(Module):
    """Per-channel batch normalization restricted to valid grid cells."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}running_mean": self.running_mean, f"{prefix}running_var": self.running_var}

    def __call__(self, x: Tensor, valid_mask: np.ndarray) -> Tensor:
        return batchnorm_forward(x, self, valid_mask)


def batchnorm_forward(x: Tensor, layer: BatchNorm2d, valid_mask: np.ndarray) -> Tensor:
    if x.shape[-1] != layer.channels:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, layer expects {layer.channels}")
    if not layer.training:
        inv = Tensor((1.0 / np.sqrt(layer.running_var + layer.eps)).astype(x.dtype))
        scale = ag.mul(layer.gamma, inv)
        shift = ag.sub(layer.beta, ag.mul(scale, Tensor(layer.running_mean.astype(x.dtype))))
        return ag.affine_channels(x, scale, shift)
    mask = np.broadcast_to(np.asarray(valid_mask, dtype=bool), x.shape[:-1])
    if not mask.any():
        raise ValueError("batch norm called with zero valid cells")
    out, mean, var = ag.batch_norm_train(x, layer.gamma, layer.beta, mask, layer.eps)
    n = int(mask.sum())
    unbiased = var * (n / (n - 1)) if n > 1 else var
    m = layer.momentum
    layer.running_mean = ((1 - m) * layer.running_mean + m * mean).astype(layer.running_mean.dtype)
    layer.running_var = ((1 - m) * layer.running_var + m * unbiased).astype(layer.running_var.dtype)
    return out


def glu(x: Tensor) -> Tensor:
    """First channel half gated by the sigmoid of the second half."""
    c = x.shape[-1]
    if c % 2:
        raise ValueError(f"glu needs an even channel count, got {c}")
    value, gate = ag.split_last(x, [c // 2, c // 2])
    return ag.mul(value, ag.sigmoid(gate))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return ag.mul(x, Tensor(keep))
