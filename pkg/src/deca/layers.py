"""Neural primitives: conv, instance norm, linear, dropout, Xavier init.

Modules are plain parameter containers; forward passes build the autodiff
tape. Convolution is cross-correlation (no kernel flip) via im2col + gemm.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Parameter, Tensor, gelu, get_default_dtype

__all__ = [
    "Module",
    "Conv2d",
    "InstanceNorm2d",
    "Linear",
    "dropout",
    "gelu",
    "xavier_uniform_init",
    "conv_output_hw",
]


class Module:
    """Minimal parameter container with stable, path-like parameter names."""

    def named_parameters(self, prefix=""):
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}" if prefix else key
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k in sorted(val):
                    item = val[k]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{k}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def xavier_fans(shape):
    """(fan_in, fan_out) with kernel area folded in, axis 0 = output."""
    if len(shape) < 2:
        raise ContractError(f"xavier init needs >= 2 dims, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_uniform_init(shape, rng):
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); deterministic given rng."""
    fan_in, fan_out = xavier_fans(tuple(shape))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(get_default_dtype())


def conv_output_hw(h, w, kernel, stride, padding):
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigError(
            f"conv output collapses: input {h}x{w}, kernel {kernel}, stride {stride}, pad {padding}"
        )
    return oh, ow


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, rng, kernel=3, stride=2, padding=1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(xavier_uniform_init((out_channels, in_channels, kernel, kernel), rng))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_default_dtype()))

    def __call__(self, x):
        return conv2d(x, self)


def _im2col(x, kernel, stride, padding):
    # x: [B, C, H, W] -> cols [B, C*k*k, OH*OW], column order (c, di, dj).
    b, c, h, w = x.shape
    oh, ow = conv_output_hw(h, w, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kernel, kernel, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(b, c * kernel * kernel, oh * ow), (oh, ow)


def _col2im(cols, x_shape, kernel, stride, padding):
    # Scatter-add columns back onto the (padded) input grid.
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    oh, ow = conv_output_hw(h, w, kernel, stride, padding)
    cols = cols.reshape(b, c, kernel, kernel, oh, ow)
    for di in range(kernel):
        for dj in range(kernel):
            out[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += cols[:, :, di, dj]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x, layer):
    """Strided cross-correlation with bias; grads flow to input, weight, bias."""
    x = Tensor._coerce(x)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W], got {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise DimensionError(
            f"conv2d channel mismatch: input has {x.shape[1]}, layer expects {layer.in_channels}"
        )
    k, s, p = layer.kernel, layer.stride, layer.padding
    w, bias = layer.weight, layer.bias
    cols, (oh, ow) = _im2col(x.data, k, s, p)
    w_mat = w.data.reshape(layer.out_channels, -1)
    out = np.matmul(w_mat, cols).reshape(x.shape[0], layer.out_channels, oh, ow)
    out += bias.data[None, :, None, None]

    needs = x.requires_grad or w.requires_grad or bias.requires_grad
    if not needs:
        return Tensor(out)

    def backward(g):
        g_mat = g.reshape(g.shape[0], layer.out_channels, oh * ow)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.einsum("bop,bkp->ok", g_mat, cols, optimize=True)
            w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g_mat)
            x._accumulate(_col2im(gcols, x.shape, k, s, p))

    return Tensor(out, True, (x, w, bias), backward)


class InstanceNorm2d(Module):
    def __init__(self, channels, eps=1e-5):
        if eps <= 0:
            raise ConfigError("instance norm eps must be positive")
        self.channels = channels
        self.eps = eps
        dt = get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))

    def __call__(self, x):
        return instance_norm(x, self)


def instance_norm(x, layer):
    """Normalize each (sample, channel) over its spatial extent, then affine."""
    x = Tensor._coerce(x)
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if h * w < 2:
        raise DimensionError("instance_norm needs H*W >= 2")
    mu = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    xhat = centered / (var + layer.eps).sqrt()
    return xhat * layer.gamma.reshape(1, c, 1, 1) + layer.beta.reshape(1, c, 1, 1)


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(xavier_uniform_init((out_features, in_features), rng))
        self.bias = Parameter(np.zeros(out_features, dtype=get_default_dtype()))

    def __call__(self, x):
        return linear(x, self)


def linear(x, layer):
    x = Tensor._coerce(x)
    if x.shape[-1] != layer.in_features:
        raise DimensionError(
            f"linear feature mismatch: input has {x.shape[-1]}, layer expects {layer.in_features}"
        )
    return x @ layer.weight.transpose(1, 0) + layer.bias


def dropout(x, p, training, rng=None):
    """Inverted dropout: identity in eval mode, 1/(1-p) survivor scaling in train."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    x = Tensor._coerce(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an explicit rng for reproducibility")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * Tensor(mask)
