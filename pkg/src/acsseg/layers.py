"""Parameterized layers with explicit forward/backward passes.

Layers operate on batched arrays ``(N, C, *spatial)`` and cache what their
backward pass needs. There is no autodiff graph: containers call
``backward`` on their children in reverse order.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .acs import ACSKernel, _group_slices, _view_params, _view_weight, split_channels


class Parameter:
    """A named-by-position weight array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "frozen")

    def __init__(self, data: np.ndarray, frozen: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.frozen = frozen

    def accumulate(self, g: np.ndarray) -> None:
        if self.frozen:
            return
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, frozen={self.frozen})"


class Module:
    _buffers: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for m in value:
                    yield from m.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in m._buffers:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def clear_cache(self) -> None:
        for m in self.modules():
            m.__dict__.pop("_cache", None)

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)


class Conv3d(Module):
    """3D convolution; ``padding=None`` means same-padding ``k // 2``."""

    kind = "conv3d"

    def __init__(self, in_ch: int, out_ch: int, kernel=3, stride=1, padding=None,
                 bias: bool = False, dtype=np.float32):
        k = T._tuple(kernel, 3)
        self.stride = T._tuple(stride, 3)
        self.padding = tuple(kk // 2 for kk in k) if padding is None else T._tuple(padding, 3)
        self.weight = Parameter(np.zeros((out_ch, in_ch) + k, dtype=dtype))
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def forward(self, x, train=False):
        w = self.weight.data
        wm = T._weight_matrix(w)
        outs, cache = [], []
        for sample in x:
            geom = T.conv3d_geometry(sample.shape, w.shape, self.stride, self.padding)
            cols = T._im2col(sample, geom)
            outs.append(T._unflatten(wm @ cols, geom))
            cache.append((geom, cols))
        y = np.stack(outs)
        if hasattr(self, "bias"):
            y += self.bias.data.reshape(1, -1, 1, 1, 1)
        self._cache = cache
        return y

    def backward(self, gy):
        w = self.weight.data
        wm = T._weight_matrix(w)
        gw = np.zeros((w.shape[0], wm.shape[1]), dtype=w.dtype)
        gx = []
        for g_sample, (geom, cols) in zip(gy, self._cache):
            g = T._flatten(g_sample, geom)
            gw += g @ cols.T
            gx.append(T._col2im(wm.T @ g, geom))
        self.weight.accumulate(
            gw.reshape(w.shape[0], -1, w.shape[1]).transpose(0, 2, 1).reshape(w.shape))
        if hasattr(self, "bias"):
            self.bias.accumulate(gy.sum(axis=(0, 2, 3, 4)))
        self._cache = None
        return np.stack(gx)


class ACSConv(Module):
    """Tri-planar convolution with a 2D ``(C_out, C_in, k, k)`` kernel bank."""

    kind = "acs_conv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride=1, bias: bool = False,
                 dtype=np.float32):
        self.stride = T._tuple(stride, 2)
        self.weight = Parameter(np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype))
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def _kernel(self) -> ACSKernel:
        return ACSKernel(self.weight.data, None, stride=self.stride)

    def _views(self):
        kern = self._kernel()
        for view, sl in _group_slices(kern.split):
            if sl.start == sl.stop:
                continue
            axis, stride, padding = _view_params(kern, view)
            yield sl, _view_weight(self.weight.data[sl], axis), stride, padding

    def forward(self, x, train=False):
        views = list(self._views())
        outs, cache = [], []
        for sample in x:
            parts, sample_cache = [], []
            for sl, w, stride, padding in views:
                geom = T.conv3d_geometry(sample.shape, w.shape, stride, padding)
                cols = T._im2col(sample, geom)
                parts.append(T._unflatten(T._weight_matrix(w) @ cols, geom))
                sample_cache.append((geom, cols))
            outs.append(np.concatenate(parts, axis=0))
            cache.append(sample_cache)
        y = np.stack(outs)
        if hasattr(self, "bias"):
            y += self.bias.data.reshape(1, -1, 1, 1, 1)
        self._cache = cache
        return y

    def backward(self, gy):
        views = list(self._views())
        gw = np.zeros_like(self.weight.data)
        gx = []
        for g_sample, sample_cache in zip(gy, self._cache):
            gxs = None
            for (sl, w, _, _), (geom, cols) in zip(views, sample_cache):
                g = T._flatten(g_sample[sl], geom)
                gw_view = (g @ cols.T).reshape(w.shape[0], -1, w.shape[1]).transpose(0, 2, 1)
                gw[sl] += gw_view.reshape(w.shape).reshape(gw[sl].shape)
                part = T._col2im(T._weight_matrix(w).T @ g, geom)
                gxs = part.copy() if gxs is None else gxs + part
            gx.append(gxs)
        self.weight.accumulate(gw)
        if hasattr(self, "bias"):
            self.bias.accumulate(gy.sum(axis=(0, 2, 3, 4)))
        self._cache = None
        return np.stack(gx)

    @property
    def split(self):
        return split_channels(self.weight.shape[0])


class ConvTranspose3d(Module):
    kind = "conv_transpose3d"

    def __init__(self, in_ch: int, out_ch: int, kernel=2, stride=2, bias: bool = False,
                 dtype=np.float32):
        self.stride = T._tuple(stride, 3)
        self.weight = Parameter(np.zeros((in_ch, out_ch) + T._tuple(kernel, 3), dtype=dtype))
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def forward(self, x, train=False):
        self._cache = x
        b = self.bias.data if hasattr(self, "bias") else None
        return np.stack([T.conv_transpose3d(s, self.weight.data, b, self.stride) for s in x])

    def backward(self, gy):
        x = self._cache
        gw = np.zeros_like(self.weight.data)
        gx = []
        for xs, gs in zip(x, gy):
            gxs, gws, _ = T.conv_transpose3d_backward(xs, self.weight.data, gs, self.stride)
            gw += gws
            gx.append(gxs)
        self.weight.accumulate(gw)
        if hasattr(self, "bias"):
            self.bias.accumulate(gy.sum(axis=(0, 2, 3, 4)))
        self._cache = None
        return np.stack(gx)


class InstanceNorm(Module):
    kind = "norm"

    def __init__(self, channels: int, eps: float = T.DEFAULT_EPS, dtype=np.float32):
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x, train=False):
        self._cache = x
        return T.instance_norm(x, self.weight.data, self.bias.data, self.eps,
                               spatial_dims=x.ndim - 2)

    def backward(self, gy):
        x = self._cache
        gx, gg, gb = T.instance_norm_backward(x, self.weight.data, gy, self.eps,
                                              spatial_dims=x.ndim - 2)
        self.weight.accumulate(gg)
        self.bias.accumulate(gb)
        self._cache = None
        return gx


class BatchNorm(Module):
    kind = "norm"
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = T.DEFAULT_EPS, momentum: float = 0.1,
                 dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        # frozen branches must not drift their running statistics
        training = train and not self.weight.frozen
        self._cache = (x, training)
        return T.batch_norm(x, self.weight.data, self.bias.data, self.running_mean,
                            self.running_var, self.eps, self.momentum, training)

    def backward(self, gy):
        x, training = self._cache
        gx, gg, gb = T.batch_norm_backward(x, self.weight.data, gy, self.eps, training,
                                           self.running_mean, self.running_var)
        self.weight.accumulate(gg)
        self.bias.accumulate(gb)
        self._cache = None
        return gx


class LeakyReLU(Module):
    kind = "activation"

    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def forward(self, x, train=False):
        self._cache = x
        return T.leaky_relu(x, self.slope)

    def backward(self, gy):
        x, self._cache = self._cache, None
        return T.leaky_relu_backward(x, gy, self.slope)


class Linear(Module):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 dtype=np.float32):
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=dtype))
        if bias:
            self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x, train=False):
        self._cache = x
        return T.linear(x, self.weight.data, self.bias.data if hasattr(self, "bias") else None)

    def backward(self, gy):
        x, self._cache = self._cache, None
        gx, gw, gb = T.linear_backward(x, self.weight.data, gy)
        self.weight.accumulate(gw)
        if hasattr(self, "bias"):
            self.bias.accumulate(gb)
        return gx


class Dropout(Module):
    """Inverted dropout; the owner assigns ``rng`` before a training forward pass."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x, train=False):
        y, self._cache = T.dropout(x, self.rate, train, self.rng)
        return y

    def backward(self, gy):
        mask, self._cache = self._cache, None
        return T.dropout_backward(gy, mask)


class GlobalAvgPool(Module):
    kind = "pool"

    def forward(self, x, train=False):
        self._cache = x.shape
        return T.global_avg_pool(x, spatial_dims=x.ndim - 2)

    def backward(self, gy):
        shape, self._cache = self._cache, None
        return T.global_avg_pool_backward(shape, gy, spatial_dims=len(shape) - 2)


class SEBlock(Module):
    """Squeeze-and-excitation channel gating.

    squeeze = global average pool, excite = fc(C -> C/r), ReLU, fc(C/r -> C),
    sigmoid; the input is scaled per channel by the excitation.
    """

    kind = "se_block"

    def __init__(self, channels: int, reduction: int = 16, dtype=np.float32):
        hidden = max(channels // reduction, 1)
        self.reduce = Linear(channels, hidden, dtype=dtype)
        self.expand = Linear(hidden, channels, dtype=dtype)

    def forward(self, x, train=False):
        spatial = x.ndim - 2
        s = T.global_avg_pool(x, spatial_dims=spatial)
        h = self.reduce.forward(s)
        a = T.leaky_relu(h, 0.0)
        e = T.sigmoid(self.expand.forward(a))
        self._cache = (x, h, e)
        return x * e.reshape(e.shape + (1,) * spatial)

    def backward(self, gy):
        x, h, e = self._cache
        spatial = x.ndim - 2
        gx = gy * e.reshape(e.shape + (1,) * spatial)
        ge = (gy * x).sum(axis=tuple(range(2, x.ndim)))
        ga = self.expand.backward(T.sigmoid_backward(e, ge))
        gs = self.reduce.backward(T.leaky_relu_backward(h, ga, 0.0))
        gx += T.global_avg_pool_backward(x.shape, gs, spatial_dims=spatial)
        self._cache = None
        return gx


class Sequential(Module):
    kind = "sequential"

    def __init__(self, layers: list[Module]):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)
