"""Dense array primitives with paired forward/backward functions.

Arrays are plain ``numpy.ndarray`` objects. Activations and weights are
float32 by default, but every function here preserves the input dtype, so
gradient checks can rerun the same code in float64.

Convolutions use cross-correlation (no kernel flip). Single-volume layouts
are channel-first: ``(C, D, H, W)`` for 3D and ``(N, C, A, B)`` for the
batched 2D convolution.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_EPS = 1e-5


def _tuple(value, n: int) -> tuple[int, ...]:
    if np.isscalar(value):
        return (int(value),) * n
    out = tuple(int(v) for v in value)
    if len(out) != n:
        raise ValueError(f"expected {n} values, got {len(out)}")
    return out


def output_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class _Geometry(NamedTuple):
    in_shape: tuple[int, ...]  # (C, D, H, W) before padding
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int]
    padding: tuple[int, int, int]
    out_spatial: tuple[int, int, int]
    padded: tuple[int, int, int]
    flat_len: int  # > 0 only for the stride-1 flat layout


def _geometry(in_shape, kernel, stride, padding) -> _Geometry:
    C, *spatial = in_shape
    out = []
    for axis, (n, k, s, p) in enumerate(zip(spatial, kernel, stride, padding)):
        if s < 1 or p < 0:
            raise ValueError(f"axis {axis}: stride must be >= 1 and padding >= 0")
        if n + 2 * p < k:
            raise ValueError(
                f"axis {axis}: extent {n} with padding {p} is smaller than kernel {k}"
            )
        out.append(output_extent(n, k, s, p))
    padded = tuple(n + 2 * p for n, p in zip(spatial, padding))
    flat_len = 0
    if stride == (1, 1, 1):
        Do, Ho, Wo = out
        _, Hp, Wp = padded
        flat_len = (Do - 1) * Hp * Wp + (Ho - 1) * Wp + Wo
    return _Geometry(tuple(in_shape), kernel, stride, padding, tuple(out), padded, flat_len)


def _offsets(geom: _Geometry):
    kd, kh, kw = geom.kernel
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                yield a, b, c


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, ((0, 0),) + tuple((p, p) for p in padding))


def _im2col(x: np.ndarray, geom: _Geometry) -> np.ndarray:
    """Gather kernel windows into a ``(K*C, M)`` matrix, kernel-offset major.

    With stride 1 the columns live on the padded grid flattened row-major:
    a kernel offset is then a constant shift, so each block is one contiguous
    slice. Positions that wrap around a row are garbage and get cropped later.
    """
    C = x.shape[0]
    xp = _pad(x, geom.padding)
    K = int(np.prod(geom.kernel))
    if geom.flat_len:
        _, Hp, Wp = geom.padded
        flat = xp.reshape(C, -1)
        L = geom.flat_len
        cols = np.empty((K, C, L), dtype=x.dtype)
        for i, (a, b, c) in enumerate(_offsets(geom)):
            off = a * Hp * Wp + b * Wp + c
            cols[i] = flat[:, off:off + L]
        return cols.reshape(K * C, L)
    Do, Ho, Wo = geom.out_spatial
    sd, sh, sw = geom.stride
    cols = np.empty((K, C, Do, Ho, Wo), dtype=x.dtype)
    for i, (a, b, c) in enumerate(_offsets(geom)):
        cols[i] = xp[:, a:a + sd * (Do - 1) + 1:sd, b:b + sh * (Ho - 1) + 1:sh,
                     c:c + sw * (Wo - 1) + 1:sw]
    return cols.reshape(K * C, Do * Ho * Wo)


def _col2im(dcols: np.ndarray, geom: _Geometry) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back onto the input grid."""
    C = geom.in_shape[0]
    K = int(np.prod(geom.kernel))
    Dp, Hp, Wp = geom.padded
    gxp = np.zeros((C, Dp, Hp, Wp), dtype=dcols.dtype)
    if geom.flat_len:
        L = geom.flat_len
        flat = gxp.reshape(C, -1)
        blocks = dcols.reshape(K, C, L)
        for i, (a, b, c) in enumerate(_offsets(geom)):
            off = a * Hp * Wp + b * Wp + c
            flat[:, off:off + L] += blocks[i]
    else:
        Do, Ho, Wo = geom.out_spatial
        sd, sh, sw = geom.stride
        blocks = dcols.reshape(K, C, Do, Ho, Wo)
        for i, (a, b, c) in enumerate(_offsets(geom)):
            gxp[:, a:a + sd * (Do - 1) + 1:sd, b:b + sh * (Ho - 1) + 1:sh,
                c:c + sw * (Wo - 1) + 1:sw] += blocks[i]
    pd, ph, pw = geom.padding
    return gxp[:, pd:Dp - pd, ph:Hp - ph, pw:Wp - pw]


def _unflatten(out: np.ndarray, geom: _Geometry) -> np.ndarray:
    O = out.shape[0]
    Do, Ho, Wo = geom.out_spatial
    if not geom.flat_len:
        return out.reshape(O, Do, Ho, Wo)
    _, Hp, Wp = geom.padded
    full = np.zeros((O, Do * Hp * Wp), dtype=out.dtype)
    full[:, :geom.flat_len] = out
    return np.ascontiguousarray(full.reshape(O, Do, Hp, Wp)[:, :, :Ho, :Wo])


def _flatten(grad_out: np.ndarray, geom: _Geometry) -> np.ndarray:
    O = grad_out.shape[0]
    if not geom.flat_len:
        return grad_out.reshape(O, -1)
    Do, Ho, Wo = geom.out_spatial
    _, Hp, Wp = geom.padded
    full = np.zeros((O, Do, Hp, Wp), dtype=grad_out.dtype)
    full[:, :, :Ho, :Wo] = grad_out
    return full.reshape(O, -1)[:, :geom.flat_len]


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    # (O, C, kd, kh, kw) -> (O, K*C), kernel-offset major to match _im2col
    O, C = weight.shape[:2]
    return weight.reshape(O, C, -1).transpose(0, 2, 1).reshape(O, -1)


def _check_conv(x: np.ndarray, weight: np.ndarray):
    if x.ndim != 4:
        raise ValueError(f"expected input (C, D, H, W), got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"expected 3D kernel (C_out, C_in, kd, kh, kw), got {weight.shape}")
    if x.shape[0] != weight.shape[1]:
        raise ValueError(
            f"channel axis: input has {x.shape[0]} channels, kernel expects {weight.shape[1]}"
        )


def conv3d_geometry(x_shape, weight_shape, stride=1, padding=0) -> _Geometry:
    return _geometry(tuple(x_shape), tuple(weight_shape[2:]), _tuple(stride, 3), _tuple(padding, 3))


def conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride=1, padding=0) -> np.ndarray:
    """3D cross-correlation of a ``(C_in, D, H, W)`` volume.

    Output extent per axis is ``floor((n + 2*pad - k) / stride) + 1``.
    """
    _check_conv(x, weight)
    geom = conv3d_geometry(x.shape, weight.shape, stride, padding)
    out = _weight_matrix(weight) @ _im2col(x, geom)
    y = _unflatten(out, geom)
    if bias is not None:
        y += bias.reshape(-1, 1, 1, 1)
    return y


def conv3d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    stride=1, padding=0, cols: np.ndarray | None = None):
    """Gradients of :func:`conv3d` w.r.t. input, weight and bias.

    ``cols`` may carry the forward im2col matrix to skip recomputing it.
    """
    _check_conv(x, weight)
    geom = conv3d_geometry(x.shape, weight.shape, stride, padding)
    expected = (weight.shape[0],) + geom.out_spatial
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    if cols is None:
        cols = _im2col(x, geom)
    g = _flatten(grad_out, geom)
    wm = _weight_matrix(weight)
    grad_w = (g @ cols.T).reshape(weight.shape[0], -1, weight.shape[1])
    grad_w = grad_w.transpose(0, 2, 1).reshape(weight.shape)
    grad_x = _col2im(wm.T @ g, geom)
    grad_b = grad_out.reshape(grad_out.shape[0], -1).sum(axis=1)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv_transpose3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                     stride=2, padding=0) -> np.ndarray:
    """Transposed 3D convolution; ``weight`` is ``(C_in, C_out, kd, kh, kw)``.

    This is the input-adjoint of :func:`conv3d` with the same weight, so the
    output extent is ``(n - 1) * stride + k - 2 * pad``.
    """
    if x.ndim != 4 or weight.ndim != 5 or x.shape[0] != weight.shape[0]:
        raise ValueError(f"input {x.shape} incompatible with transposed kernel {weight.shape}")
    stride = _tuple(stride, 3)
    padding = _tuple(padding, 3)
    out_spatial = tuple((n - 1) * s + k - 2 * p
                        for n, k, s, p in zip(x.shape[1:], weight.shape[2:], stride, padding))
    if min(out_spatial) < 1:
        raise ValueError(f"transposed convolution yields empty output {out_spatial}")
    geom = _geometry((weight.shape[1],) + out_spatial, tuple(weight.shape[2:]), stride, padding)
    if geom.out_spatial != x.shape[1:]:
        raise ValueError("transposed convolution geometry is not invertible for this input")
    y = _col2im(_weight_matrix(weight).T @ _flatten(x, geom), geom)
    y = np.ascontiguousarray(y)
    if bias is not None:
        y += bias.reshape(-1, 1, 1, 1)
    return y


def conv_transpose3d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                              stride=2, padding=0):
    stride = _tuple(stride, 3)
    padding = _tuple(padding, 3)
    geom = _geometry(grad_out.shape, tuple(weight.shape[2:]), stride, padding)
    if geom.out_spatial != x.shape[1:] or grad_out.shape[0] != weight.shape[1]:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output")
    cols = _im2col(grad_out, geom)
    g = _flatten(x, geom)
    grad_x = _unflatten(_weight_matrix(weight) @ cols, geom)
    grad_w = (g @ cols.T).reshape(weight.shape[0], -1, weight.shape[1])
    grad_w = grad_w.transpose(0, 2, 1).reshape(weight.shape)
    grad_b = grad_out.reshape(grad_out.shape[0], -1).sum(axis=1)
    return grad_x, grad_w, grad_b


def conv2d_batched(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                   stride=1, padding=0) -> np.ndarray:
    """2D cross-correlation applied independently to each slice of ``(N, C, A, B)``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"expected (N, C, A, B) input and 4D kernel, got {x.shape}, {weight.shape}")
    sa, sb = _tuple(stride, 2)
    pa, pb = _tuple(padding, 2)
    vol = x.transpose(1, 0, 2, 3)
    y = conv3d(vol, weight[:, :, None], bias, stride=(1, sa, sb), padding=(0, pa, pb))
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def conv2d_batched_backward(x, weight, grad_out, stride=1, padding=0):
    sa, sb = _tuple(stride, 2)
    pa, pb = _tuple(padding, 2)
    gx, gw, gb = conv3d_backward(x.transpose(1, 0, 2, 3), weight[:, :, None],
                                 grad_out.transpose(1, 0, 2, 3),
                                 stride=(1, sa, sb), padding=(0, pa, pb))
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3)), gw[:, :, 0], gb


def _norm_axes(x: np.ndarray, spatial_dims: int | None) -> tuple[int, ...]:
    n = x.ndim - 1 if spatial_dims is None else spatial_dims
    return tuple(range(x.ndim - n, x.ndim))


def _channel_view(v: np.ndarray, x: np.ndarray, axes) -> np.ndarray:
    shape = [1] * x.ndim
    shape[axes[0] - 1] = -1
    return v.reshape(shape)


def instance_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                  eps: float = DEFAULT_EPS, spatial_dims: int | None = None) -> np.ndarray:
    """Normalize each channel over its spatial axes, then apply the affine map.

    ``x`` is ``(C, *spatial)``; pass ``spatial_dims`` to normalize a batched
    ``(N, C, *spatial)`` array per sample.
    """
    axes = _norm_axes(x, spatial_dims)
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return xhat * _channel_view(gamma, x, axes) + _channel_view(beta, x, axes)


def instance_norm_backward(x, gamma, grad_out, eps: float = DEFAULT_EPS,
                           spatial_dims: int | None = None):
    axes = _norm_axes(x, spatial_dims)
    mean = x.mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=axes, keepdims=True) + eps)
    xhat = (x - mean) * inv_std
    param_axes = tuple(a for a in range(x.ndim) if a != axes[0] - 1)
    grad_gamma = (grad_out * xhat).sum(axis=param_axes)
    grad_beta = grad_out.sum(axis=param_axes)
    gxhat = grad_out * _channel_view(gamma, x, axes)
    grad_x = inv_std * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
    return grad_x, grad_gamma, grad_beta


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = DEFAULT_EPS, momentum: float = 0.1,
               training: bool = True) -> np.ndarray:
    """Batch normalization over ``(N, C, *spatial)``.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance).
    """
    axes = (0,) + tuple(range(2, x.ndim))
    if not training:
        shape = (1, -1) + (1,) * (x.ndim - 2)
        xhat = (x - running_mean.reshape(shape)) / np.sqrt(running_var.reshape(shape) + eps)
        return xhat * gamma.reshape(shape) + beta.reshape(shape)
    count = x.size // x.shape[1]
    if count < 2:
        raise ValueError("batch_norm in training mode needs at least 2 values per channel")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    running_mean *= 1 - momentum
    running_mean += momentum * mean.astype(running_mean.dtype)
    running_var *= 1 - momentum
    running_var += momentum * (var * count / (count - 1)).astype(running_var.dtype)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    xhat = (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps)
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


def batch_norm_backward(x, gamma, grad_out, eps: float = DEFAULT_EPS, training: bool = True,
                        running_mean: np.ndarray | None = None,
                        running_var: np.ndarray | None = None):
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    if not training:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode backward needs the running statistics")
        inv_std = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (x - running_mean.reshape(shape)) * inv_std
        grad_x = grad_out * gamma.reshape(shape) * inv_std
        return grad_x, (grad_out * xhat).sum(axis=axes), grad_out.sum(axis=axes)
    mean = x.mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=axes, keepdims=True) + eps)
    xhat = (x - mean) * inv_std
    gxhat = grad_out * gamma.reshape(shape)
    grad_x = inv_std * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
    return grad_x, (grad_out * xhat).sum(axis=axes), grad_out.sum(axis=axes)


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x >= 0, grad_out, grad_out * x.dtype.type(slope))


def global_avg_pool(x: np.ndarray, spatial_dims: int | None = None) -> np.ndarray:
    """Per-channel mean over the spatial axes: ``(C, *spatial) -> (C,)``."""
    return x.mean(axis=_norm_axes(x, spatial_dims))


def global_avg_pool_backward(x_shape: Sequence[int], grad_out: np.ndarray,
                             spatial_dims: int | None = None) -> np.ndarray:
    n = len(x_shape) - 1 if spatial_dims is None else spatial_dims
    count = int(np.prod(x_shape[len(x_shape) - n:]))
    g = (grad_out / grad_out.dtype.type(count)).reshape(grad_out.shape + (1,) * n)
    return np.broadcast_to(g, tuple(x_shape)).copy()


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    g2 = grad_out.reshape(-1, weight.shape[0])
    grad_w = g2.T @ x.reshape(-1, weight.shape[1])
    return grad_out @ weight, grad_w, g2.sum(axis=0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward from the sigmoid *output* ``y``."""
    return grad_out * y * (1 - y)


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` already holds the 1/(1-rate) scale."""
    if not training or rate == 0.0:
        return x, None
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask
