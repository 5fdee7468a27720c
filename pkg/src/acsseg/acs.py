"""Axial-coronal-sagittal convolution.

One 2D kernel bank ``(C_out, C_in, k, k)`` covers a 3D volume: its output
channels are split into three groups, and each group convolves a different
family of planes. Axial planes are (H, W) with D as the slice axis, coronal
planes are (D, W) with H as the slice axis, and sagittal planes are (D, H)
with W as the slice axis. Group outputs are concatenated axial, coronal,
sagittal.

Each view is computed as a 3D convolution whose kernel has extent 1 along
the slice axis, which is exactly a batched 2D convolution over that axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import _tuple, conv3d, conv3d_backward

VIEWS = ("axial", "coronal", "sagittal")

# Axis (within D, H, W) that acts as the slice/batch axis of each view.
_SLICE_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}


def split_channels(c_out: int) -> tuple[int, int, int]:
    """Partition ``c_out`` into (axial, coronal, sagittal) group sizes.

    Remainder channels go to axial first, then coronal.

    >>> split_channels(7)
    (3, 2, 2)
    """
    if c_out < 1:
        raise ValueError(f"c_out must be >= 1, got {c_out}")
    base, rem = divmod(c_out, 3)
    return tuple(base + (1 if i < rem else 0) for i in range(3))


def acs_param_count(c_in: int, c_out: int, k: int, bias: bool = False) -> int:
    return c_out * c_in * k * k + (c_out if bias else 0)


@dataclass
class ACSKernel:
    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] | None = None
    split: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"ACS weight must be (C_out, C_in, k, k), got {self.weight.shape}")
        k = self.weight.shape[2]
        if k % 2 == 0:
            raise ValueError(f"even kernel size {k} has no same-padding")
        self.stride = _tuple(self.stride, 2)
        self.padding = _tuple(k // 2 if self.padding is None else self.padding, 2)
        self.split = split_channels(self.weight.shape[0])

    @property
    def k(self) -> int:
        return self.weight.shape[2]


def _view_params(kernel: ACSKernel, view: str):
    """Kernel/stride/padding triples for the 3D convolution realizing ``view``.

    Stride along the slice axis is plain subsampling (kernel extent 1).
    """
    axis = _SLICE_AXIS[view]
    s, p = kernel.stride, kernel.padding
    in_plane = [i for i in range(3) if i != axis]
    stride = [0, 0, 0]
    padding = [0, 0, 0]
    stride[axis] = s[0]
    for j, i in enumerate(in_plane):
        stride[i] = s[j]
        padding[i] = p[j]
    return axis, tuple(stride), tuple(padding)


def _group_slices(split):
    start = 0
    for view, n in zip(VIEWS, split):
        yield view, slice(start, start + n)
        start += n


def _view_weight(weight: np.ndarray, axis: int) -> np.ndarray:
    return np.expand_dims(weight, axis=2 + axis)


def acs_forward(x: np.ndarray, kernel: ACSKernel) -> np.ndarray:
    """Apply ``kernel`` tri-planarly to a ``(C_in, D, H, W)`` volume."""
    if x.ndim != 4 or x.shape[0] != kernel.weight.shape[1]:
        raise ValueError(
            f"input {x.shape} incompatible with ACS kernel {kernel.weight.shape}"
        )
    outs = []
    for view, sl in _group_slices(kernel.split):
        if sl.start == sl.stop:
            continue
        axis, stride, padding = _view_params(kernel, view)
        outs.append(conv3d(x, _view_weight(kernel.weight[sl], axis), None, stride, padding))
    shapes = {o.shape[1:] for o in outs}
    if len(shapes) != 1:
        raise ValueError(f"view outputs disagree in shape: {sorted(shapes)}")
    y = np.concatenate(outs, axis=0)
    if kernel.bias is not None:
        y += kernel.bias.reshape(-1, 1, 1, 1)
    return y


def acs_backward(x: np.ndarray, kernel: ACSKernel, grad_out: np.ndarray):
    """Adjoint of :func:`acs_forward`; ``grad_weight`` keeps the 2D kernel shape."""
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(kernel.weight)
    for view, sl in _group_slices(kernel.split):
        if sl.start == sl.stop:
            continue
        axis, stride, padding = _view_params(kernel, view)
        gx, gw, _ = conv3d_backward(x, _view_weight(kernel.weight[sl], axis),
                                    grad_out[sl], stride, padding)
        grad_x += gx
        grad_w[sl] = np.squeeze(gw, axis=2 + axis)
    grad_b = grad_out.reshape(grad_out.shape[0], -1).sum(axis=1)
    return grad_x, grad_w, grad_b
