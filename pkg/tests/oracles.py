"""Independent reference implementations used as test oracles.

Nothing here imports the package's convolution or metric code.
"""
from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def naive_conv3d(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Direct loop over output voxels; ``x (C, D, H, W)``, ``w (O, C, kd, kh, kw)``."""
    xp = np.pad(x, [(0, 0)] + [(p, p) for p in padding])
    k = w.shape[2:]
    out_sp = [(xp.shape[1 + i] - k[i]) // stride[i] + 1 for i in range(3)]
    y = np.zeros((w.shape[0],) + tuple(out_sp), dtype=np.float64)
    for i, j, l in itertools.product(*map(range, out_sp)):
        d, h, v = i * stride[0], j * stride[1], l * stride[2]
        patch = xp[:, d:d + k[0], h:h + k[1], v:v + k[2]]
        y[:, i, j, l] = np.tensordot(w, patch, axes=([1, 2, 3, 4], [0, 1, 2, 3]))
    if b is not None:
        y += b[:, None, None, None]
    return y


def naive_conv_transpose3d(x, w, stride=(2, 2, 2)):
    """Scatter form: each input voxel stamps ``w[c]`` into the output; ``w (C_in, C_out, k...)``."""
    k = w.shape[2:]
    out_sp = [(x.shape[1 + i] - 1) * stride[i] + k[i] for i in range(3)]
    y = np.zeros((w.shape[1],) + tuple(out_sp))
    for c in range(x.shape[0]):
        for i, j, l in itertools.product(*map(range, x.shape[1:])):
            d, h, v = i * stride[0], j * stride[1], l * stride[2]
            y[:, d:d + k[0], h:h + k[1], v:v + k[2]] += x[c, i, j, l] * w[c]
    return y


def conv2d_slices(x2d, w, stride=(1, 1), padding=(0, 0)):
    """Batched 2D cross-correlation: ``x2d (N, C, A, B)``, ``w (O, C, k, k)`` -> ``(N, O, A', B')``."""
    xp = np.pad(x2d, [(0, 0), (0, 0), (padding[0],) * 2, (padding[1],) * 2])
    win = sliding_window_view(xp, w.shape[2:], axis=(2, 3))[:, :, ::stride[0], ::stride[1]]
    return np.einsum("ncabij,ocij->noab", win, w)


def acs_oracle(x, w, stride=(1, 1)):
    """Tri-planar convolution assembled from explicit per-slice 2D convolutions.

    Returns the three view outputs separately, each ``(n_view, D', H', W')``.
    """
    c_out, _, k, _ = w.shape
    base, rem = divmod(c_out, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    pad = (k // 2, k // 2)
    starts = np.cumsum([0] + sizes)
    outs = []
    for view, (a, z) in enumerate(zip(starts[:-1], starts[1:])):
        wv = w[a:z]
        if view == 0:    # axial: slices along D, plane (H, W)
            sl = x.transpose(1, 0, 2, 3)[::stride[0]]
            y = conv2d_slices(sl, wv, stride, pad).transpose(1, 0, 2, 3)
        elif view == 1:  # coronal: slices along H, plane (D, W)
            sl = x.transpose(2, 0, 1, 3)[::stride[0]]
            y = conv2d_slices(sl, wv, stride, pad).transpose(1, 2, 0, 3)
        else:            # sagittal: slices along W, plane (D, H)
            sl = x.transpose(3, 0, 1, 2)[::stride[0]]
            y = conv2d_slices(sl, wv, stride, pad).transpose(1, 2, 3, 0)
        outs.append(y)
    return outs


def count_dice(p, g):
    p = np.asarray(p, bool).ravel().tolist()
    g = np.asarray(g, bool).ravel().tolist()
    tp = sum(1 for a, b in zip(p, g) if a and b)
    fp = sum(1 for a, b in zip(p, g) if a and not b)
    fn = sum(1 for a, b in zip(p, g) if b and not a)
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def surface_points(mask):
    """Mask voxels with at least one 6-neighbour outside the mask (outside the volume counts)."""
    m = np.pad(np.asarray(mask, bool), 1)
    pts = []
    for idx in np.argwhere(m):
        i, j, l = idx
        nb = [m[i - 1, j, l], m[i + 1, j, l], m[i, j - 1, l], m[i, j + 1, l],
              m[i, j, l - 1], m[i, j, l + 1]]
        if not all(nb):
            pts.append(idx - 1)
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def _pct95(vals):
    v = sorted(vals)
    r = 0.95 * (len(v) - 1)
    lo = int(np.floor(r))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (r - lo)


def brute_hd95(p, g, spacing=(1.0, 1.0, 1.0), empty_penalty=373.13):
    sp, sg = surface_points(p), surface_points(g)
    if len(sp) == 0 and len(sg) == 0:
        return 0.0
    if len(sp) == 0 or len(sg) == 0:
        return empty_penalty
    s = np.asarray(spacing)
    d = np.sqrt((((sp[:, None, :] - sg[None, :, :]) * s) ** 2).sum(-1))
    return max(_pct95(d.min(axis=1)), _pct95(d.min(axis=0)))


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` at every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
