"""3D and 4D convolution on :class:`~lfderain.tensor.Tensor`.

All convolutions are cross-correlations (no kernel flip) with stride 1 and
"same" zero padding, so every odd kernel preserves the input extents.

A 4D convolution over ``[C, S, V, H, W]`` data is assembled from 3D
convolutions: the channel axis is swapped with the unit axis ``S`` so each
3D-EPI unit becomes one batch item of a 3D convolution over ``(V, H, W)``;
the result for unit-kernel offset ``j`` is then shifted along ``S`` by
``j - pad`` and the shifted maps are summed.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, add, as_tensor, getitem, mean, pad, permute, reshape, transpose

__all__ = ["conv3d", "conv4d", "avg_pool_hw", "upsample_hw", "same_padding"]

# budget for one im2col buffer, in float64 elements
_COL_BUDGET = 24_000_000


def same_padding(kernel: Sequence[int]) -> tuple[int, ...]:
    for k in kernel:
        if k < 1 or k % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {tuple(kernel)}")
    return tuple((k - 1) // 2 for k in kernel)


def _corr3d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded 3D cross-correlation of ``x[B,Ci,...]`` with ``w[Co,Ci,k1,k2,k3]``."""
    k = w.shape[2:]
    p = same_padding(k)
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((q, q) for q in p))
    B = x.shape[0]
    per_item = int(np.prod(x.shape[1:])) * int(np.prod(k))
    chunk = max(1, _COL_BUDGET // max(per_item, 1))
    outs = []
    for start in range(0, B, chunk):
        win = sliding_window_view(xp[start:start + chunk], k, axis=(2, 3, 4))
        # win: [b, Ci, D1, D2, D3, k1, k2, k3]
        y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        outs.append(np.moveaxis(y, -1, 1))
    return np.ascontiguousarray(outs[0] if len(outs) == 1 else np.concatenate(outs, axis=0))


def _corr3d_weight_grad(x: np.ndarray, g: np.ndarray, k: tuple[int, int, int]) -> np.ndarray:
    p = same_padding(k)
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((q, q) for q in p))
    B = x.shape[0]
    per_item = int(np.prod(x.shape[1:])) * int(np.prod(k))
    chunk = max(1, _COL_BUDGET // max(per_item, 1))
    total = None
    for start in range(0, B, chunk):
        win = sliding_window_view(xp[start:start + chunk], k, axis=(2, 3, 4))
        part = np.tensordot(g[start:start + chunk], win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        total = part if total is None else total + part
    return total  # [Co, Ci, k1, k2, k3]


def conv3d(x, w, b=None) -> Tensor:
    """Same-padded 3D cross-correlation.

    Parameters
    ----------
    x : Tensor
        ``[C_in, D1, D2, D3]`` or batched ``[B, C_in, D1, D2, D3]``.
    w : Tensor
        ``[C_out, C_in, k1, k2, k3]`` with odd extents.
    b : Tensor, optional
        ``[C_out]`` bias.
    """
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.ndim == 4
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    k = tuple(w.shape[2:])
    same_padding(k)
    out = _corr3d(x.data, w.data)

    def fn(g):
        gx = gw = None
        if x.requires_grad:
            wt = np.ascontiguousarray(np.flip(w.data, axis=(2, 3, 4)).swapaxes(0, 1))
            gx = _corr3d(g, wt)
        if w.requires_grad:
            gw = _corr3d_weight_grad(x.data, g, k)
        return gx, gw
    y = Tensor._node(out, (x, w), fn)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
        y = add(y, reshape(b, (1, -1, 1, 1, 1)))
    if unbatched:
        y = reshape(y, y.shape[1:])
    return y


def conv4d(x, w, b=None) -> Tensor:
    """Same-padded 4D cross-correlation over ``(S, V, H, W)``.

    Parameters
    ----------
    x : Tensor
        ``[C_in, S, V, H, W]``.
    w : Tensor
        ``[C_out, C_in, k_s, k_v, k_h, k_w]`` with odd extents.
    b : Tensor, optional
        ``[C_out]`` bias.

    Returns
    -------
    Tensor
        ``[C_out, S, V, H, W]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 6:
        raise ShapeError(f"conv4d expects [C,S,V,H,W] input and 6-D kernel, got {x.shape}, {w.shape}")
    c_out, c_in, ks = w.shape[:3]
    if x.shape[0] != c_in:
        raise ShapeError(f"conv4d channel mismatch: input {x.shape[0]}, kernel {c_in}")
    ps = same_padding(w.shape[2:])[0]
    S = x.shape[1]

    units = permute(x, 0, 1)  # [S, C_in, V, H, W]: units become the batch
    # one 3D kernel per unit offset, stacked along the output channels
    w3 = reshape(transpose(w, (2, 0, 1, 3, 4, 5)), (ks * c_out, c_in) + w.shape[3:])
    y = conv3d(units, w3)  # [S, ks*C_out, V, H, W]
    y = reshape(y, (S, ks, c_out) + y.shape[2:])
    if ps:
        y = pad(y, [(ps, ps)] + [(0, 0)] * 5)
    acc = None
    for j in range(ks):
        shifted = getitem(y, (slice(j, j + S), j))  # unit s reads source unit s + j - ps
        acc = shifted if acc is None else add(acc, shifted)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"bias shape {b.shape} does not match {c_out} output channels")
        acc = add(acc, reshape(b, (1, -1, 1, 1, 1)))
    return permute(acc, 0, 1)


def avg_pool_hw(x, factor: int = 2) -> Tensor:
    """Average-pool the last two axes by ``factor`` (extents must divide)."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if H % factor or W % factor:
        raise ShapeError(f"spatial extents {H}x{W} not divisible by {factor}")
    lead = x.shape[:-2]
    r = reshape(x, lead + (H // factor, factor, W // factor, factor))
    n = r.ndim
    return mean(r, axis=(n - 3, n - 1))


def upsample_hw(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    lead = x.shape[:-2]
    H, W = x.shape[-2:]

    def fn(g):
        return (g.reshape(lead + (H, factor, W, factor)).sum(axis=(-3, -1)),)
    return Tensor._node(out, (x,), fn)
