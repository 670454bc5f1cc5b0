"""Resampling kernels shared by the autodiff resize op and the image pipeline.

Both kernels use the half-pixel convention: output pixel ``i`` samples the
source at ``(i + 0.5) * in/out - 0.5``, clamped to the valid index range.
Resizing to the same size is the exact identity, which the geometric
roundtrip tests rely on.
"""

from __future__ import annotations

import numpy as np


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic ``[out_size, in_size]`` linear interpolation operator.

    Expressing the resize as a matrix makes the adjoint (needed for the
    gradient) a plain transpose.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError(f"resize sizes must be >= 1, got {in_size} -> {out_size}")
    coords = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = (coords - lo).astype(dtype)
    lo0 = np.clip(lo, 0, in_size - 1)
    lo1 = np.clip(lo + 1, 0, in_size - 1)
    mat = np.zeros((out_size, in_size), dtype=dtype)
    rows = np.arange(out_size)
    # clamped endpoints may coincide; add.at accumulates the weights
    np.add.at(mat, (rows, lo0), (1.0 - frac).astype(dtype))
    np.add.at(mat, (rows, lo1), frac)
    return mat


def resize_bilinear(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes; leading axes pass through."""
    dtype = np.result_type(a.dtype, np.float32)
    ry = bilinear_matrix(a.shape[-2], out_h, dtype)
    rx = bilinear_matrix(a.shape[-1], out_w, dtype)
    t = np.tensordot(a.astype(dtype, copy=False), ry, axes=([a.ndim - 2], [1]))
    return np.tensordot(t, rx, axes=([t.ndim - 2], [1]))


def nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    """Source index per output pixel under the half-pixel convention."""
    if in_size < 1 or out_size < 1:
        raise ValueError(f"resize sizes must be >= 1, got {in_size} -> {out_size}")
    idx = np.floor((np.arange(out_size) + 0.5) * (in_size / out_size)).astype(np.int64)
    return np.clip(idx, 0, in_size - 1)


def resize_nearest(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of the last two axes (keeps labels categorical)."""
    yi = nearest_indices(a.shape[-2], out_h)
    xi = nearest_indices(a.shape[-1], out_w)
    return a[..., yi[:, None], xi[None, :]]
