"""Separable bilinear upsampling and area-average downsampling.

Both resamplers are expressed as a pair of 1-D weight matrices, so an image
``X`` of shape ``(H, W)`` maps to ``Wy @ X @ Wx.T``. Every row of every
matrix is non-negative and sums to one, which gives constant preservation
and the [min, max] bound for free.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape ``(n_out, n_in)``.

    Output sample ``i`` sits at source coordinate ``i * (n_in - 1) / (n_out - 1)``
    so the first and last samples coincide with the source corners.
    """
    if n_out < n_in:
        raise ValueError(f"cannot upsample {n_in} -> {n_out}")
    w = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        w[:, 0] = 1.0
        return w
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    w[rows, lo] = 1.0 - frac
    w[rows, lo + 1] += frac
    w.setflags(write=False)
    return w


@lru_cache(maxsize=32)
def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Area-average weights, shape ``(n_out, n_in)``.

    Output cell ``i`` covers source interval ``[i*s, (i+1)*s)`` with
    ``s = n_in / n_out``; each source pixel contributes its overlap with that
    interval, divided by ``s``. Non-integer ratios are handled exactly.
    """
    if n_out > n_in:
        raise ValueError(f"cannot downsample {n_in} -> {n_out}")
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        start, stop = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(start)), int(np.ceil(stop))
        for j in range(j0, min(j1, n_in)):
            overlap = min(stop, j + 1) - max(start, j)
            if overlap > 0:
                w[i, j] = overlap / scale
    w.setflags(write=False)
    return w


def bilinear_resize(plane: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Upsample a 2-D array (or ``(H, W, C)`` stack) to ``size = (height, width)``."""
    arr = np.asarray(plane, dtype=np.float64)
    wy = bilinear_weights(arr.shape[0], size[0])
    wx = bilinear_weights(arr.shape[1], size[1])
    return _apply(arr, wy, wx)


def area_resize(plane: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Downsample a 2-D array (or ``(H, W, C)`` stack) to ``size`` by area averaging."""
    arr = np.asarray(plane, dtype=np.float64)
    wy = area_weights(arr.shape[0], size[0])
    wx = area_weights(arr.shape[1], size[1])
    return _apply(arr, wy, wx)


def _apply(arr, wy, wx):
    if arr.ndim == 2:
        return wy @ arr @ wx.T
    if arr.ndim == 3:
        # (H, W, C): contract H with wy, W with wx
        return np.einsum("ih,hwc,jw->ijc", wy, arr, wx, optimize=True)
    raise ValueError(f"expected a 2-D or 3-D array, got shape {arr.shape}")
