"""Shared raster helpers: conversion, resampling, luminance.

Images are float32 HxWx3 arrays in [0,1] on the numpy side and
1x3xHxW (or Nx3xHxW) tensors on the torch side.
"""
from __future__ import annotations

import numpy as np
import torch


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """HxWx3 float array -> 1x3xHxW float32 tensor."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def to_image(t: torch.Tensor) -> np.ndarray:
    """1x3xHxW or 3xHxW tensor -> HxWx3 float32 array."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError("to_image expects a single image, got a batch")
        t = t[0]
    return t.detach().cpu().float().numpy().transpose(1, 2, 0)


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma from an HxWx3 image (same value range as input)."""
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def float_to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def uint8_to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 255.0


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    # Catmull-Rom (a = -0.5), support [-2, 2]
    a = -0.5
    ax = np.abs(x)
    out = np.zeros_like(ax)
    m1 = ax <= 1
    m2 = (ax > 1) & (ax < 2)
    out[m1] = (a + 2) * ax[m1] ** 3 - (a + 3) * ax[m1] ** 2 + 1
    out[m2] = a * ax[m2] ** 3 - 5 * a * ax[m2] ** 2 + 8 * a * ax[m2] - 4 * a
    return out


def _resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Dense (out_size x in_size) row-stochastic resampling matrix.

    Bicubic with kernel widening when minifying (antialias), edge samples
    replicated. Matches the usual imresize convention.
    """
    scale = out_size / in_size
    width = 4.0 if scale >= 1 else 4.0 / scale
    u = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2).astype(int)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    if scale < 1:
        w = _cubic_kernel(dist * scale) * scale
    else:
        w = _cubic_kernel(dist)
    w = w / w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    for r in range(out_size):
        np.add.at(mat[r], idx[r], w[r])
    return mat


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Antialiased bicubic resize of an HxW or HxWxC image."""
    h, w = img.shape[:2]
    mh = _resize_matrix(h, out_h)
    mw = _resize_matrix(w, out_w)
    flat = img.reshape(h, -1).astype(np.float64)
    tmp = mh @ flat                                  # out_h x (w*c)
    tmp = tmp.reshape(out_h, w, -1).transpose(0, 2, 1)
    out = tmp @ mw.T                                 # out_h x c x out_w
    out = out.transpose(0, 2, 1).reshape((out_h, out_w) + img.shape[2:])
    return out.astype(np.float32)


def apply_dihedral(img: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 flip/rotation symmetries; code in [0, 8)."""
    if not 0 <= code < 8:
        raise ValueError(f"dihedral code must be in [0, 8), got {code}")
    out = np.rot90(img, code % 4)
    if code >= 4:
        out = np.flip(out, axis=1)
    return np.ascontiguousarray(out)


def invert_dihedral(img: np.ndarray, code: int) -> np.ndarray:
    if code >= 4:
        img = np.flip(img, axis=1)
    return np.ascontiguousarray(np.rot90(img, -(code % 4)))
