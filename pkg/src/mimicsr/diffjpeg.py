"""Differentiable JPEG approximation.

DCT-domain quantization with either a smooth rounding surrogate or hard
rounding with straight-through gradients. Chroma subsampling is omitted;
blocking and band suppression, the artifacts that matter here, survive.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float32)

_CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99]], dtype=np.float32)


def _quality_tables(quality: float) -> tuple[np.ndarray, np.ndarray]:
    quality = float(np.clip(quality, 1, 100))
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    out = []
    for tbl in (_LUMA_TABLE, _CHROMA_TABLE):
        scaled = np.floor((tbl * s + 50.0) / 100.0)
        out.append(np.clip(scaled, 1, 255).astype(np.float32))
    return out[0], out[1]


def _dct_matrix() -> torch.Tensor:
    n = 8
    d = torch.zeros(n, n)
    for k in range(n):
        for i in range(n):
            d[k, i] = math.cos(math.pi * (2 * i + 1) * k / (2 * n))
    d[0] *= 1.0 / math.sqrt(n)
    d[1:] *= math.sqrt(2.0 / n)
    return d


_DCT = _dct_matrix()


def _rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 0.5
    return torch.stack([y, cb, cr], dim=1)


def _ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x[:, 0], x[:, 1] - 0.5, x[:, 2] - 0.5
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1)


def _soft_round(x: torch.Tensor) -> torch.Tensor:
    return x - torch.sin(2 * math.pi * x) / (2 * math.pi)


def _ste_round(x: torch.Tensor) -> torch.Tensor:
    return x + (torch.round(x) - x).detach()


def jpeg_approx(img: torch.Tensor, quality: float, mode: str = "soft") -> torch.Tensor:
    """Differentiable JPEG round-trip of an Nx3xHxW image in [0,1].

    mode='soft' uses a sine rounding surrogate; mode='hard' rounds exactly
    and passes gradients straight through.
    """
    if mode not in ("soft", "hard"):
        raise ValueError(f"jpeg mode must be soft|hard, got {mode!r}")
    n, c, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = F.pad(img, (0, pw, 0, ph), mode="replicate") if (ph or pw) else img
    hh, ww = x.shape[-2:]

    ycc = _rgb_to_ycbcr(x) * 255.0 - 128.0
    blocks = ycc.reshape(n, c, hh // 8, 8, ww // 8, 8).permute(0, 1, 2, 4, 3, 5)
    d = _DCT.to(img.device, img.dtype)
    coef = d @ blocks @ d.t()

    luma_t, chroma_t = _quality_tables(quality)
    tbl = torch.from_numpy(np.stack([luma_t, chroma_t, chroma_t])).to(img.device, img.dtype)
    tbl = tbl.view(1, 3, 1, 1, 8, 8)
    rounder = _soft_round if mode == "soft" else _ste_round
    coef = rounder(coef / tbl) * tbl

    rec = d.t() @ coef @ d
    rec = rec.permute(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww)
    out = _ycbcr_to_rgb((rec + 128.0) / 255.0)
    return out[:, :, :h, :w].clamp(0.0, 1.0)
