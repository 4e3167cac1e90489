"""Objective functions: masked degradation loss, color-difference loss,
reconstruction loss, and their weighted total.

The degradation loss warps the LR patch onto the downscaled-HR grid with
frozen optical flow, masks pixels the warp cannot cover, and compares the
result to the mimicked LR. Gradients reach only the mimicked image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .flow import FlowField, compute_flow
from .imgproc import to_image, to_tensor


class LossError(Exception):
    pass


@dataclass
class LossReport:
    l_res: float
    l_deg: float
    l_cd: float
    l_total: float
    lam: float

    def as_dict(self) -> dict:
        return {"l_res": self.l_res, "l_deg": self.l_deg, "l_cd": self.l_cd,
                "l_total": self.l_total, "lambda": self.lam}


def _flow_to_grid(flow: FlowField, device=None) -> torch.Tensor:
    h, w = flow.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = (xs + flow.u) * (2.0 / (w - 1)) - 1.0
    sy = (ys + flow.v) * (2.0 / (h - 1)) - 1.0
    grid = np.stack([sx, sy], axis=-1).astype(np.float32)[None]
    return torch.from_numpy(grid).to(device) if device else torch.from_numpy(grid)


def warp_tensor(img: torch.Tensor, flow: FlowField) -> torch.Tensor:
    """Bilinear backward warp of a 1xCxHxW tensor; out-of-frame reads zero."""
    if img.shape[-2:] != flow.shape:
        raise LossError(f"image {tuple(img.shape[-2:])} vs flow {flow.shape} size mismatch")
    grid = _flow_to_grid(flow, img.device)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=True)


def warp(img: np.ndarray, flow: FlowField) -> np.ndarray:
    """Numpy-facing warp of an HxWxC image."""
    if img.shape[:2] != flow.shape:
        raise LossError(f"image {img.shape[:2]} vs flow {flow.shape} size mismatch")
    return to_image(warp_tensor(to_tensor(img), flow))


def validity_mask(flow: FlowField, epsilon: float) -> np.ndarray:
    """Binary HxW mask of pixels fully covered by the warp.

    A constant-ones image is warped by the flow; positions whose warped
    value stays >= 1-epsilon are valid.
    """
    if not 0 < epsilon < 1:
        raise LossError(f"epsilon must lie in (0,1), got {epsilon}")
    h, w = flow.shape
    ones = torch.ones(1, 1, h, w)
    with torch.no_grad():
        warped = warp_tensor(ones, flow)[0, 0].numpy()
    return (warped >= 1.0 - epsilon).astype(np.float32)


def degradation_loss(lr: np.ndarray, hr_down: np.ndarray, mim_lr: torch.Tensor,
                     flow_backend, epsilon: float = 1e-3) -> torch.Tensor:
    """Masked L1 between the flow-warped LR and the mimicked LR.

    Flow, warp target, and mask are constants for autodiff; the returned
    scalar is differentiable w.r.t. mim_lr only. Mean-reduced over valid
    pixels. Raises if no pixel is valid.
    """
    if lr.shape != hr_down.shape or lr.shape[:2] != tuple(mim_lr.shape[-2:]):
        raise LossError("degradation_loss inputs must share dimensions")
    psi = compute_flow(hr_down, lr, flow_backend)
    with torch.no_grad():
        lr_w = warp_tensor(to_tensor(lr).to(mim_lr.device), psi)
    mask = validity_mask(psi, epsilon)
    n_valid = float(mask.sum())
    if n_valid == 0:
        raise LossError("validity mask is empty: catastrophic misalignment for this patch")
    m = torch.from_numpy(mask).to(mim_lr.device)[None, None]
    if mim_lr.dim() == 3:
        mim_lr = mim_lr.unsqueeze(0)
    diff = (lr_w - mim_lr).abs() * m
    return diff.sum() / (n_valid * mim_lr.shape[1])


# ---------------------------------------------------------------------------
# color-difference scorers


def _srgb_to_lab(rgb: torch.Tensor) -> torch.Tensor:
    """Differentiable sRGB (Nx3xHxW, [0,1]) -> CIELAB (D65)."""
    r = torch.where(rgb > 0.04045, ((rgb.clamp(min=0.0) + 0.055) / 1.055) ** 2.4,
                    rgb / 12.92)
    mat = rgb.new_tensor([[0.4124564, 0.3575761, 0.1804375],
                          [0.2126729, 0.7151522, 0.0721750],
                          [0.0193339, 0.1191920, 0.9503041]])
    xyz = torch.einsum("ij,njhw->nihw", mat, r)
    white = rgb.new_tensor([0.95047, 1.0, 1.08883])[None, :, None, None]
    t = xyz / white
    delta = 6.0 / 29.0
    f = torch.where(t > delta ** 3, (t + 1e-12) ** (1.0 / 3.0),
                    t / (3 * delta ** 2) + 4.0 / 29.0)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    lab = torch.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], dim=1)
    return lab


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(x.clamp(min=0.0) + 1e-12)


def ciede2000(lab1: torch.Tensor, lab2: torch.Tensor) -> torch.Tensor:
    """Per-pixel CIEDE2000 distance between two Nx3xHxW Lab tensors."""
    l1, a1, b1 = lab1[:, 0], lab1[:, 1], lab1[:, 2]
    l2, a2, b2 = lab2[:, 0], lab2[:, 1], lab2[:, 2]
    c1 = _safe_sqrt(a1 ** 2 + b1 ** 2)
    c2 = _safe_sqrt(a2 ** 2 + b2 ** 2)
    cbar = 0.5 * (c1 + c2)
    c7 = cbar ** 7
    g = 0.5 * (1.0 - _safe_sqrt(c7 / (c7 + 25.0 ** 7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p = _safe_sqrt(a1p ** 2 + b1 ** 2)
    c2p = _safe_sqrt(a2p ** 2 + b2 ** 2)
    h1p = torch.rad2deg(torch.atan2(b1, a1p + 1e-12)) % 360.0
    h2p = torch.rad2deg(torch.atan2(b2, a2p + 1e-12)) % 360.0

    dl = l2 - l1
    dc = c2p - c1p
    dh = h2p - h1p
    dh = torch.where(dh > 180.0, dh - 360.0, dh)
    dh = torch.where(dh < -180.0, dh + 360.0, dh)
    zero_chroma = (c1p * c2p) < 1e-8
    dh = torch.where(zero_chroma, torch.zeros_like(dh), dh)
    dhh = 2.0 * _safe_sqrt(c1p * c2p) * torch.sin(torch.deg2rad(dh / 2.0))

    lbar = 0.5 * (l1 + l2)
    cbarp = 0.5 * (c1p + c2p)
    hsum = h1p + h2p
    habs = (h1p - h2p).abs()
    hbar = torch.where(habs <= 180.0, 0.5 * hsum,
                       torch.where(hsum < 360.0, 0.5 * (hsum + 360.0),
                                   0.5 * (hsum - 360.0)))
    hbar = torch.where(zero_chroma, hsum, hbar)

    rad = torch.deg2rad
    t = (1.0 - 0.17 * torch.cos(rad(hbar - 30.0)) + 0.24 * torch.cos(rad(2 * hbar))
         + 0.32 * torch.cos(rad(3 * hbar + 6.0)) - 0.20 * torch.cos(rad(4 * hbar - 63.0)))
    dtheta = 30.0 * torch.exp(-(((hbar - 275.0) / 25.0) ** 2))
    c7p = cbarp ** 7
    rc = 2.0 * _safe_sqrt(c7p / (c7p + 25.0 ** 7))
    sl = 1.0 + 0.015 * (lbar - 50.0) ** 2 / _safe_sqrt(20.0 + (lbar - 50.0) ** 2)
    sc = 1.0 + 0.045 * cbarp
    sh = 1.0 + 0.015 * cbarp * t
    rt = -torch.sin(rad(2 * dtheta)) * rc
    return _safe_sqrt((dl / sl) ** 2 + (dc / sc) ** 2 + (dhh / sh) ** 2
                      + rt * (dc / sc) * (dhh / sh))


class AnalyticColorScorer:
    """Differentiable CIEDE2000 between pooled regional average colors.

    Averaging each image down to a coarse grid first makes the score
    respond to chromatic / tonal shifts (gain, brightness, gamma) while
    staying insensitive to texture, blur, and per-pixel noise, which the
    degradation branch is supposed to carry. Zero iff colors match.

    The distance is squashed quadratically below `knee` (in dE2000 units;
    the default is roughly one just-noticeable difference). A raw distance
    has unit-magnitude gradient arbitrarily close to zero, so imperceptible
    color wobble would exert the same pull as a real chromatic shift and
    drown the other loss terms; the quadratic region makes the pull
    proportional to the deviation instead.
    """

    name = "analytic"

    def __init__(self, grid: int = 1, knee: float = 1.0):
        if grid < 1:
            raise LossError(f"pooling grid must be >= 1, got {grid}")
        if knee <= 0:
            raise LossError(f"knee must be positive, got {knee}")
        self.grid = grid
        self.knee = knee

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise LossError("color scorer inputs must share a shape")
        pa = F.adaptive_avg_pool2d(a, self.grid).clamp(0.0, 1.0)
        pb = F.adaptive_avg_pool2d(b, self.grid).clamp(0.0, 1.0)
        d = ciede2000(_srgb_to_lab(pa), _srgb_to_lab(pb))
        squashed = torch.where(d < self.knee, 0.5 * d * d / self.knee,
                               d - 0.5 * self.knee)
        return squashed.mean()


class _ColorNet(torch.nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        self.body = torch.nn.Sequential(
            torch.nn.Conv2d(6, width, 3, padding=1), torch.nn.ReLU(),
            torch.nn.Conv2d(width, width, 3, padding=1), torch.nn.ReLU(),
            torch.nn.Conv2d(width, 1, 3, padding=1))

    def forward(self, a, b):
        return self.body(torch.cat([a, b], dim=1)).abs().mean()


class LearnedColorScorer:
    """Pretrained color-difference network loaded from a weights file."""

    name = "learned"

    def __init__(self, weights_path: str | Path | None):
        weights_path = Path(weights_path) if weights_path else None
        if weights_path is None or not weights_path.is_file():
            raise LossError(
                f"learned color scorer requires a weights file, got {weights_path}; "
                "set loss.color_scorer=analytic to run without weights")
        self.net = _ColorNet()
        self.net.load_state_dict(torch.load(weights_path, map_location="cpu",
                                            weights_only=True))
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise LossError("color scorer inputs must share a shape")
        return self.net(a, b)


def make_color_scorer(kind: str = "analytic", weights: str | None = None):
    if kind == "analytic":
        return AnalyticColorScorer()
    if kind == "learned":
        return LearnedColorScorer(weights)
    raise LossError(f"unknown color scorer {kind!r} (choose learned|analytic)")


def color_loss(mim_lr: torch.Tensor, hr_down: torch.Tensor | np.ndarray,
               scorer) -> torch.Tensor:
    if isinstance(hr_down, np.ndarray):
        hr_down = to_tensor(hr_down).to(mim_lr.device)
    if mim_lr.dim() == 3:
        mim_lr = mim_lr.unsqueeze(0)
    return scorer(mim_lr, hr_down)


def reconstruction_loss(sr_out: torch.Tensor, hr: torch.Tensor | np.ndarray) -> torch.Tensor:
    if isinstance(hr, np.ndarray):
        hr = to_tensor(hr).to(sr_out.device)
    if sr_out.dim() == 3:
        sr_out = sr_out.unsqueeze(0)
    if sr_out.shape != hr.shape:
        raise LossError(f"reconstruction_loss shape mismatch: "
                        f"{tuple(sr_out.shape)} vs {tuple(hr.shape)}")
    return (sr_out - hr).abs().mean()


def total_loss(l_res, l_deg, l_cd, lam: float) -> LossReport:
    if lam < 0:
        raise LossError(f"lambda must be nonnegative, got {lam}")
    vals = [float(v) for v in (l_res, l_deg, l_cd)]
    return LossReport(l_res=vals[0], l_deg=vals[1], l_cd=vals[2],
                      l_total=vals[0] + vals[1] + lam * vals[2], lam=lam)
